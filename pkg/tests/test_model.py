import time

import mpmath
import numpy as np
import pytest

from _oracles import analytic_grads, grad_check, random_batch
from ptrgen import model as M
from ptrgen import tensor as tt
from ptrgen.errors import DegenerateMaskError, DimensionError, IdOutOfRangeError
from ptrgen.tensor import Tape, Tensor

V, E, H_ = 20, 4, 8


def micro(seed=0, scale=0.5, V=V):
    return M.init_params(V, E, H_, seed=seed, scale=scale)


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


# --- parameters -------------------------------------------------------------------

def test_param_count_by_hand():
    # embedding 80, two encoder LSTMs 2*(8*16+16), bridges 2*(64+8), decoder 20*32+32,
    # attention 64+64+8+8+8, output 16*8+8+8*20+20, pointer 8+8+12+1
    hand = 80 + 2 * 144 + 2 * 72 + 672 + 152 + 316 + 29
    assert M.param_count(V, E, H_) == hand == micro().count


def test_init_deterministic_and_bounded():
    a, b = M.init_params(30, 6, 10, seed=5), M.init_params(30, 6, 10, seed=5)
    for name in M.PARAM_NAMES:
        assert np.array_equal(a[name].data, b[name].data)
    c = M.init_params(30, 6, 10, seed=6)
    assert not np.array_equal(a["embedding"].data, c["embedding"].data)
    for name, t in a.items():
        if name in M.LSTM_BIASES:
            hid = t.shape[0] // 4
            assert np.all(t.data[hid:2 * hid] == 1.0)
            assert np.all(np.delete(t.data, np.s_[hid:2 * hid]) == 0.0)
        else:
            assert np.all(np.abs(t.data) <= 0.02)
    with pytest.raises(ValueError):
        M.init_params(4, 2, 2)


def test_init_float32():
    p = M.init_params(30, 6, 10, dtype=np.float32)
    assert all(t.dtype == np.float32 for t in p)


# --- LSTM ---------------------------------------------------------------------------------

def lstm_oracle(x, h, c, W, b):
    hid = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W + b
    i, f, o, g = (z[:, k * hid:(k + 1) * hid] for k in range(4))
    c_new = sig(f) * c + sig(i) * np.tanh(g)
    return sig(o) * np.tanh(c_new), c_new


def test_lstm_zero_case():
    h, c = M.lstm_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))),
                       Tensor(np.zeros((5, 8))), Tensor(np.zeros(8)))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_saturated_gates_keep_cell():
    rng = np.random.default_rng(0)
    b = np.zeros(8)
    b[0:2] = -50.0  # input gate closed
    b[2:4] = 50.0  # forget gate open
    c_prev = rng.normal(size=(3, 2))
    _, c = M.lstm_step(Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(3, 2))), Tensor(c_prev),
                       Tensor(rng.normal(size=(5, 8)) * 0.1), Tensor(b))
    np.testing.assert_allclose(c.data, c_prev, atol=1e-6)


def test_lstm_transcription_oracle():
    rng = np.random.default_rng(1)
    args = [rng.normal(size=s) for s in ((4, 3), (4, 5), (4, 5), (8, 20), (20,))]
    h, c = M.lstm_step(*map(Tensor, args))
    ho, co = lstm_oracle(*args)
    np.testing.assert_allclose(h.data, ho, rtol=0, atol=1e-15)
    np.testing.assert_allclose(c.data, co, rtol=0, atol=1e-15)


def test_lstm_shape_error():
    with pytest.raises(DimensionError):
        M.lstm_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))),
                    Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)))


# --- encoder ------------------------------------------------------------------------------

def test_encode_single_token():
    p = micro()
    H, s0 = M.encode(np.array([[7]]), np.ones((1, 1)), p)
    assert H.shape == (1, 1, H_)
    np.testing.assert_array_equal(s0.coverage.data, [[0.0]])
    np.testing.assert_array_equal(s0.prev_context.data, np.zeros((1, H_)))


def test_encode_identical_rows():
    p = micro()
    ids = np.array([[5, 6, 7], [5, 6, 7]])
    H, s0 = M.encode(ids, np.ones(ids.shape), p)
    assert np.array_equal(H.data[0], H.data[1])
    assert np.array_equal(s0.s_h.data[0], s0.s_h.data[1])


def test_encode_reverse_with_tied_weights():
    p = micro(seed=3)
    p["enc_bw_W"].data[...] = p["enc_fw_W"].data
    p["enc_bw_b"].data[...] = p["enc_fw_b"].data
    ids = np.array([[4, 9, 11, 5, 17, 8]])
    half = H_ // 2
    Hf, _ = M.encode(ids, np.ones(ids.shape), p)
    Hr, _ = M.encode(ids[:, ::-1], np.ones(ids.shape), p)
    fw = Hf.data[0, :, :half]
    bw_rev = Hr.data[0, :, half:]
    np.testing.assert_array_equal(bw_rev[::-1], fw)


def test_encode_bridge_and_padding():
    p = micro(seed=4)
    ids = np.array([[4, 9, 11, 0, 0], [4, 9, 11, 5, 6]])
    mask = (ids != 0).astype(float)
    H, s0 = M.encode(ids, mask, p)
    Hs, s0s = M.encode(ids[:1, :3], np.ones((1, 3)), p)
    # a padded row behaves exactly like its unpadded prefix
    np.testing.assert_allclose(H.data[0, :3], Hs.data[0], atol=1e-15)
    np.testing.assert_allclose(s0.s_h.data[0], s0s.s_h.data[0], atol=1e-15)
    half = H_ // 2
    fin = np.concatenate([Hs.data[0, -1, :half], Hs.data[0, 0, half:]])
    np.testing.assert_allclose(s0s.s_h.data[0], fin @ p["red_h_W"].data + p["red_h_b"].data, atol=1e-15)


# --- attention / context ---------------------------------------------------------------

def attn_inputs(seed=0, B=2, T=5):
    rng = np.random.default_rng(seed)
    p = micro(seed)
    return (p, Tensor(rng.normal(size=(B, H_))), Tensor(rng.normal(size=(B, T, H_))),
            Tensor(rng.uniform(0, 2, size=(B, T))), rng)


def test_attention_single_position_is_one_hot():
    p, s, H, cov, _ = attn_inputs()
    mask = np.zeros((2, 5))
    mask[:, 3] = 1
    a, _ = M.attention(s, H, cov, mask, p)
    np.testing.assert_array_equal(a.data, mask)
    with pytest.raises(DegenerateMaskError):
        M.attention(s, H, cov, np.zeros((2, 5)), p)
    with pytest.raises(DimensionError):
        M.attention(s, H, Tensor(np.zeros((2, 4))), np.ones((2, 4)), p)


def test_attention_zero_coverage_matches_coverage_free():
    p, s, H, _, _ = attn_inputs()
    zero = Tensor(np.zeros((2, 5)))
    a1, e1 = M.attention(s, H, zero, np.ones((2, 5)), p, use_coverage=True)
    a2, e2 = M.attention(s, H, zero, np.ones((2, 5)), p, use_coverage=False)
    np.testing.assert_array_equal(a1.data, a2.data)


def test_attention_formula_transcription():
    p, s, H, cov, _ = attn_inputs(2)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    a, e = M.attention(s, H, cov, mask, p)
    Wh, Ws, wc, b, v = (p[n].data for n in ("attn_W_h", "attn_W_s", "attn_w_c", "attn_b", "attn_v"))
    for bi in range(2):
        for i in range(5):
            pre = H.data[bi, i] @ Wh + s.data[bi] @ Ws + cov.data[bi, i] * wc[0] + b
            assert abs(e.data[bi, i] - v @ np.tanh(pre)) < 1e-13


def test_more_coverage_lowers_attention_when_penalised():
    p, s, H, cov, _ = attn_inputs(3)
    p["attn_w_c"].data[0] = -0.8 * p["attn_v"].data
    mask = np.ones((2, 5))
    a0, e0 = M.attention(s, H, cov, mask, p)
    bumped = cov.data.copy()
    bumped[:, 2] += 0.5
    a1, e1 = M.attention(s, H, Tensor(bumped), mask, p)
    assert np.all(a1.data[:, 2] < a0.data[:, 2])
    np.testing.assert_array_equal(np.delete(e1.data, 2, axis=1), np.delete(e0.data, 2, axis=1))


def test_context_cases():
    rng = np.random.default_rng(0)
    H = Tensor(rng.normal(size=(2, 3, 4)))
    onehot = np.array([[0, 1.0, 0], [0, 0, 1.0]])
    np.testing.assert_array_equal(M.context(Tensor(onehot), H).data, H.data[[0, 1], [1, 2]])
    uniform = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    np.testing.assert_allclose(M.context(Tensor(uniform), H).data, H.data[:, :2].mean(axis=1), atol=1e-15)
    a = rng.dirichlet(np.ones(3), size=2)
    naive = np.zeros((2, 4))
    for b in range(2):
        for i in range(3):
            naive[b] += a[b, i] * H.data[b, i]
    np.testing.assert_allclose(M.context(Tensor(a), H).data, naive, atol=1e-15)


# --- output distributions ------------------------------------------------------------

def test_vocab_dist_zero_weights_uniform():
    p = micro()
    for n in ("out_V1", "out_b1", "out_V2", "out_b2"):
        p[n].data[...] = 0
    P = M.vocab_dist(Tensor(np.ones((2, H_))), Tensor(np.ones((2, H_))), p).data
    np.testing.assert_allclose(P, 1.0 / V, rtol=1e-15)


def test_vocab_dist_sums_and_argmax_oracle():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(7)
    p = micro(7, scale=1.0)
    for _ in range(5):
        s, h = rng.normal(size=(1, H_)), rng.normal(size=(1, H_))
        P = M.vocab_dist(Tensor(s), Tensor(h), p).data[0]
        assert abs(P.sum() - 1) < 1e-9
        x = [mpmath.mpf(float(v)) for v in np.concatenate([s[0], h[0]])]
        V1, b1, V2, b2 = (p[n].data for n in ("out_V1", "out_b1", "out_V2", "out_b2"))
        hid = [mpmath.fsum(x[k] * mpmath.mpf(float(V1[k, j])) for k in range(2 * H_)) + mpmath.mpf(float(b1[j]))
               for j in range(H_)]
        logits = [mpmath.fsum(hid[k] * mpmath.mpf(float(V2[k, j])) for k in range(H_)) + mpmath.mpf(float(b2[j]))
                  for j in range(V)]
        assert int(np.argmax(P)) == max(range(V), key=lambda j: logits[j])


def test_p_gen_cases():
    rng = np.random.default_rng(2)
    p = micro(2, scale=1.0)
    h, x, s = rng.normal(size=(3, H_)), rng.normal(size=(3, E + H_)), rng.normal(size=(3, H_))
    got = M.p_gen(Tensor(h), Tensor(x), Tensor(s), p).data
    ref = sig(h @ p["ptr_w_hstar"].data + s @ p["ptr_w_s"].data + x @ p["ptr_w_x"].data + p["ptr_b"].data)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    z = micro()
    for n in ("ptr_w_hstar", "ptr_w_s", "ptr_w_x"):
        z[n].data[...] = 0
    assert np.all(M.p_gen(Tensor(h), Tensor(x), Tensor(s), z).data == 0.5)
    z["ptr_b"].data[...] = 40.0
    assert np.all(M.p_gen(Tensor(h), Tensor(x), Tensor(s), z).data > 1 - 1e-15)


def test_final_dist_examples():
    Pv = np.array([0.1, 0.2, 0.3, 0.15, 0.25])
    a = np.array([0.3, 0.2, 0.5])
    ext = np.array([6, 6, 1])
    out = M.final_dist(Tensor(Pv), Tensor(a), 1.0, ext, 5, 2).data
    np.testing.assert_array_equal(out, np.concatenate([Pv, [0.0, 0.0]]))
    out = M.final_dist(Tensor(Pv), Tensor([0.0, 0.0, 1.0]), 0.0, ext, 5, 2).data
    np.testing.assert_array_equal(out, np.eye(7)[1])
    out = M.final_dist(Tensor(Pv), Tensor(a), 0.0, ext, 5, 2).data
    assert out[6] == 0.5
    out = M.final_dist(Tensor(Pv), Tensor(a), 0.3, ext, 5, 2).data
    assert abs(out.sum() - 1) < 1e-12
    with pytest.raises(IdOutOfRangeError):
        M.final_dist(Tensor(Pv), Tensor(a), 0.5, np.array([7, 0, 0]), 5, 2)


def test_copy_monotone_in_p_gen():
    rng = np.random.default_rng(4)
    for _ in range(50):
        Pv = rng.dirichlet(np.ones(6))
        a = rng.dirichlet(np.ones(4))
        ext = rng.integers(0, 8, size=4)
        w = int(ext[0])
        copy_mass = a[ext == w].sum()
        gen_mass = Pv[w] if w < 6 else 0.0
        prev = None
        for pg in np.linspace(1, 0, 11):
            out = M.final_dist(Tensor(Pv), Tensor(a), pg, ext, 6, 2).data
            assert abs(out.sum() - 1) < 1e-12
            if prev is not None and gen_mass < copy_mass:
                assert out[w] >= prev
            prev = out[w]


# --- decoder step ----------------------------------------------------------------

def setup_step(seed=0):
    rng = np.random.default_rng(seed)
    p = micro(seed)
    batch = random_batch(rng, V, batch=2, t_enc=5, t_dec=4, max_oov=2)
    H, s0 = M.encode(batch.enc_ids, batch.enc_mask, p)
    return p, batch, H, s0


def test_decoder_step_coverage_accumulates():
    p, batch, H, s0 = setup_step(1)
    assert np.all(s0.coverage.data == 0)
    state, total = s0, np.zeros_like(s0.coverage.data)
    for t in range(3):
        P, a, state = M.decoder_step(state, batch.dec_input[:, t], H, batch.enc_ext_ids, batch.enc_mask, p,
                                     batch.max_oov)
        total = total + a.data
        np.testing.assert_array_equal(state.coverage.data, total)
        assert np.all(state.coverage.data[batch.enc_mask == 0] == 0)
        np.testing.assert_allclose(P.data.sum(axis=1), 1.0, atol=1e-12)


def test_decoder_step_half_half_coverage():
    p = micro()
    H = Tensor(np.zeros((1, 2, H_)))  # equal states give equal energies
    mask = np.ones((1, 2))
    s0 = M.DecoderState(*(Tensor(np.zeros((1, n))) for n in (H_, H_, 2, H_)))
    p["attn_w_c"].data[...] = 0
    _, a, s1 = M.decoder_step(s0, [4], H, [[5, 6]], mask, p)
    _, a, s2 = M.decoder_step(s1, [5], H, [[5, 6]], mask, p)
    np.testing.assert_array_equal(a.data, [[0.5, 0.5]])
    np.testing.assert_array_equal(s2.coverage.data, [[1.0, 1.0]])


def test_decoder_step_composition_oracle():
    p, batch, H, s0 = setup_step(2)
    y = np.array([4, V + 1])  # an extended id must be embedded as UNK
    P, a, st = M.decoder_step(s0, y, H, batch.enc_ext_ids, batch.enc_mask, p, batch.max_oov + 1)
    Ed = p["embedding"].data
    x = np.concatenate([Ed[[4, 1]], s0.prev_context.data], axis=-1)
    hs, cs = lstm_oracle(x, s0.s_h.data, s0.s_c.data, p["dec_W"].data, p["dec_b"].data)
    a_ref, _ = M.attention(Tensor(hs), H, s0.coverage, batch.enc_mask, p)
    ctx = np.einsum("bt,btd->bd", a_ref.data, H.data)
    Pv = M.vocab_dist(Tensor(hs), Tensor(ctx), p).data
    pg = M.p_gen(Tensor(ctx), Tensor(x), Tensor(hs), p).data
    ref = np.zeros((2, V + batch.max_oov + 1))
    ref[:, :V] = pg[:, None] * Pv
    for b in range(2):
        for i, k in enumerate(batch.enc_ext_ids[b]):
            ref[b, k] += (1 - pg[b]) * a_ref.data[b, i]
    np.testing.assert_allclose(P.data, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(st.s_h.data, hs, atol=1e-12)
    np.testing.assert_allclose(st.prev_context.data, ctx, atol=1e-12)


# --- loss ---------------------------------------------------------------------------------

def test_gold_log_prob_matches_log_of_final_dist():
    p, batch, H, s0 = setup_step(5)
    feats = M.encoder_features(H, p)
    state = s0
    for t in range(batch.dec_input.shape[1]):
        out = M.step_outputs(state, batch.dec_input[:, t], H, batch.enc_mask, p, True, feats)
        lp = M.gold_log_prob(out, batch.dec_target[:, t], batch.enc_ext_ids, batch.enc_mask, V).data
        P, _, _ = M.decoder_step(state, batch.dec_input[:, t], H, batch.enc_ext_ids, batch.enc_mask, p,
                                 batch.max_oov)
        ref = np.log(P.data[np.arange(2), batch.dec_target[:, t]])
        np.testing.assert_allclose(lp, ref, rtol=1e-12)
        state = out.state


def test_gold_log_prob_handles_zero_copy_mass():
    p, batch, H, s0 = setup_step(6)
    out = M.step_outputs(s0, batch.dec_input[:, 0], H, batch.enc_mask, p, True, None)
    gold = np.array([V - 1, V - 1])  # in-vocab, likely absent from the article
    lp = M.gold_log_prob(out, gold, batch.enc_ext_ids, batch.enc_mask, V).data
    assert np.all(np.isfinite(lp))


def perfect_batch():
    from ptrgen.text import EncodedExample, collate
    ex = EncodedExample([1], [V], ["z"], [2], [V])
    return collate([ex])


def test_loss_zero_for_perfect_prediction():
    p = micro()
    p["ptr_b"].data[...] = -1000.0  # p_gen -> 0: pure copy of the only source token
    terms = M.loss(perfect_batch(), p, cov_weight=0.0, use_coverage=False)
    assert terms.total.item() == 0.0


def test_first_step_coverage_term_is_zero():
    p = micro(3)
    terms = M.loss(perfect_batch(), p, cov_weight=1.0, use_coverage=True)
    assert terms.coverage == 0.0


def test_loss_rejects_out_of_range_gold():
    from ptrgen.text import EncodedExample, collate
    b = collate([EncodedExample([4], [4], [], [2], [V + 1])])
    with pytest.raises(IdOutOfRangeError):
        M.loss(b, micro())


def test_loss_is_token_mean():
    p = micro(8)
    rng = np.random.default_rng(8)
    b = random_batch(rng, V, batch=3)
    terms = M.loss(b, p, cov_weight=0.7)
    per = []
    from ptrgen.text import collate
    for ex in b.examples:
        t = M.loss(collate([ex]), p, cov_weight=0.7)
        per.append(t.total.item() * ex.dec_len)
    assert abs(terms.total.item() - sum(per) / b.dec_mask.sum()) < 1e-12
    assert abs(terms.total.item() - (terms.nll + 0.7 * terms.coverage)) < 1e-12


@pytest.mark.parametrize("use_cov", [True, False])
def test_loss_gradient_micro(use_cov):
    rng = np.random.default_rng(11)
    p = micro(11)
    b = random_batch(rng, V, batch=2, t_enc=5, t_dec=4)
    leaves = [p[n] for n in M.PARAM_NAMES]
    err = grad_check(lambda: M.loss(b, p, 1.0, use_cov).total, leaves)
    assert err < 1e-3


def test_coverage_off_ignores_w_c():
    rng = np.random.default_rng(12)
    p = micro(12)
    b = random_batch(rng, V)
    grads = analytic_grads(lambda: M.loss(b, p, 0.0, False).total, [p["attn_w_c"]])
    assert np.all(grads[0] == 0)


def test_gradients_finite_on_fuzzed_instances():
    rng = np.random.default_rng(99)
    start = time.time()
    for k in range(1000):
        p = M.init_params(int(rng.integers(5, 12)), 3, 4, seed=k, scale=float(rng.uniform(0.01, 3.0)))
        b = random_batch(rng, p.vocab_size, batch=int(rng.integers(1, 3)), t_enc=4, t_dec=3)
        leaves = list(p)
        for t in leaves:
            t.grad = None
        with Tape() as tape:
            terms = M.loss(b, p, float(rng.uniform(0, 2)), bool(rng.integers(0, 2)))
        tt.backward(tape, terms.total)
        assert np.isfinite(terms.total.item())
        assert all(t.grad is None or np.all(np.isfinite(t.grad)) for t in leaves)
    assert time.time() - start < 120
