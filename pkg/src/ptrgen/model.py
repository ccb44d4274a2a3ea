"""Pointer-generator network with coverage.

A bidirectional LSTM reads the article; a unidirectional LSTM decoder
attends over the encoder states at each step. The attention weights double
as a copy distribution over source positions, mixed with the softmax over
the fixed vocabulary by a learned generation probability ``p_gen``. A
running sum of past attention (coverage) is fed back into the attention
energies and penalised through ``Σ_i min(a_i, c_i)``.

All functions work on batches: vectors are ``[B, d]`` and encoder states
``[B, T, d]``.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import DimensionError, IdOutOfRangeError
from .tensor import Tensor
from .text import UNK

D_EMB = 128
D_HID = 512
INIT_SCALE = 0.02

# name -> shape builder; the order fixes the draw order of the initialiser
_SHAPES = (
    ("embedding", lambda V, e, h: (V, e)),
    ("enc_fw_W", lambda V, e, h: (e + h // 2, 4 * (h // 2))),
    ("enc_fw_b", lambda V, e, h: (4 * (h // 2),)),
    ("enc_bw_W", lambda V, e, h: (e + h // 2, 4 * (h // 2))),
    ("enc_bw_b", lambda V, e, h: (4 * (h // 2),)),
    ("red_h_W", lambda V, e, h: (h, h)),
    ("red_h_b", lambda V, e, h: (h,)),
    ("red_c_W", lambda V, e, h: (h, h)),
    ("red_c_b", lambda V, e, h: (h,)),
    ("dec_W", lambda V, e, h: (e + h + h, 4 * h)),
    ("dec_b", lambda V, e, h: (4 * h,)),
    ("attn_W_h", lambda V, e, h: (h, h)),
    ("attn_W_s", lambda V, e, h: (h, h)),
    ("attn_w_c", lambda V, e, h: (1, h)),
    ("attn_b", lambda V, e, h: (h,)),
    ("attn_v", lambda V, e, h: (h,)),
    ("out_V1", lambda V, e, h: (2 * h, h)),
    ("out_b1", lambda V, e, h: (h,)),
    ("out_V2", lambda V, e, h: (h, V)),
    ("out_b2", lambda V, e, h: (V,)),
    ("ptr_w_hstar", lambda V, e, h: (h,)),
    ("ptr_w_s", lambda V, e, h: (h,)),
    ("ptr_w_x", lambda V, e, h: (e + h,)),
    ("ptr_b", lambda V, e, h: ()),
)
PARAM_NAMES = tuple(name for name, _ in _SHAPES)
BIASES = frozenset({"enc_fw_b", "enc_bw_b", "red_h_b", "red_c_b", "dec_b", "attn_b", "out_b1", "out_b2", "ptr_b"})
LSTM_BIASES = ("enc_fw_b", "enc_bw_b", "dec_b")


def param_shapes(vocab_size, d_e=D_EMB, d_h=D_HID):
    if d_h % 2:
        raise ValueError(f"d_h must be even (split across two encoder directions), got {d_h}")
    return {name: fn(vocab_size, d_e, d_h) for name, fn in _SHAPES}


def param_count(vocab_size, d_e=D_EMB, d_h=D_HID):
    return sum(int(np.prod(s)) for s in param_shapes(vocab_size, d_e, d_h).values())


class ModelParams:
    """The named learnable tensors plus the sizes that determine their shapes."""

    def __init__(self, tensors, vocab_size, d_e, d_h):
        expected = param_shapes(vocab_size, d_e, d_h)
        for name, shape in expected.items():
            if name not in tensors:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise DimensionError(f"parameter {name!r} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = {name: tensors[name] for name in PARAM_NAMES}
        self.vocab_size = vocab_size
        self.d_e = d_e
        self.d_h = d_h

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self["embedding"].dtype

    @property
    def count(self):
        return sum(t.data.size for t in self)

    def copy(self):
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.items()},
            self.vocab_size, self.d_e, self.d_h)


def init_params(vocab_size, d_e=D_EMB, d_h=D_HID, seed=0, dtype=np.float64, scale=INIT_SCALE):
    """Uniform(-scale, scale) weights, zero biases, forget-gate biases at 1."""
    if vocab_size < 5:
        raise ValueError(f"vocab_size must be at least 5, got {vocab_size}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(vocab_size, d_e, d_h).items():
        if name in BIASES:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.uniform(-scale, scale, size=shape).astype(dtype, copy=False)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    for name in LSTM_BIASES:
        b = tensors[name].data
        hid = b.shape[0] // 4
        b[hid : 2 * hid] = 1.0
    return ModelParams(tensors, vocab_size, d_e, d_h)


# ---------------------------------------------------------------------------
# building blocks


def lstm_step(x, h_prev, c_prev, W, b):
    """One LSTM step; gate blocks of ``W``/``b`` are ordered i, f, o, g."""
    hid = h_prev.shape[-1]
    if W.shape != (x.shape[-1] + hid, 4 * hid) or b.shape != (4 * hid,):
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h_prev.shape} incompatible with W {W.shape}, b {b.shape}")
    z = tt.concat([x, h_prev], axis=-1) @ W + b
    i = tt.sigmoid(tt.slice_axis(z, 0, hid))
    f = tt.sigmoid(tt.slice_axis(z, hid, 2 * hid))
    o = tt.sigmoid(tt.slice_axis(z, 2 * hid, 3 * hid))
    g = tt.tanh(tt.slice_axis(z, 3 * hid, 4 * hid))
    c = f * c_prev + i * g
    h = o * tt.tanh(c)
    return h, c


@dataclass
class DecoderState:
    s_h: Tensor
    s_c: Tensor
    coverage: Tensor
    prev_context: Tensor


def _run_direction(xs, mask, W, b, reverse):
    B = mask.shape[0]
    hid = W.shape[1] // 4
    dtype = W.dtype
    h = Tensor(np.zeros((B, hid), dtype=dtype))
    c = Tensor(np.zeros((B, hid), dtype=dtype))
    outs = [None] * len(xs)
    steps = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in steps:
        h_new, c_new = lstm_step(xs[t], h, c, W, b)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            # padded positions carry the previous state through unchanged
            keep = np.repeat(m[:, None], hid, axis=1).astype(dtype)
            h = h_new * keep + h * (1.0 - keep)
            c = c_new * keep + c * (1.0 - keep)
        outs[t] = h
    return outs, h, c


def encode(enc_ids, enc_mask, params):
    """Bidirectional encoding of ``[B, T]`` ids.

    Returns ``(H, state0)`` with ``H`` of shape ``[B, T, d_h]`` holding
    ``[forward_i ; backward_i]``, and the decoder's initial state bridged
    linearly from the final forward and backward LSTM states.
    """
    enc_ids = np.asarray(enc_ids)
    enc_mask = np.asarray(enc_mask, dtype=params.dtype)
    B, T = enc_ids.shape
    emb = tt.reshape(tt.gather_rows(params["embedding"], enc_ids.reshape(-1)), (B, T, params.d_e))
    xs = [tt.take(emb, t, axis=1) for t in range(T)]
    fw, fw_h, fw_c = _run_direction(xs, enc_mask, params["enc_fw_W"], params["enc_fw_b"], reverse=False)
    bw, bw_h, bw_c = _run_direction(xs, enc_mask, params["enc_bw_W"], params["enc_bw_b"], reverse=True)
    H = tt.concat([tt.stack(fw, axis=1), tt.stack(bw, axis=1)], axis=-1)
    s_h = tt.concat([fw_h, bw_h], axis=-1) @ params["red_h_W"] + params["red_h_b"]
    s_c = tt.concat([fw_c, bw_c], axis=-1) @ params["red_c_W"] + params["red_c_b"]
    zeros_cov = Tensor(np.zeros((B, T), dtype=params.dtype))
    zeros_ctx = Tensor(np.zeros((B, params.d_h), dtype=params.dtype))
    return H, DecoderState(s_h, s_c, zeros_cov, zeros_ctx)


def encoder_features(H, params):
    """``W_h·h_i + b_attn`` for every position; constant across decoder steps."""
    B, T, d = H.shape
    feat = tt.reshape(H, (B * T, d)) @ params["attn_W_h"] + params["attn_b"]
    return tt.reshape(feat, (B, T, d))


def attention(s_t, H, coverage, enc_mask, params, use_coverage=True, features=None):
    """Attention distribution and raw energies over encoder positions.

    ``e_i = v · tanh(W_h h_i + W_s s_t + w_c c_i + b_attn)``; the coverage
    term is dropped when ``use_coverage`` is false.
    """
    B, T, d = H.shape
    if coverage.shape != (B, T):
        raise DimensionError(f"coverage shape {coverage.shape} does not match encoder positions {(B, T)}")
    if features is None:
        features = encoder_features(H, params)
    d_a = features.shape[-1]
    pre = features + tt.expand(s_t @ params["attn_W_s"], axis=1, n=T)
    if use_coverage:
        cov = tt.reshape(coverage, (B * T, 1)) @ params["attn_w_c"]
        pre = pre + tt.reshape(cov, (B, T, d_a))
    act = tt.reshape(tt.tanh(pre), (B * T, d_a))
    energies = tt.reshape(act @ tt.reshape(params["attn_v"], (d_a, 1)), (B, T))
    return tt.masked_softmax(energies, enc_mask), energies


def context(a, H):
    """Attention-weighted sum of encoder states, ``[B, d_h]``."""
    B, T, d = H.shape
    return tt.reshape(tt.matmul(tt.reshape(a, (B, 1, T)), H), (B, d))


def vocab_logits(s_t, h_star, params):
    hidden = tt.concat([s_t, h_star], axis=-1) @ params["out_V1"] + params["out_b1"]
    return hidden @ params["out_V2"] + params["out_b2"]


def vocab_dist(s_t, h_star, params):
    return tt.softmax(vocab_logits(s_t, h_star, params))


def p_gen_logit(h_star, x, s_t, params):
    d_h, d_x = params.d_h, x.shape[-1]
    z = (h_star @ tt.reshape(params["ptr_w_hstar"], (d_h, 1))
         + s_t @ tt.reshape(params["ptr_w_s"], (d_h, 1))
         + x @ tt.reshape(params["ptr_w_x"], (d_x, 1))
         + tt.reshape(params["ptr_b"], (1,)))
    return tt.reshape(z, (z.shape[0],))


def p_gen(h_star, x, s_t, params):
    """Generation probability in (0, 1), one per batch row."""
    return tt.sigmoid(p_gen_logit(h_star, x, s_t, params))


def final_dist(P_vocab, a, p_gen, enc_ext_ids, vocab_size, max_oov):
    """Mix generation and copy distributions over the extended vocabulary.

    Accepts a single example (``P_vocab [V]``, ``a [T]``, scalar ``p_gen``)
    or a batch (``[B, V]``, ``[B, T]``, ``[B]``).
    """
    single = P_vocab.ndim == 1
    P_vocab, a = tt.as_tensor(P_vocab), tt.as_tensor(a)
    p_gen = tt.as_tensor(p_gen, like=P_vocab)
    enc_ext_ids = np.asarray(enc_ext_ids, dtype=np.int64)
    if single:
        P_vocab = tt.reshape(P_vocab, (1, P_vocab.shape[0]))
        a = tt.reshape(a, (1, a.shape[0]))
        p_gen = tt.reshape(p_gen, (1,))
        enc_ext_ids = enc_ext_ids[None, :]
    B = P_vocab.shape[0]
    if P_vocab.shape[1] != vocab_size:
        raise DimensionError(f"P_vocab has {P_vocab.shape[1]} entries, vocab_size is {vocab_size}")
    ext_size = vocab_size + max_oov
    if enc_ext_ids.size and enc_ext_ids.max() >= ext_size:
        raise IdOutOfRangeError(f"extended id {int(enc_ext_ids.max())} >= vocab_size + max_oov = {ext_size}")
    gen = P_vocab
    if max_oov:
        gen = tt.concat([P_vocab, Tensor(np.zeros((B, max_oov), dtype=P_vocab.dtype))], axis=-1)
    gen = gen * tt.expand(p_gen, axis=1, n=ext_size)
    copy_w = a * tt.expand(1.0 - p_gen, axis=1, n=a.shape[1])
    copy = tt.scatter_add(Tensor(np.zeros((B, ext_size), dtype=P_vocab.dtype)), enc_ext_ids, copy_w)
    out = gen + copy
    return tt.reshape(out, (ext_size,)) if single else out


# ---------------------------------------------------------------------------
# decoder


StepOutput = namedtuple("StepOutput", "state attn energies context logits p_gen_logit x")


def step_outputs(state, y_prev_ids, H, enc_mask, params, use_coverage, features):
    y_prev_ids = np.where(np.asarray(y_prev_ids) >= params.vocab_size, UNK, y_prev_ids)
    emb = tt.gather_rows(params["embedding"], y_prev_ids)
    return _step_from_embedding(state, emb, H, enc_mask, params, use_coverage, features)


def _step_from_embedding(state, emb, H, enc_mask, params, use_coverage, features):
    x = tt.concat([emb, state.prev_context], axis=-1)
    s_h, s_c = lstm_step(x, state.s_h, state.s_c, params["dec_W"], params["dec_b"])
    a, e = attention(s_h, H, state.coverage, enc_mask, params, use_coverage, features)
    h_star = context(a, H)
    logits = vocab_logits(s_h, h_star, params)
    z = p_gen_logit(h_star, x, s_h, params)
    new_state = DecoderState(s_h, s_c, state.coverage + a, h_star)
    return StepOutput(new_state, a, e, h_star, logits, z, x)


def decoder_step(state, y_prev_ids, H, enc_ext_ids, enc_mask, params, max_oov=0,
                 use_coverage=True, features=None):
    """One decoding step. Returns ``(P_final, attention, new_state)``.

    Extended ids in ``y_prev_ids`` (copied OOVs) are embedded as UNK.
    """
    out = step_outputs(state, y_prev_ids, H, enc_mask, params, use_coverage, features)
    P = final_dist(tt.softmax(out.logits), out.attn, tt.sigmoid(out.p_gen_logit),
                   enc_ext_ids, params.vocab_size, max_oov)
    return P, out.attn, out.state


LossTerms = namedtuple("LossTerms", "total nll coverage p_gen")


def gold_log_prob(out, gold, enc_ext_ids, enc_mask, vocab_size):
    """log P_final(gold) per row, assembled in log space.

    ``log(p_gen·P_vocab[g] + (1-p_gen)·Σ_{i: ext_i = g} a_i)`` evaluated as a
    log-sum-exp of two log terms, so a vanishing branch never produces a
    ``log(0)`` on the differentiable path.
    """
    gold = np.asarray(gold, dtype=np.int64)
    in_vocab = gold < vocab_size
    logp_vocab = tt.pick(tt.log_softmax(out.logits), np.where(in_vocab, gold, 0))
    logp_vocab = logp_vocab + np.where(in_vocab, 0.0, -np.inf)
    enc_mask = np.asarray(enc_mask) != 0
    match = (np.asarray(enc_ext_ids) == gold[:, None]) & enc_mask
    log_copy = tt.masked_logsumexp(out.energies, match) - tt.masked_logsumexp(out.energies, enc_mask)
    z = out.p_gen_logit
    return tt.logaddexp(tt.log_sigmoid(z) + logp_vocab, tt.log_sigmoid(-z) + log_copy)


def loss(batch, params, cov_weight=1.0, use_coverage=True):
    """Teacher-forced mean per-token loss: NLL plus weighted coverage penalty.

    Returns ``LossTerms(total, nll, coverage, p_gen)``; ``total`` is the
    scalar Tensor to differentiate, the others are floats for logging.
    With ``use_coverage`` false the coverage energy term and penalty are
    both dropped.
    """
    max_ext = params.vocab_size + batch.max_oov
    if batch.dec_target.size and batch.dec_target.max() >= max_ext:
        raise IdOutOfRangeError(f"gold id {int(batch.dec_target.max())} outside extended range {max_ext}")
    H, state = encode(batch.enc_ids, batch.enc_mask, params)
    features = encoder_features(H, params)
    B, D = batch.dec_input.shape
    dec_emb = tt.reshape(tt.gather_rows(params["embedding"], batch.dec_input.reshape(-1)), (B, D, params.d_e))
    n_tokens = batch.dec_mask.sum()
    total = nll_sum = cov_sum = 0.0
    pgen_sum = 0.0
    for t in range(D):
        m = batch.dec_mask[:, t].astype(params.dtype)
        out = _step_from_embedding(state, tt.take(dec_emb, t, axis=1), H, batch.enc_mask, params,
                                   use_coverage, features)
        logp = gold_log_prob(out, batch.dec_target[:, t], batch.enc_ext_ids, batch.enc_mask, params.vocab_size)
        step = -logp
        nll_sum += float(np.sum(-logp.data * m))
        if use_coverage and cov_weight:
            cov = tt.tsum(tt.elementwise_min(out.attn, state.coverage), axis=1)
            cov_sum += float(np.sum(cov.data * m))
            step = step + cov * cov_weight
        elif use_coverage:
            cov_sum += float(np.sum(np.minimum(out.attn.data, state.coverage.data).sum(axis=1) * m))
        pgen_sum += float(np.sum(0.5 * (1.0 + np.tanh(0.5 * out.p_gen_logit.data)) * m))
        # padded steps are zeroed by the mask, never dropped from the graph
        term = tt.tsum(step * np.where(m > 0, m, 0.0))
        total = term if isinstance(total, float) else total + term
        state = out.state
    total = total * (1.0 / n_tokens)
    return LossTerms(total, nll_sum / n_tokens, cov_sum / n_tokens, pgen_sum / n_tokens)
