"""Independent reference implementations used by several test modules."""

import numpy as np

from ptrgen import tensor as tt


def analytic_grads(fn, leaves):
    for t in leaves:
        t.grad = None
    with tt.Tape() as tape:
        out = fn()
    tt.backward(tape, out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def numeric_grads(fn, leaves, h=1e-5):
    """Central differences of the scalar ``fn()`` with respect to every entry of every leaf."""
    grads = []
    for t in leaves:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn().item()
            flat[k] = orig - h
            down = fn().item()
            flat[k] = orig
            gf[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))))


def grad_check(fn, leaves, h=1e-5):
    ana = analytic_grads(fn, leaves)
    num = numeric_grads(fn, leaves, h)
    return max(max_rel_error(a, n) for a, n in zip(ana, num))


def brute_rouge_n(cand, ref, n):
    """ROUGE-N by explicit matching: each reference n-gram may be claimed once."""
    c = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    r = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    used = [False] * len(r)
    hit = 0
    for g in c:
        for j, h in enumerate(r):
            if not used[j] and h == g:
                used[j] = True
                hit += 1
                break
    p = hit / len(c) if c else 0.0
    rc = hit / len(r) if r else 0.0
    return p, rc, (2 * p * rc / (p + rc) if p + rc else 0.0)


def brute_lcs(a, b):
    """LCS by memoised recursion (different shape from the iterative table)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def brute_rouge_l(cand, ref):
    lcs = brute_lcs(tuple(cand), tuple(ref))
    p = lcs / len(cand) if cand else 0.0
    r = lcs / len(ref)
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def random_batch(rng, vocab_size, batch=2, t_enc=5, t_dec=4, max_oov=2, ragged=True):
    """Random collated batch of id sequences with article OOVs and padding."""
    from ptrgen.text import START, STOP, UNK, EncodedExample, collate

    examples = []
    for b in range(batch):
        T = int(rng.integers(1, t_enc + 1)) if ragged and b else t_enc
        D = int(rng.integers(1, t_dec + 1)) if ragged and b else t_dec
        ext = np.where(rng.random(T) < 0.3, rng.integers(vocab_size, vocab_size + max_oov + 1, size=T),
                       rng.integers(4, vocab_size, size=T)) if max_oov else rng.integers(4, vocab_size, size=T)
        # renumber OOVs densely in first-occurrence order
        order = []
        for i in ext:
            if i >= vocab_size and int(i) not in order:
                order.append(int(i))
        ext = np.array([vocab_size + order.index(int(i)) if i >= vocab_size else int(i) for i in ext])
        enc = np.where(ext >= vocab_size, UNK, ext)
        pool = list(range(4, vocab_size)) + [vocab_size + k for k in range(len(order))]
        tgt = [int(rng.choice(pool)) for _ in range(D - 1)]
        dec_in = [START] + [UNK if g >= vocab_size else g for g in tgt]
        examples.append(EncodedExample(list(map(int, enc)), list(map(int, ext)), [f"oov{k}" for k in order],
                                       dec_in, tgt + [STOP]))
    return collate(examples)
