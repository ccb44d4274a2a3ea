"""Beam-search decoding over the extended vocabulary.

The search core (:func:`search`) knows nothing about the network: it asks a
step function for next-token log-probabilities of every live hypothesis.
:func:`beam_search` wires that core to a trained model and maps copied
extended ids back to the article's own words.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as tt
from .errors import EmptyInputError, IdOutOfRangeError
from .model import DecoderState
from .tensor import Tensor
from .text import MAX_DEC, MAX_ENC, PAD, START, STOP, encode_source

CLOSING = frozenset("।॥,.?!;:)]}”’»")
OPENING = frozenset("([{“‘«")
STRAIGHT_QUOTES = frozenset("\"'")


@dataclass(frozen=True)
class Hypothesis:
    token_ids: tuple
    log_prob: float
    state: object = None
    finished: bool = False
    p_gens: tuple = ()

    @property
    def score(self):
        """Length-normalised log-probability (per generated token)."""
        return self.log_prob / max(1, len(self.token_ids) - 1)

    def extend(self, token, log_prob, state, p_gen=None):
        if self.finished:
            raise ValueError("finished hypotheses cannot be extended")
        p_gens = self.p_gens if p_gen is None else self.p_gens + (p_gen,)
        return Hypothesis(self.token_ids + (token,), log_prob, state, token == STOP, p_gens)


def search(step_fn, init_state, beam=4, max_dec=MAX_DEC, min_dec=0, banned=(PAD, START)):
    """Generic beam search.

    ``step_fn(hyps)`` returns ``(log_probs [k, n], states, p_gens)`` for the
    ``k`` live hypotheses; ``p_gens`` may be ``None``. Each live hypothesis
    proposes its ``2·beam`` best next ids (lower id first on equal
    log-probability). These proposals are pooled with the finished
    hypotheses already in the beam, and the ``beam`` best by total
    log-probability are kept. STOP is only proposed once the hypothesis
    would reach ``min_dec`` generated tokens. The search ends when every
    kept hypothesis is finished or after ``max_dec`` steps, and returns the
    finished hypothesis (or, failing any, the live one) with the best
    length-normalised score.
    """
    if beam < 1:
        raise ValueError(f"beam must be at least 1, got {beam}")
    live = [Hypothesis((START,), 0.0, init_state)]
    kept_finished = []
    finished = []
    width = 2 * beam
    for _ in range(max_dec):
        log_probs, states, p_gens = step_fn(live)
        log_probs = np.array(log_probs, dtype=np.float64)
        log_probs[:, list(banned)] = -np.inf
        # finished hypotheses keep their slot while they stay among the best
        pool = [(h.log_prob, -1, -1, h) for h in kept_finished]
        for i, hyp in enumerate(live):
            row = log_probs[i]
            if len(hyp.token_ids) < min_dec:
                row[STOP] = -np.inf
            for j in np.argsort(-row, kind="stable")[:width]:
                if row[j] == -np.inf:
                    break
                pool.append((hyp.log_prob + row[j], int(j), i, None))
        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        prev, live, kept_finished = live, [], []
        for total, j, i, done in pool[:beam]:
            if done is not None:
                kept_finished.append(done)
                continue
            pg = None if p_gens is None else float(p_gens[i])
            hyp = prev[i].extend(j, total, states[i], pg)
            if hyp.finished:
                kept_finished.append(hyp)
                finished.append(hyp)
            else:
                live.append(hyp)
        if not live:
            break
    candidates = finished or live
    best = candidates[0]
    for hyp in candidates[1:]:
        if hyp.score > best.score:
            best = hyp
    return best


def model_step_fn(params, H, enc_ext_ids, enc_mask, max_oov, use_coverage=True):
    """Step function for :func:`search` backed by a single encoded article.

    ``H`` is ``[1, T, d_h]``. Hypothesis states are tuples of row vectors
    ``(s_h, s_c, coverage, prev_context)``.
    """
    features = M.encoder_features(H, params).data
    H = H.data
    enc_mask = np.asarray(enc_mask)
    enc_ext_ids = np.asarray(enc_ext_ids)

    def step(hyps):
        k = len(hyps)
        state = DecoderState(*(Tensor(np.stack([h.state[n] for h in hyps])) for n in range(4)))
        prev = np.array([h.token_ids[-1] for h in hyps])
        out = M.step_outputs(state, prev, Tensor(np.repeat(H, k, axis=0)), np.repeat(enc_mask, k, axis=0),
                             params, use_coverage, Tensor(np.repeat(features, k, axis=0)))
        pg = tt.sigmoid(out.p_gen_logit)
        P = M.final_dist(tt.softmax(out.logits), out.attn, pg, np.repeat(enc_ext_ids, k, axis=0),
                         params.vocab_size, max_oov).data
        with np.errstate(divide="ignore"):
            logp = np.log(P)
        s = out.state
        states = [(s.s_h.data[i], s.s_c.data[i], s.coverage.data[i], s.prev_context.data[i]) for i in range(k)]
        return logp, states, pg.data

    return step


@dataclass
class BeamResult:
    tokens: list
    hypothesis: Hypothesis
    oov_list: list

    @property
    def text(self):
        return detokenize(self.tokens)


def beam_search(article_tokens, params, vocab, beam=4, max_dec=MAX_DEC, min_dec=8, max_enc=MAX_ENC,
                use_coverage=True):
    """Decode one tokenised article; returns the best summary as a :class:`BeamResult`."""
    if not article_tokens:
        raise EmptyInputError("article has no tokens")
    if vocab.size != params.vocab_size:
        raise ValueError(f"vocabulary has {vocab.size} entries but the model expects {params.vocab_size}")
    enc_ids, ext_ids, oovs = encode_source(list(article_tokens), vocab, max_enc)
    enc_ids = np.array([enc_ids])
    mask = np.ones(enc_ids.shape, dtype=params.dtype)
    H, s0 = M.encode(enc_ids, mask, params)
    init = (s0.s_h.data[0], s0.s_c.data[0], s0.coverage.data[0], s0.prev_context.data[0])
    step = model_step_fn(params, H, np.array([ext_ids]), mask, len(oovs), use_coverage)
    best = search(step, init, beam, max_dec, min_dec)
    return BeamResult(ids_to_tokens(best.token_ids, vocab, oovs), best, oovs)


def ids_to_tokens(ids, vocab, oov_list):
    """Map extended ids to words, dropping START and STOP."""
    out = []
    for i in ids:
        i = int(i)
        if i in (START, STOP):
            continue
        if i < vocab.size:
            out.append(vocab.token(i))
        elif i - vocab.size < len(oov_list):
            out.append(oov_list[i - vocab.size])
        else:
            raise IdOutOfRangeError(
                f"extended id {i} >= vocab size {vocab.size} + {len(oov_list)} article OOVs")
    return out


def detokenize(tokens):
    """Join tokens with spaces, attaching punctuation to its neighbour.

    >>> detokenize(["(", "a", ")", "।"])
    '(a)।'
    """
    parts = []
    glue_next = False
    quote_open = False
    for tok in tokens:
        attach = glue_next
        glue_next = False
        if tok in STRAIGHT_QUOTES:
            if quote_open:
                attach = True
            else:
                glue_next = True
            quote_open = not quote_open
        elif tok in CLOSING:
            attach = True
        elif tok in OPENING:
            glue_next = True
        if parts and not attach:
            parts.append(" ")
        parts.append(tok)
    return "".join(parts)


def duplicate_ngrams(tokens, n=3):
    """Number of n-gram occurrences beyond the first of each distinct n-gram."""
    grams = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return sum(c - 1 for c in grams.values())


def duplicate_rate(outputs, n=3):
    """Fraction of token sequences containing at least one repeated n-gram."""
    if not outputs:
        return 0.0
    return sum(duplicate_ngrams(toks, n) > 0 for toks in outputs) / len(outputs)

