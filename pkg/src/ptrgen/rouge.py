"""ROUGE-1, ROUGE-2 and ROUGE-L over token sequences.

Scores are computed on raw tokens (no stemming or stopword removal).
Corpus scores average the per-example precision, recall and F1, so the
reported F1 is a mean of F1 values rather than the F1 of mean P and R.
"""

import csv
from collections import Counter
from dataclasses import dataclass

from .errors import EmptyInputError

METRICS = ("rouge-1", "rouge-2", "rouge-l")


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision, recall):
        denom = precision + recall
        return cls(precision, recall, 2 * precision * recall / denom if denom > 0 else 0.0)


def ngram_counts(tokens, n):
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    tokens = list(tokens)
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_reference(reference):
    if len(reference) == 0:
        raise EmptyInputError("reference summary is empty")


def rouge_n(candidate, reference, n):
    _check_reference(reference)
    cand, ref = ngram_counts(candidate, n), ngram_counts(reference, n)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    n_cand, n_ref = sum(cand.values()), sum(ref.values())
    return RougeScore.from_pr(overlap / n_cand if n_cand else 0.0, overlap / n_ref if n_ref else 0.0)


def lcs_length(a, b):
    """Length of the longest common subsequence, O(len(a)·len(b)) time, O(len(b)) space."""
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    _check_reference(reference)
    lcs = lcs_length(candidate, reference)
    return RougeScore.from_pr(lcs / len(candidate) if len(candidate) else 0.0, lcs / len(reference))


def score_pair(candidate, reference):
    return {
        "rouge-1": rouge_n(candidate, reference, 1),
        "rouge-2": rouge_n(candidate, reference, 2),
        "rouge-l": rouge_l(candidate, reference),
    }


def corpus_rouge(pairs):
    """Mean P/R/F1 per metric over ``(candidate, reference)`` token-sequence pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no (candidate, reference) pairs to score")
    sums = {m: [0.0, 0.0, 0.0] for m in METRICS}
    for cand, ref in pairs:
        for m, s in score_pair(cand, ref).items():
            acc = sums[m]
            acc[0] += s.precision
            acc[1] += s.recall
            acc[2] += s.f1
    n = len(pairs)
    return {m: RougeScore(p / n, r / n, f / n) for m, (p, r, f) in sums.items()}


def write_report(path, scores):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "precision", "recall", "f1"))
        for m in METRICS:
            s = scores[m]
            w.writerow((m, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"))


def write_per_example(path, rows):
    """TSV of per-example F1 values; ``rows`` are ``(index, {metric: RougeScore})``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("index",) + tuple(f"{m}-f1" for m in METRICS))
        for idx, scores in rows:
            w.writerow((idx,) + tuple(f"{scores[m].f1:.6f}" for m in METRICS))
