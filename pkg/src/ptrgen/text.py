"""Text normalisation, tokenisation, vocabulary and batch assembly.

Articles are encoded twice: once against the fixed vocabulary (OOV -> UNK),
used for embedding lookups, and once against an extended vocabulary in
which each distinct OOV word of that article gets a temporary id
``vocab.size + k``. The extended ids are what the copy distribution
scatters attention into.
"""

import hashlib
import json
import logging
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, TextEncodingError

log = logging.getLogger(__name__)

PAD, UNK, START, STOP = 0, 1, 2, 3
PAD_TOKEN, UNK_TOKEN, START_TOKEN, STOP_TOKEN = "[PAD]", "[UNK]", "[START]", "[STOP]"
RESERVED = (PAD_TOKEN, UNK_TOKEN, START_TOKEN, STOP_TOKEN)

MAX_VOCAB = 50_000
MAX_ENC = 400
MAX_DEC = 100

DANDA = "।"
PUNCTUATION = frozenset(
    DANDA + "॥" + ".,?!;:" + "\"'“”‘’«»"
    + "()[]{}" + "-‐‑‒–—―"
)

ZWNJ, ZWJ = "‌", "‍"
_WS = re.compile(r"\s+")


def _is_bengali(ch):
    return "ঀ" <= ch <= "৿"


def normalize(text):
    """Clean one field of raw text.

    NFC-normalises, turns whitespace runs into single spaces, and drops
    control and zero-width characters. ZWJ/ZWNJ survive only between two
    Bengali characters, where they select conjunct forms.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TextEncodingError(exc.start, exc.reason) from None
    text = unicodedata.normalize("NFC", text)
    text = _WS.sub(" ", text)
    out = []
    n = len(text)
    for i, ch in enumerate(text):
        if ch in (ZWJ, ZWNJ):
            if 0 < i < n - 1 and _is_bengali(text[i - 1]) and _is_bengali(text[i + 1]):
                out.append(ch)
            continue
        cat = unicodedata.category(ch)
        if cat == "Cc" or cat == "Cf":
            continue
        out.append(ch)
    # removals can leave doubled spaces behind
    return _WS.sub(" ", "".join(out)).strip()


def tokenize(text):
    """Whitespace split with leading/trailing punctuation detached.

    >>> tokenize("(abc),")
    ['(', 'abc', ')', ',']
    """
    tokens = []
    for chunk in text.split():
        lead = 0
        while lead < len(chunk) and chunk[lead] in PUNCTUATION:
            lead += 1
        if lead == len(chunk):
            tokens.extend(chunk)
            continue
        trail = len(chunk)
        while chunk[trail - 1] in PUNCTUATION:
            trail -= 1
        tokens.extend(chunk[:lead])
        tokens.append(chunk[lead:trail])
        tokens.extend(chunk[trail:])
    return tokens


class Vocabulary:
    """Bijection between tokens and ids; ids 0-3 are the reserved tokens."""

    def __init__(self, tokens, counts=None):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary tokens must be distinct and must not shadow reserved tokens")
        self.counts = list(counts) if counts is not None else [0] * len(tokens)

    @property
    def size(self):
        return len(self.id_to_token)

    def __len__(self):
        return self.size

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token):
        return self.token_to_id.get(token, UNK)

    def token(self, i):
        return self.id_to_token[i]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok, cnt in zip(self.id_to_token[4:], self.counts):
                fh.write(f"{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path, max_size=None):
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, cnt = line.rpartition("\t")
                if not tok:
                    raise ValueError(f"{path}:{lineno}: expected 'token<TAB>count'")
                tokens.append(tok)
                counts.append(int(cnt))
                if max_size is not None and len(tokens) >= max_size - len(RESERVED):
                    break
        return cls(tokens, counts)


def build_vocab(corpus, max_size=MAX_VOCAB):
    """Keep the ``max_size - 4`` most frequent tokens.

    Frequency ties go to the code-point-smaller token, so the id assignment
    is a pure function of the corpus.
    """
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)} reserved tokens, got {max_size}")
    counter = Counter()
    for tokens in corpus:
        counter.update(tokens)
    for tok in RESERVED:
        counter.pop(tok, None)
    if not counter:
        raise EmptyInputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - len(RESERVED)]
    return Vocabulary([t for t, _ in ranked], [c for _, c in ranked])


@dataclass
class EncodedExample:
    enc_ids: list
    enc_ext_ids: list
    oov_list: list
    dec_input: list = field(default_factory=list)
    dec_target: list = field(default_factory=list)
    article_tokens: list = field(default_factory=list)
    summary_tokens: list = field(default_factory=list)

    @property
    def enc_len(self):
        return len(self.enc_ids)

    @property
    def dec_len(self):
        return len(self.dec_input)


def encode_source(tokens, vocab, max_enc=MAX_ENC):
    if not tokens:
        raise EmptyInputError("article has no tokens")
    tokens = tokens[:max_enc]
    enc_ids, ext_ids, oovs = [], [], []
    for tok in tokens:
        i = vocab.id(tok)
        enc_ids.append(i)
        if i == UNK and tok != UNK_TOKEN:
            if tok not in oovs:
                oovs.append(tok)
            i = vocab.size + oovs.index(tok)
        ext_ids.append(i)
    return enc_ids, ext_ids, oovs


def encode_target(tokens, vocab, oov_list, max_dec=MAX_DEC):
    if not tokens:
        raise EmptyInputError("summary has no tokens")
    tokens = tokens[:max_dec]
    dec_input = [START] + [vocab.id(t) for t in tokens]
    target = []
    for tok in tokens:
        i = vocab.id(tok)
        if i == UNK and tok in oov_list:
            i = vocab.size + oov_list.index(tok)
        target.append(i)
    return dec_input, target + [STOP]


def encode_example(article, summary, vocab, max_enc=MAX_ENC, max_dec=MAX_DEC):
    """Normalise, tokenise and encode one raw (article, summary) pair."""
    art = tokenize(normalize(article))
    summ = tokenize(normalize(summary))
    enc_ids, ext_ids, oovs = encode_source(art, vocab, max_enc)
    dec_input, dec_target = encode_target(summ, vocab, oovs, max_dec)
    return EncodedExample(enc_ids, ext_ids, oovs, dec_input, dec_target, art[:max_enc], summ[:max_dec])


class CorpusStream:
    """Iterator over ``(article, summary)`` pairs of a JSON Lines file.

    Invalid lines are skipped; ``skipped`` holds how many so far.
    """

    def __init__(self, path):
        self.path = path
        self.skipped = 0
        self._fh = open(path, encoding="utf-8")

    def __iter__(self):
        with self._fh as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    article, summary = obj["article"], obj["summary"]
                    if not isinstance(article, str) or not isinstance(summary, str):
                        raise TypeError("fields must be strings")
                except (ValueError, KeyError, TypeError) as exc:
                    self.skipped += 1
                    log.debug("%s:%d skipped (%s)", self.path, lineno, exc)
                    continue
                yield article, summary
        if self.skipped:
            log.warning("%s: skipped %d invalid line(s)", self.path, self.skipped)


def read_corpus(path):
    return CorpusStream(path)


def split_of(index):
    """Deterministic 70/20/10 train/val/test assignment of an example index."""
    bucket = int.from_bytes(hashlib.sha256(str(index).encode()).digest()[:8], "big") % 100
    if bucket < 70:
        return "train"
    return "val" if bucket < 90 else "test"


@dataclass
class Batch:
    enc_ids: np.ndarray
    enc_ext_ids: np.ndarray
    enc_mask: np.ndarray
    dec_input: np.ndarray
    dec_target: np.ndarray
    dec_mask: np.ndarray
    oov_lists: list
    max_oov: int
    examples: list

    @property
    def size(self):
        return self.enc_ids.shape[0]


def collate(examples):
    B = len(examples)
    T = max(ex.enc_len for ex in examples)
    D = max(ex.dec_len for ex in examples)
    enc = np.full((B, T), PAD, dtype=np.int64)
    ext = np.full((B, T), PAD, dtype=np.int64)
    dec_in = np.full((B, D), PAD, dtype=np.int64)
    dec_tgt = np.full((B, D), PAD, dtype=np.int64)
    for b, ex in enumerate(examples):
        enc[b, : ex.enc_len] = ex.enc_ids
        ext[b, : ex.enc_len] = ex.enc_ext_ids
        dec_in[b, : ex.dec_len] = ex.dec_input
        dec_tgt[b, : ex.dec_len] = ex.dec_target
    enc_mask = (np.arange(T) < np.array([[ex.enc_len] for ex in examples])).astype(np.float64)
    dec_mask = (np.arange(D) < np.array([[ex.dec_len] for ex in examples])).astype(np.float64)
    oovs = [list(ex.oov_list) for ex in examples]
    return Batch(enc, ext, enc_mask, dec_in, dec_tgt, dec_mask, oovs, max(map(len, oovs)), list(examples))


def make_batches(examples, batch_size, shuffle_seed=None):
    """Yield padded batches; ``shuffle_seed`` fixes a deterministic order."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    examples = list(examples)
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield collate([examples[i] for i in order[start : start + batch_size]])


def num_batches(n_examples, batch_size):
    return math.ceil(n_examples / batch_size)
