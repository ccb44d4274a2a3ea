"""``ptrgen`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical abort, 4 checkpoint mismatch.
Settings resolve as built-in defaults, then a ``--config`` JSON file, then
flags given on the command line.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import beam as B
from . import rouge as R
from .errors import CheckpointCorruptError, EmptyInputError, NumericalAbort, TextEncodingError
from .text import Vocabulary, build_vocab, encode_example, normalize, read_corpus, split_of, tokenize
from .trainer import TrainConfig, latest_checkpoint, load_checkpoint, train

log = logging.getLogger("ptrgen")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


class Mismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value):
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


# flag dest -> TrainConfig field
_TRAIN_FIELDS = {
    "vocab_size": "vocab_size", "hidden": "d_h", "emb": "d_e", "max_enc": "max_enc", "max_dec": "max_dec",
    "lr": "lr", "clip_norm": "clip_norm", "batch_size": "batch_size", "coverage_weight": "cov_weight",
    "phase1_steps": "phase1_steps", "phase2_steps": "phase2_steps", "coverage": "coverage", "seed": "seed",
    "checkpoint_every": "checkpoint_every", "checkpoint_dir": "checkpoint_dir", "val_every": "val_every",
    "adagrad_init_acc": "adagrad_init_acc", "init_scale": "init_scale", "dtype": "dtype",
}

_DEFAULTS = {
    "preprocess": {"input": None, "out": None, "report": None},
    "build-vocab": {"corpus": None, "out": None, "vocab_size": 50_000},
    "train": {**{k: getattr(TrainConfig(), f) for k, f in _TRAIN_FIELDS.items()},
              "corpus": None, "vocab": None, "split": "train", "resume": False},
    "summarize": {"checkpoint": None, "vocab": None, "text": None, "input": None, "out": None,
                  "beam": 4, "min_dec": 8, "max_dec": 100, "max_enc": 400, "coverage": None,
                  "vocab_size": None, "hidden": None, "emb": None},
    "evaluate": {"checkpoint": None, "vocab": None, "corpus": None, "candidates": None, "split": "test",
                 "sample": None, "seed": 0, "out": None, "per_example": None,
                 "beam": 4, "min_dec": 8, "max_dec": 100, "max_enc": 400, "coverage": None,
                 "vocab_size": None, "hidden": None, "emb": None},
}


def _build_parser():
    p = _Parser(prog="ptrgen", description="Pointer-generator summarizer with coverage.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def cmd(name, help):
        sp = sub.add_parser(name, help=help, argument_default=S)
        sp.add_argument("--config", help="JSON file of settings (flag names with underscores)")
        return sp

    def model_flags(sp):
        sp.add_argument("--vocab-size", type=int)
        sp.add_argument("--hidden", type=int, help="decoder hidden size (encoder uses half per direction)")
        sp.add_argument("--emb", type=int, help="embedding size")

    def decode_flags(sp):
        sp.add_argument("--checkpoint", help="checkpoint directory, or a run directory (latest is used)")
        sp.add_argument("--vocab")
        sp.add_argument("--beam", type=int)
        sp.add_argument("--min-dec", type=int)
        sp.add_argument("--max-dec", type=int)
        sp.add_argument("--max-enc", type=int)
        sp.add_argument("--coverage", type=_on_off, help="on/off (default: as trained)")
        model_flags(sp)

    sp = cmd("preprocess", "clean a JSONL corpus")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--report", help="where to write kept/dropped counts as JSON")

    sp = cmd("build-vocab", "count tokens and write a vocabulary file")
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--vocab-size", type=int)

    sp = cmd("train", "train a model")
    sp.add_argument("--corpus")
    sp.add_argument("--vocab")
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--split", choices=("train", "all"))
    model_flags(sp)
    sp.add_argument("--max-enc", type=int)
    sp.add_argument("--max-dec", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--clip-norm", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--coverage-weight", type=float)
    sp.add_argument("--coverage", type=_on_off, help="on/off: enable coverage in phase 2")
    sp.add_argument("--phase1-steps", type=int)
    sp.add_argument("--phase2-steps", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--val-every", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    sp = cmd("summarize", "summarize articles with a trained checkpoint")
    decode_flags(sp)
    sp.add_argument("--text", help="a single article")
    sp.add_argument("--input", help="articles, one per line (plain text or JSONL)")
    sp.add_argument("--out")

    sp = cmd("evaluate", "decode a test split and report ROUGE")
    decode_flags(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--split", choices=("train", "val", "test", "all"))
    sp.add_argument("--candidates", help="precomputed summaries, one per line; skips decoding")
    sp.add_argument("--sample", type=int, help="score a random subset of this size")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="CSV report path")
    sp.add_argument("--per-example", help="TSV of per-example F1")
    return p


def resolve(argv):
    """Parse ``argv`` and return ``(command, settings dict, explicitly set keys)``."""
    ns = _build_parser().parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    settings = dict(_DEFAULTS[ns.command])
    from_file = {}
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise IOFailure(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(from_file, dict):
            raise UsageError(f"{config_path}: expected a JSON object")
        unknown = set(from_file) - set(settings)
        if unknown:
            raise UsageError(f"{config_path}: unknown setting(s) for {ns.command}: {sorted(unknown)}")
    settings.update(from_file)
    settings.update(given)
    settings["verbose"] = ns.verbose
    return ns.command, settings, set(from_file) | set(given)


def _require(settings, *keys):
    for k in keys:
        if settings.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _readable(path, what):
    if not os.path.isfile(path):
        raise IOFailure(f"{what} not found: {path}")


def _writable(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IOFailure(f"output directory does not exist: {parent}")


def _load_vocab(path, max_size=None):
    _readable(path, "vocabulary file")
    try:
        return Vocabulary.load(path, max_size)
    except ValueError as exc:
        raise IOFailure(str(exc)) from None


def _corpus_pairs(path):
    _readable(path, "corpus")
    stream = read_corpus(path)
    try:
        pairs = list(stream)
    except UnicodeDecodeError as exc:
        raise IOFailure(f"{path}: not UTF-8 ({exc.reason} at byte {exc.start})") from None
    return pairs, stream.skipped


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(s, out=sys.stdout):
    _require(s, "input", "out")
    _readable(s["input"], "input")
    _writable(s["out"])
    kept = dropped = 0
    with open(s["input"], "rb") as src, open(s["out"], "w", encoding="utf-8", newline="\n") as dst:
        for raw in src:
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw.decode("utf-8"))
                article, summary = normalize(obj["article"]), normalize(obj["summary"])
            except (UnicodeDecodeError, ValueError, KeyError, TypeError, TextEncodingError):
                dropped += 1
                continue
            if not article or not summary:
                dropped += 1
                continue
            dst.write(json.dumps({"article": article, "summary": summary}, ensure_ascii=False) + "\n")
            kept += 1
    report = {"kept": kept, "dropped": dropped}
    if s.get("report"):
        _writable(s["report"])
        with open(s["report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh)
            fh.write("\n")
    print(json.dumps(report), file=out)
    return EXIT_OK


def cmd_build_vocab(s, out=sys.stdout):
    _require(s, "corpus", "out")
    if s["vocab_size"] <= 4:
        raise UsageError(f"--vocab-size must exceed the 4 reserved tokens, got {s['vocab_size']}")
    pairs, _ = _corpus_pairs(s["corpus"])
    _writable(s["out"])

    def tokens():
        for article, summary in pairs:
            yield tokenize(normalize(article)) + tokenize(normalize(summary))

    try:
        vocab = build_vocab(tokens(), s["vocab_size"])
    except EmptyInputError as exc:
        raise UsageError(str(exc)) from None
    vocab.save(s["out"])
    print(f"wrote {vocab.size} entries ({vocab.size - 4} tokens) to {s['out']}", file=out)
    return EXIT_OK


def _encode(pairs, vocab, max_enc, max_dec):
    examples = []
    for article, summary in pairs:
        ex = encode_example(article, summary, vocab, max_enc, max_dec)
        if ex.enc_len and len(ex.summary_tokens):
            examples.append(ex)
    return examples


def _train_config(s, vocab_size):
    kwargs = {f: s[k] for k, f in _TRAIN_FIELDS.items()}
    kwargs["vocab_size"] = vocab_size
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(s, given, out=sys.stdout):
    _require(s, "corpus", "vocab", "checkpoint_dir")
    if not s["coverage"] and s["coverage_weight"] > 0 and "coverage_weight" in given:
        log.warning("--coverage off: --coverage-weight %g has no effect", s["coverage_weight"])
    vocab = _load_vocab(s["vocab"], s["vocab_size"])
    pairs, _ = _corpus_pairs(s["corpus"])
    if s["split"] == "train":
        val_pairs = [p for i, p in enumerate(pairs) if split_of(i) == "val"]
        pairs = [p for i, p in enumerate(pairs) if split_of(i) == "train"]
    else:
        val_pairs = []
    config = _train_config(s, vocab.size)
    examples = _encode(pairs, vocab, config.max_enc, config.max_dec)
    if not examples:
        raise UsageError(f"{s['corpus']}: no usable training examples")
    val = _encode(val_pairs, vocab, config.max_enc, config.max_dec)
    resume = latest_checkpoint(config.checkpoint_dir) if s["resume"] else None
    if resume is not None:
        _check_hyperparameters(load_checkpoint(resume).config, asdict(config),
                               ("vocab_size", "d_e", "d_h", "seed", "batch_size"))
    result = train(config, examples, val, resume=resume)
    last = result.history[-1] if result.history else None
    msg = f"trained {len(result.history)} steps; {len(result.checkpoints)} checkpoint(s) in {config.checkpoint_dir}"
    if last:
        msg += f"; final loss {last[2]:.4f}"
    print(msg, file=out)
    return EXIT_OK


def _check_hyperparameters(stored, requested, names):
    for name in names:
        if name in stored and requested.get(name) is not None and stored[name] != requested[name]:
            raise Mismatch(f"{name}: checkpoint has {stored[name]!r}, requested {requested[name]!r}")


def _load_for_decoding(s):
    _require(s, "checkpoint", "vocab")
    path = s["checkpoint"]
    if not os.path.isdir(path):
        raise IOFailure(f"checkpoint not found: {path}")
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        latest = latest_checkpoint(path)
        if latest is None:
            raise IOFailure(f"no checkpoint in {path}")
        path = latest
    try:
        ckpt = load_checkpoint(path)
    except CheckpointCorruptError as exc:
        raise Mismatch(str(exc)) from None
    p = ckpt.params
    stored = {"vocab_size": p.vocab_size, "hidden": p.d_h, "emb": p.d_e}
    _check_hyperparameters(stored, {k: s[k] for k in stored}, stored)
    vocab = _load_vocab(s["vocab"], p.vocab_size)
    if vocab.size != p.vocab_size:
        raise Mismatch(f"vocab_size: checkpoint has {p.vocab_size}, vocabulary file gives {vocab.size}")
    use_cov = ckpt.coverage if s["coverage"] is None else s["coverage"]
    return ckpt, vocab, use_cov


def _decode(article, ckpt, vocab, use_cov, s):
    tokens = tokenize(normalize(article))
    if not tokens:
        return []
    res = B.beam_search(tokens, ckpt.params, vocab, s["beam"], s["max_dec"], s["min_dec"], s["max_enc"], use_cov)
    return res.tokens


def _article_lines(path):
    _readable(path, "input")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            try:
                obj = json.loads(line)
            except ValueError:
                obj = None
            yield obj["article"] if isinstance(obj, dict) and "article" in obj else line


def cmd_summarize(s, out=sys.stdout):
    if s["text"] is not None and s["input"] is not None:
        raise UsageError("give either --text or --input, not both")
    if s["text"] is None and s["input"] is None:
        raise UsageError("one of --text or --input is required")
    if s["text"] is not None and not s["text"].strip():
        raise UsageError("--text is empty")
    if s["input"] is not None:
        _readable(s["input"], "input")
    if s["out"]:
        _writable(s["out"])
    ckpt, vocab, use_cov = _load_for_decoding(s)
    articles = [s["text"]] if s["text"] is not None else _article_lines(s["input"])
    lines = [B.detokenize(_decode(a, ckpt, vocab, use_cov, s)) for a in articles]
    text = "".join(line + "\n" for line in lines)
    if s["out"]:
        with open(s["out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        out.write(text)
    return EXIT_OK


def select_examples(n, split, sample, seed):
    """Indices of the evaluated examples, in corpus order."""
    idx = [i for i in range(n) if split == "all" or split_of(i) == split]
    if sample is not None and sample < len(idx):
        pick = np.random.default_rng(seed).choice(len(idx), size=sample, replace=False)
        idx = [idx[k] for k in sorted(pick)]
    return idx


def cmd_evaluate(s, out=sys.stdout):
    _require(s, "corpus")
    if s["sample"] is not None and s["sample"] < 1:
        raise UsageError("--sample must be positive")
    pairs, _ = _corpus_pairs(s["corpus"])
    for key in ("out", "per_example"):
        if s[key]:
            _writable(s[key])
    idx = select_examples(len(pairs), s["split"], s["sample"], s["seed"])
    if not idx:
        raise UsageError(f"split {s['split']!r} of {s['corpus']} is empty")
    refs = [tokenize(normalize(pairs[i][1])) for i in idx]
    if s["candidates"] is not None:
        _readable(s["candidates"], "candidates file")
        with open(s["candidates"], encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if len(lines) == len(pairs) and len(idx) != len(pairs):
            lines = [lines[i] for i in idx]
        if len(lines) != len(idx):
            raise UsageError(f"{s['candidates']} has {len(lines)} lines for {len(idx)} references")
        cands = [tokenize(normalize(line)) for line in lines]
    else:
        ckpt, vocab, use_cov = _load_for_decoding(s)
        cands = [_decode(pairs[i][0], ckpt, vocab, use_cov, s) for i in idx]
    try:
        scores = R.corpus_rouge(zip(cands, refs))
    except EmptyInputError as exc:
        raise UsageError(str(exc)) from None
    dup = B.duplicate_rate(cands, 3)
    if s["out"]:
        R.write_report(s["out"], scores)
    if s["per_example"]:
        R.write_per_example(s["per_example"], ((i, R.score_pair(c, r)) for i, c, r in zip(idx, cands, refs)))
    print("metric,precision,recall,f1", file=out)
    for m in R.METRICS:
        sc = scores[m]
        print(f"{m},{sc.precision:.6f},{sc.recall:.6f},{sc.f1:.6f}", file=out)
    print(f"examples,{len(idx)}", file=out)
    print(f"duplicate-trigram-rate,{dup:.6f}", file=out)
    return EXIT_OK


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        command, s, given = resolve(argv)
        logging.basicConfig(level=logging.INFO if s.pop("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if command == "preprocess":
            return cmd_preprocess(s, out)
        if command == "build-vocab":
            return cmd_build_vocab(s, out)
        if command == "train":
            return cmd_train(s, given, out)
        if command == "summarize":
            return cmd_summarize(s, out)
        return cmd_evaluate(s, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Mismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
