"""Adagrad training loop with the two-phase coverage schedule.

Phase 1 trains the plain pointer-generator (no coverage input to attention,
no coverage penalty). Phase 2 switches coverage on and keeps training from
the phase-1 weights. The batch drawn at step ``k`` depends only on
``(seed, k)``, so a run resumed from a checkpoint replays exactly the same
sequence of batches as an unbroken one.
"""

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from . import tensor as tt
from .errors import CheckpointCorruptError, NumericalAbort
from .tensor import Tensor
from .text import MAX_DEC, MAX_ENC, MAX_VOCAB, collate, num_batches

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ptrgen-checkpoint/1"
LOSS_HEADER = ("step", "phase", "loss", "coverage_loss")


@dataclass
class TrainConfig:
    vocab_size: int = MAX_VOCAB
    d_e: int = M.D_EMB
    d_h: int = M.D_HID
    max_enc: int = MAX_ENC
    max_dec: int = MAX_DEC
    lr: float = 0.15
    adagrad_init_acc: float = 0.1
    clip_norm: float = 2.0
    batch_size: int = 16
    cov_weight: float = 1.0
    phase1_steps: int = 0
    phase2_steps: int = 0
    coverage: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str = None
    init_scale: float = M.INIT_SCALE
    dtype: str = "float64"
    val_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("step counts must be nonnegative")

    @property
    def total_steps(self):
        return self.phase1_steps + self.phase2_steps

    def phase_of(self, step):
        """Phase (1 or 2) of the zero-based ``step``."""
        return 1 if step < self.phase1_steps else 2

    def coverage_at(self, step):
        return self.coverage and self.phase_of(step) == 2

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimiser pieces


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_by_global_norm(grads, max_norm=2.0):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def adagrad_step(params, grads, acc, lr=0.15, eps=1e-10):
    """In-place Adagrad: ``acc += g²; p -= lr·g / (sqrt(acc) + eps)``."""
    for p, g, a in zip(params, grads, acc):
        a += g * g
        p -= lr * g / (np.sqrt(a) + eps)


def init_accumulators(params, init=0.1):
    return {name: np.full(t.shape, init, dtype=t.dtype) for name, t in params.items()}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: M.ModelParams
    acc: dict
    step: int
    phase: int
    config: dict = field(default_factory=dict)
    path: str = None

    @property
    def coverage(self):
        return bool(self.config.get("coverage", True)) and self.phase == 2


def _write_array(path, arr):
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def _entry(name, arr, file):
    return {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str, "file": file}


def save_checkpoint(params, acc, meta, directory):
    """Write ``manifest.json`` plus one raw little-endian payload per tensor.

    ``meta`` must hold ``step`` and ``phase`` and may hold a ``config``
    dict. The directory is assembled next to its destination and renamed
    into place so a crash never leaves a half-written checkpoint.
    """
    directory = os.fspath(directory)
    parent = os.path.dirname(os.path.abspath(directory))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": int(meta["step"]),
        "phase": int(meta["phase"]),
        "hyperparameters": {"vocab_size": params.vocab_size, "d_e": params.d_e, "d_h": params.d_h},
        "config": meta.get("config", {}),
        "tensors": [],
        "accumulators": [],
    }
    for name, t in params.items():
        _write_array(os.path.join(tmp, f"{name}.bin"), t.data)
        manifest["tensors"].append(_entry(name, t.data, f"{name}.bin"))
    for name in M.PARAM_NAMES:
        if name in acc:
            file = f"adagrad.{name}.bin"
            _write_array(os.path.join(tmp, file), acc[name])
            manifest["accumulators"].append(_entry(name, acc[name], file))
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False)
    if os.path.exists(directory):
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def _read_array(directory, entry):
    path = os.path.join(directory, entry["file"])
    if not os.path.isfile(path):
        raise CheckpointCorruptError(f"payload file {entry['file']!r} for tensor {entry['name']!r} is missing")
    dtype = np.dtype(entry["dtype"])
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize
    size = os.path.getsize(path)
    if size != expected:
        raise CheckpointCorruptError(
            f"tensor {entry['name']!r}: {entry['file']} holds {size} bytes, shape {list(shape)} needs {expected}")
    with open(path, "rb") as fh:
        data = np.frombuffer(fh.read(), dtype=dtype).reshape(shape)
    return data.astype(dtype.newbyteorder("="))


def load_checkpoint(directory):
    directory = os.fspath(directory)
    try:
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointCorruptError(f"{directory}: manifest.json is missing") from None
    hp = manifest["hyperparameters"]
    expected = M.param_shapes(hp["vocab_size"], hp["d_e"], hp["d_h"])
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointCorruptError(f"unknown tensor {name!r} in manifest")
        if tuple(entry["shape"]) != expected[name]:
            raise CheckpointCorruptError(
                f"tensor {name!r}: manifest shape {entry['shape']} does not match {list(expected[name])}")
        tensors[name] = Tensor(_read_array(directory, entry), requires_grad=True, name=name)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointCorruptError(f"manifest lists no entry for tensor(s) {sorted(missing)}")
    acc = {}
    for entry in manifest.get("accumulators", []):
        if tuple(entry["shape"]) != expected.get(entry["name"]):
            raise CheckpointCorruptError(f"accumulator {entry['name']!r}: shape {entry['shape']} is wrong")
        acc[entry["name"]] = _read_array(directory, entry)
    params = M.ModelParams(tensors, hp["vocab_size"], hp["d_e"], hp["d_h"])
    return Checkpoint(params, acc, manifest["step"], manifest["phase"], manifest.get("config", {}), directory)


def checkpoint_name(step):
    return f"step-{step:07d}"


def latest_checkpoint(checkpoint_dir):
    if not os.path.isdir(checkpoint_dir):
        return None
    names = sorted(n for n in os.listdir(checkpoint_dir) if n.startswith("step-"))
    return os.path.join(checkpoint_dir, names[-1]) if names else None


# ---------------------------------------------------------------------------
# data order


class BatchSchedule:
    """Maps a global step to its batch: epoch ``k`` uses a permutation seeded by ``(seed, k)``."""

    def __init__(self, examples, batch_size, seed):
        self.examples = list(examples)
        if not self.examples:
            raise ValueError("no training examples")
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = num_batches(len(self.examples), batch_size)
        self._epoch = None
        self._order = None

    def __call__(self, step):
        epoch, k = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._order = np.random.default_rng([self.seed, epoch]).permutation(len(self.examples))
            self._epoch = epoch
        idx = self._order[k * self.batch_size : (k + 1) * self.batch_size]
        return collate([self.examples[i] for i in idx])


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: M.ModelParams
    acc: dict
    history: list
    checkpoints: list
    val_history: list = field(default_factory=list)

    @property
    def losses(self):
        return [row[2] for row in self.history]


def evaluate_loss(params, examples, batch_size, cov_weight, use_coverage):
    total = n = 0.0
    for start in range(0, len(examples), batch_size):
        batch = collate(examples[start : start + batch_size])
        terms = M.loss(batch, params, cov_weight, use_coverage)
        tokens = batch.dec_mask.sum()
        total += terms.total.item() * tokens
        n += tokens
    return total / n


def flag_stalls(losses, window=200):
    """Start indices of ``window``-step blocks whose mean did not drop from the previous block."""
    flagged = []
    means = [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]
    for k in range(1, len(means)):
        if not means[k] < means[k - 1]:
            flagged.append(k * window)
    return flagged


def _read_history(path, upto):
    rows = []
    if not os.path.isfile(path):
        return rows
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            step = int(rec["step"])
            if step <= upto:
                rows.append((step, int(rec["phase"]), float(rec["loss"]), float(rec["coverage_loss"])))
    return rows


def _write_history(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for step, phase, loss, cov in rows:
            w.writerow((step, phase, repr(float(loss)), repr(float(cov))))


def train(config, examples, val_examples=None, resume=None, params=None):
    """Run (or resume) training and return the final parameters and loss history.

    ``history`` rows are ``(step, phase, loss, coverage_loss)`` with ``step``
    counting completed updates from 1. When ``config.checkpoint_dir`` is set,
    checkpoints land there every ``checkpoint_every`` steps and at the end
    of each phase, and ``loss.csv`` mirrors the history.
    """
    dtype = np.dtype(config.dtype)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        params, acc, start = ckpt.params, ckpt.acc, ckpt.step
        if set(acc) != set(M.PARAM_NAMES):
            raise CheckpointCorruptError("checkpoint lacks optimizer accumulators; cannot resume")
        last_ckpt = ckpt.path
    else:
        if params is None:
            params = M.init_params(config.vocab_size, config.d_e, config.d_h, config.seed, dtype, config.init_scale)
        acc = init_accumulators(params, config.adagrad_init_acc)
        start = 0
        last_ckpt = None
    names = list(M.PARAM_NAMES)
    tensors = [params[n] for n in names]

    csv_path = None
    history = []
    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        csv_path = os.path.join(config.checkpoint_dir, "loss.csv")
        history = _read_history(csv_path, start) if start else []
    schedule = BatchSchedule(examples, config.batch_size, config.seed)
    checkpoints, val_history = [], []

    def save(done):
        nonlocal last_ckpt
        if not config.checkpoint_dir:
            return
        meta = {"step": done, "phase": config.phase_of(done - 1), "config": asdict(config)}
        path = save_checkpoint(params, acc, meta, os.path.join(config.checkpoint_dir, checkpoint_name(done)))
        _write_history(csv_path, history)
        checkpoints.append(path)
        last_ckpt = path

    for step in range(start, config.total_steps):
        phase = config.phase_of(step)
        use_cov = config.coverage_at(step)
        batch = schedule(step)
        tt.zero_grads(tensors)
        with tt.Tape() as tape:
            terms = M.loss(batch, params, config.cov_weight if use_cov else 0.0, use_cov)
        value = terms.total.item()
        if not math.isfinite(value):
            if csv_path:
                _write_history(csv_path, history)
            raise NumericalAbort(step + 1, last_ckpt)
        tt.backward(tape, terms.total)
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        grads, _ = clip_by_global_norm(grads, config.clip_norm)
        adagrad_step([t.data for t in tensors], grads, [acc[n] for n in names], config.lr)
        done = step + 1
        history.append((done, phase, value, float(terms.coverage)))
        if done % 100 == 0:
            log.info("step %d phase %d loss %.4f coverage %.4f", done, phase, value, terms.coverage)
        if val_examples and config.val_every and done % config.val_every == 0:
            v = evaluate_loss(params, val_examples, config.batch_size, config.cov_weight if use_cov else 0.0, use_cov)
            val_history.append((done, v))
            log.info("step %d validation loss %.4f", done, v)
        boundary = done == config.phase1_steps or done == config.total_steps
        if (config.checkpoint_every and done % config.checkpoint_every == 0) or boundary:
            save(done)
        if done == config.phase1_steps:
            stalls = flag_stalls([r[2] for r in history if r[1] == 1])
            if stalls:
                log.warning("phase-1 loss failed to decrease in window(s) starting at %s", stalls)

    if csv_path:
        _write_history(csv_path, history)
    return TrainResult(params, acc, history, checkpoints, val_history)
