"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the pointer-generator model needs are provided. Every
operation checks shapes strictly: binary ops require equal shapes, except
that a 1-D tensor may be added (or multiplied) across the rows of a tensor
whose last dimension matches it. Nothing else broadcasts.

Recording is opt-in: operations are only taped inside a ``with Tape() as
tape:`` block, and only when at least one input is tracked (a learnable
leaf or an earlier output on the same tape). Outside a tape everything runs
as plain numpy, which is what inference uses.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = tsum(x * x)
>>> _ = backward(tape, loss)
>>> x.grad
array([2., 4.])
"""

import contextvars
from collections import namedtuple

import numpy as np

from .errors import ContractError, DegenerateMaskError, DimensionError, IdOutOfRangeError

DEFAULT_DTYPE = np.float64

_active_tape = contextvars.ContextVar("ptrgen_active_tape", default=None)
_debug = False

Node = namedtuple("Node", "kind inputs needs vjp")


def set_debug(flag):
    """Turn finite-value checking of every op output on or off."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended as operations execute, so inputs always precede the
    node that consumes them. :func:`backward` walks the nodes once in
    reverse and then clears the tape.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def tracks(self, t):
        return t.requires_grad or (t._tape is self and t.node_id is not None)

    def record(self, kind, inputs, out, vjp):
        if self.consumed:
            raise ContractError("cannot record on a consumed tape")
        needs = tuple(isinstance(t, Tensor) and self.tracks(t) for t in inputs)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(kind, inputs, needs, vjp))


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(kind, data, inputs, vjp, check=True):
    out = Tensor(data)
    if _debug and check and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs if isinstance(t, Tensor)):
            raise FloatingPointError(f"{kind} produced non-finite values from finite inputs")
    tape = _active_tape.get()
    if tape is not None and any(isinstance(t, Tensor) and tape.tracks(t) for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


def backward(tape, loss):
    """Propagate d(loss)/d(leaf) into ``.grad`` of every learnable leaf.

    Leaf gradients accumulate across calls; clear them with
    :func:`zero_grads` between optimisation steps. Returns a dict mapping
    each leaf that received a gradient to that gradient.
    """
    if tape.consumed:
        raise ContractError("tape has already been consumed by backward()")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ContractError("loss was not produced on this tape")

    nodes = tape.nodes
    grads = [None] * len(nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    leaves = {}
    for idx in range(loss.node_id, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = nodes[idx]
        in_grads = node.vjp(g, node.needs)
        for t, need, gi in zip(node.inputs, node.needs, in_grads):
            if not need or gi is None:
                continue
            if t._tape is tape and t.node_id is not None:
                prev = grads[t.node_id]
                grads[t.node_id] = gi if prev is None else prev + gi
            elif t.requires_grad:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                leaves[id(t)] = t
    tape.nodes = []
    tape.consumed = True
    return {t: t.grad for t in leaves.values()}


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# shape helpers


def _is_bias(a_shape, b_shape):
    return len(b_shape) == 1 and len(a_shape) >= 2 and a_shape[-1] == b_shape[0]


def _check_binary(kind, a, b):
    if a.shape == b.shape or _is_bias(a.shape, b.shape) or _is_bias(b.shape, a.shape):
        return
    raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _coerce(a, b):
    # Python scalars act as constants and need no shape rule.
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return a, b, "scalar_left"
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return a, b, "scalar_right"
    return as_tensor(a), as_tensor(b), None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b, scalar = _coerce(a, b)
    if scalar == "scalar_left":
        return _make("add", b.data + a, (b,), lambda g, n: (g,))
    if scalar == "scalar_right":
        return _make("add", a.data + b, (a,), lambda g, n: (g,))
    _check_binary("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b, scalar = _coerce(a, b)
    if scalar == "scalar_left":
        return _make("sub", a - b.data, (b,), lambda g, n: (-g,))
    if scalar == "scalar_right":
        return _make("sub", a.data - b, (a,), lambda g, n: (g,))
    _check_binary("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b, scalar = _coerce(a, b)
    if scalar == "scalar_left":
        a, b = b, a
        scalar = "scalar_right"
    if scalar == "scalar_right":
        c = b
        return _make("mul", a.data * c, (a,), lambda g, n: (g * c,))
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * bd, a.shape) if needs[0] else None,
                _unbroadcast(g * ad, b.shape) if needs[1] else None)

    return _make("mul", ad * bd, (a, b), vjp)


def tanh(x):
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g, n: (g * (1.0 - y * y),))


def sigmoid(x):
    # tanh form is exact at 0 and never overflows.
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", y, (x,), lambda g, n: (g * y * (1.0 - y),))


def log_sigmoid(x):
    """log(sigmoid(x)) without forming sigmoid(x)."""
    xd = x.data
    y = -np.logaddexp(0.0, -xd)

    def vjp(g, needs):
        return (g * 0.5 * (1.0 - np.tanh(0.5 * xd)),)

    return _make("log_sigmoid", y, (x,), vjp)


def exp(x):
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g, n: (g * y,))


def log(x):
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g, n: (g / xd,))


def elementwise_min(a, b):
    """Per-position minimum. The gradient goes to ``a`` on ties."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_min: shapes {a.shape} and {b.shape} differ")
    take_a = a.data <= b.data

    def vjp(g, needs):
        return (np.where(take_a, g, 0.0) if needs[0] else None,
                np.where(take_a, 0.0, g) if needs[1] else None)

    return _make("min", np.where(take_a, a.data, b.data), (a, b), vjp)


def logaddexp(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"logaddexp: shapes {a.shape} and {b.shape} differ")
    out = np.logaddexp(a.data, b.data)

    def vjp(g, needs):
        finite = np.isfinite(out)
        safe = np.where(finite, out, 0.0)
        with np.errstate(invalid="ignore"):
            wa = np.where(finite, np.exp(a.data - safe), 0.0)
            wb = np.where(finite, np.exp(b.data - safe), 0.0)
        return (g * wa if needs[0] else None, g * wb if needs[1] else None)

    return _make("logaddexp", out, (a, b), vjp, check=False)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    """``a @ b`` for 2-D operands, or batched over a shared leading axis for 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    if not ok:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        ga = g @ np.swapaxes(bd, -1, -2) if needs[0] else None
        gb = np.swapaxes(ad, -1, -2) @ g if needs[1] else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), vjp)


def tsum(x, axis=None):
    shape = x.shape

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axis), (x,), vjp)


def mean(x):
    return mul(tsum(x), 1.0 / x.data.size)


def reshape(x, shape):
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[u.shape for u in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ")

    def vjp(g, needs):
        return tuple(np.moveaxis(g, axis, 0))

    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def slice_axis(x, start, stop, axis=-1):
    ax = axis % x.ndim
    index = (slice(None),) * ax + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def vjp(g, needs):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make("slice", x.data[index], (x,), vjp)


def take(x, i, axis):
    """Select index ``i`` along ``axis``, dropping that axis."""
    ax = axis % x.ndim
    index = (slice(None),) * ax + (i,)
    shape, dtype = x.shape, x.dtype

    def vjp(g, needs):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make("take", x.data[index], (x,), vjp)


def expand(x, axis, n):
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    ax = axis % (x.ndim + 1)
    data = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return _make("expand", data, (x,), lambda g, needs: (g.sum(axis=ax),))


# ---------------------------------------------------------------------------
# indexing


def _check_ids(ids, limit, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size:
        bad = ids[(ids < 0) | (ids >= limit)]
        if bad.size:
            raise IdOutOfRangeError(f"{what}: id {int(bad[0])} outside [0, {limit})")
    return ids


def gather_rows(E, ids):
    """Rows ``E[ids]``; the backward pass scatter-adds into dE."""
    if E.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {E.shape}")
    ids = _check_ids(ids, E.shape[0], "gather_rows")
    shape, dtype = E.shape, E.dtype

    def vjp(g, needs):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    data = E.data[ids] if ids.size else np.zeros(ids.shape + (shape[1],), dtype=dtype)
    return _make("gather_rows", data, (E,), vjp)


def scatter_add(base, ids, values):
    """``out = base; out[ids[j]] += values[j]`` along the last axis.

    ``base`` is ``[n]`` with ``ids``/``values`` of shape ``[m]``, or the
    batched form ``[B, n]`` with ``[B, m]``. Duplicate ids accumulate.
    """
    base, values = as_tensor(base), as_tensor(values)
    ids = _check_ids(ids, base.shape[-1], "scatter_add")
    if ids.shape != values.shape or base.ndim != ids.ndim or base.shape[:-1] != ids.shape[:-1]:
        raise DimensionError(
            f"scatter_add: base {base.shape}, ids {ids.shape}, values {values.shape} are inconsistent")
    out = base.data.copy()
    if base.ndim == 1:
        where = (ids,)
    else:
        where = (np.repeat(np.arange(ids.shape[0]), ids.shape[1]).reshape(ids.shape), ids)
    np.add.at(out, where, values.data)

    def vjp(g, needs):
        return (g if needs[0] else None, g[where] if needs[1] else None)

    return _make("scatter_add", out, (base, values), vjp)


def pick(x, ids):
    """``x[b, ids[b]]`` for a 2-D ``x``: one entry per row."""
    if x.ndim != 2 or np.shape(ids) != (x.shape[0],):
        raise DimensionError(f"pick: need [B, n] values and [B] ids, got {x.shape} and {np.shape(ids)}")
    ids = _check_ids(ids, x.shape[1], "pick")
    rows = np.arange(x.shape[0])
    shape, dtype = x.shape, x.dtype

    def vjp(g, needs):
        out = np.zeros(shape, dtype=dtype)
        out[rows, ids] = g
        return (out,)

    return _make("pick", x.data[rows, ids], (x,), vjp)


# ---------------------------------------------------------------------------
# normalisers (all along the last axis)


def _check_mask(logits, mask):
    mask = np.asarray(mask)
    if mask.shape != logits.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    mask = mask != 0
    return mask


def masked_softmax(logits, mask):
    """Softmax over unmasked positions; masked positions are exactly zero."""
    mask = _check_mask(logits, mask)
    if not np.all(mask.any(axis=-1)):
        raise DegenerateMaskError("masked_softmax: a row has no unmasked position")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make("masked_softmax", y, (logits,), vjp)


def softmax(logits):
    return masked_softmax(logits, np.ones(logits.shape, dtype=bool))


def log_softmax(logits):
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g, needs):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (logits,), vjp)


def masked_logsumexp(x, mask):
    """log Σ exp(x) over unmasked positions; ``-inf`` for an empty row."""
    mask = _check_mask(x, mask)
    any_row = mask.any(axis=-1, keepdims=True)
    z = np.where(mask, x.data, -np.inf)
    m = np.where(any_row, z.max(axis=-1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(z - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (np.log(s) + m)[..., 0]
    w = np.where(any_row, e / np.where(any_row, s, 1.0), 0.0)

    def vjp(g, needs):
        return (np.expand_dims(g, -1) * w,)

    return _make("masked_logsumexp", out, (x,), vjp, check=False)
