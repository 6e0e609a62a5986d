"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the encoder, DOEI and HFA are provided.
Operations record onto the tape that is active in the current thread
(see :class:`Tape`); outside a tape nothing is recorded, which is how
inference runs.
"""

from __future__ import annotations

import itertools
import math
import struct
import threading
from typing import Callable, Sequence

import numpy as np

GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
COSINE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

DUMP_MAGIC = b"DOEITNSR"

_local = threading.local()
_node_ids = itertools.count(1)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _owned: bool = False):
        arr = np.asarray(data, dtype=np.float64) if _owned else np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out_id", "parents", "backward")

    def __init__(self, out_id, parents, backward):
        self.out_id = out_id
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of tracked operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is a
    valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._known: set[int] = set()
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def _register_leaf(self, t: Tensor) -> None:
        if t.node_id is None or t.node_id not in self._known:
            t.node_id = next(_node_ids)
            self._known.add(t.node_id)
            self.leaves[t.node_id] = t

    def _record(self, out: Tensor, parents: Sequence[Tensor], backward) -> None:
        for p in parents:
            if p.requires_grad and p.node_id not in self._known:
                self._register_leaf(p)
        out.requires_grad = True
        out.node_id = next(_node_ids)
        self._known.add(out.node_id)
        self.nodes.append(_Node(out.node_id, [p.node_id if p.requires_grad else None for p in parents], backward))

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id in self._known


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _wrap(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value, _owned=isinstance(value, np.ndarray) and value.flags.owndata)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape._record(out, parents, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tracked leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers, so call
    :meth:`Tensor.zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _wrap(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _wrap(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _wrap(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    u = SQRT_2_OVER_PI * x * (1.0 + GELU_COEF * x2)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _wrap(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _wrap(out, (a,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def elementwise(a, b=None, kind: str = "add") -> Tensor:
    """Dispatch helper over the pointwise kinds used by the model."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree or be absent on one side."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _wrap(ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _wrap(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _wrap(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _wrap(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _wrap(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# normalisations


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _wrap(y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = x.shape[-1]

    def bw(g):
        gx = g * gd
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gin, ggain, gbias

    if d < 1:
        raise ShapeError("layer_norm over an empty axis")
    return _wrap(xhat * gd + bias.data, (a, gain, bias), bw)


def normalize_rows_sum(a: Tensor) -> Tensor:
    """Divide each last-axis row by its sum (rows must have positive sums)."""
    s = a.data.sum(axis=-1, keepdims=True)
    y = a.data / s
    return _wrap(y, (a,), lambda g: ((g - (g * y).sum(axis=-1, keepdims=True)) / s,))


def l2_normalize_rows(a: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """x / max(||x||, eps) along the last axis."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    big = norm > eps
    den = np.where(big, norm, eps)
    y = x / den

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / den, g / eps),)

    return _wrap(y, (a,), bw)


# --------------------------------------------------------------------------
# untracked helpers


def minmax_normalize(a) -> Tensor:
    """Affine map onto [0, 1]; a constant input maps to all zeros."""
    x = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Tensor(np.zeros_like(x))
    return Tensor((x - lo) / (hi - lo))


def cosine_similarity(a, b, eps: float = COSINE_EPS) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    return float(a @ b / (max(np.linalg.norm(a), eps) * max(np.linalg.norm(b), eps)))


# --------------------------------------------------------------------------
# binary dump


def dump_bytes(t) -> bytes:
    x = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    head = DUMP_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + x.tobytes()


def load_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one dump starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset : offset + 8] != DUMP_MAGIC:
        raise ValueError("bad tensor dump magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 8)
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    n = int(np.prod(dims, dtype=np.int64))
    end = pos + 8 * n
    if end > len(buf):
        raise ValueError("truncated tensor dump")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
    return Tensor(arr), end


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = load_bytes(buf)
    if end != len(buf):
        raise ValueError("trailing bytes after tensor dump")
    return t
