"""A small define-by-run reverse-mode autodiff engine on top of numpy.

Only the operations the recommender needs are provided. All data is held
as float64. Operations are recorded on the active :class:`Tape` whenever
at least one input requires a gradient; :func:`backward` walks the tape in
reverse and then clears it.

Example
-------
>>> x = Tensor(3.0, requires_grad=True)
>>> y = x * x
>>> backward(y)
>>> float(x.grad)
6.0
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations (creation order is a topological order)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable) -> None:
        node = _Node(out, tuple(parents), backward_fn)
        out._node = node
        out._tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.out._tape = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None:
            if loss.requires_grad:
                loss._accumulate(np.ones_like(loss.data))
            self.clear()
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is not None and parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    parent._accumulate(pg)
        self.clear()


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def backward(loss: "Tensor") -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    tape = loss._tape if loss._tape is not None else current_tape()
    tape.backward(loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None
        self._tape = None

    # -- basic properties --------------------------------------------------
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

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = False
    if _GRAD_ENABLED[-1]:
        for p in parents:
            if p.requires_grad:
                needs = True
                break
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPES[-1].record(out, parents, backward_fn)
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an externally implemented op; ``backward_fn(g)`` returns one
    gradient (or None) per parent."""
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Element-wise product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


elementwise_mul = mul


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including batch broadcasting and 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so the weight gradient is a single GEMM
        lead = a.shape[:-1]
        flat = reshape(a, (-1, a.shape[-1]))
        return reshape(matmul(flat, b), lead + (b.shape[-1],))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, W: Tensor) -> Tensor:
    """``x @ W.T`` for a weight stored as (out, in); x may have leading batch axes."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    x2 = x.data.reshape(-1, W.shape[1])
    out = (x2 @ W.data.T).reshape(x.shape[:-1] + (W.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if W.requires_grad else None
        return gx, gw

    return _make(out, (x, W), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, np.argsort(axes)),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenation along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), bw)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` may have any integer shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        flat = g.reshape(-1, table.shape[1])
        return (kernels.scatter_add_rows(table.shape[0], idx.reshape(-1), flat),)

    return _make(out, (table,), bw)


embedding_lookup = take_rows


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) removes entries from the
    normalisation; a slice with every entry masked yields zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(x - top)
    total = e.sum(axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


softmax_rowwise = softmax


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def he_init(shape, seed=None, name: str | None = None) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)) with fan_in taken as the last axis."""
    shape = tuple(int(s) for s in shape)
    if not shape or shape[-1] < 1:
        raise ValueError(f"he_init: cannot derive fan_in from shape {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / shape[-1])
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def parameters_with_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
