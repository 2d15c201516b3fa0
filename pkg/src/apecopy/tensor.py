"""Dense tensors with reverse-mode automatic differentiation.

A tape-style engine on top of numpy arrays: every operation that touches a
tensor requiring gradients records a graph node holding its parents and a
backward closure.  ``backward()`` on a scalar loss topologically sorts the
recorded nodes and sweeps them in reverse, accumulating gradients into
``Tensor.grad``.

Kernels are float32 by default; pass float64 arrays (or use
``default_dtype``) for gradient-check headroom.  Broadcasting follows numpy
rules, but callers are expected to line shapes up explicitly (leading-axis
expansion or explicit size-1 axes); gradients are reduced back to the
operand shapes automatically.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "tsum",
    "tmean",
    "tmin",
    "maximum",
    "power",
    "log",
    "exp",
    "sigmoid",
    "relu",
    "softmax",
    "embedding_lookup",
    "gather_last",
    "scatter_last",
    "dropout",
    "layer_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used when tensors are built from lists."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One recorded operation: parents plus the backward closure."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """n-dimensional array participating in the differentiation graph.

    ``grad`` is ``None`` until a backward pass deposits into it; repeated
    backward passes without zeroing accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _non_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape an operand had before broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary(a: Tensor, b: Tensor, fwd, da, db, op: str) -> Tensor:
    try:
        data = fwd(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from err

    def backward_fn(g):
        return _unbroadcast(da(g, a.data, b.data), a.shape), _unbroadcast(db(g, a.data, b.data), b.shape)

    return _make(data, (a, b), backward_fn, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when either operand has stacked leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward_fn, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward_fn, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward_fn, "reshape")


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(data, parts, backward_fn, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[slicer]), (a,), backward_fn, "slice")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(data, (a,), backward_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def tmin(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Minimum along an axis; the gradient routes to the first minimiser."""
    data = a.data.min(axis=axis, keepdims=keepdims)
    idx = np.expand_dims(a.data.argmin(axis=axis), axis)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make(data, (a,), backward_fn, "min")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes only where a > floor."""
    data = np.maximum(a.data, np.asarray(floor, dtype=a.dtype))
    mask = a.data > floor

    def backward_fn(g):
        return (g * mask,)

    return _make(data, (a,), backward_fn, "maximum")


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(data, (a,), backward_fn, "power")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _make(data, (a,), backward_fn, "log")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _make(data, (a,), backward_fn, "exp")


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward_fn, "sigmoid")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), backward_fn, "relu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (per-row max subtraction) along ``axis``."""
    if np.isnan(a.data).any():
        raise FloatingPointError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return _make(data, (a,), backward_fn, "softmax")


# ---------------------------------------------------------------------------
# lookup / scatter
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row gather; the backward pass scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    data = table.data[idx]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(data, (table,), backward_fn, "embedding")


def gather_last(a: Tensor, indices) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} != {a.shape[:-1]}")
    expanded = np.expand_dims(idx, -1)
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        return (full,)

    return _make(data, (a,), backward_fn, "gather_last")


def scatter_last(values: Tensor, indices, size: int) -> Tensor:
    """Scatter-add the last axis of ``values`` into a new axis of ``size``.

    ``indices`` maps each last-axis slot to its destination; duplicate
    destinations accumulate.  Index arrays with fewer dimensions broadcast
    over the extra leading axes of ``values`` (e.g. per-sentence token ids
    applied at every decoding step).
    """
    idx = np.asarray(indices)
    while idx.ndim < values.ndim:
        idx = np.expand_dims(idx, -2)
    idx = np.broadcast_to(idx, values.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"scatter index out of range [0, {size})")
    out = np.zeros(values.shape[:-1] + (size,), dtype=values.dtype)
    lead = []
    for axis_i, n in enumerate(values.shape[:-1]):
        open_shape = [1] * values.ndim
        open_shape[axis_i] = n
        lead.append(np.broadcast_to(np.arange(n).reshape(open_shape), values.shape))
    lead = tuple(lead)
    np.add.at(out, lead + (idx,), values.data)

    def backward_fn(g):
        return (g[lead + (idx,)],)

    return _make(out, (values,), backward_fn, "scatter_last")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, dtype=a.dtype)
    return mul(a, Tensor(keep))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1, then apply gain+bias."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients computed in this pass are accumulated into any existing
    ``grad`` arrays, so two passes without zeroing yield exactly twice the
    single-pass gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flowing.get(id(t))
        if g is None:
            continue
        if t.node is not None:
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                acc = flowing.get(id(p))
                flowing[id(p)] = pg.copy() if acc is None else acc + pg

    for t in order:
        g = flowing.get(id(t))
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.astype(t.dtype, copy=True)
        else:
            t.grad = t.grad + g.astype(t.dtype, copy=False)
