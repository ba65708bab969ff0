"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Tape` whenever at least one operand requires a gradient.  Outside a
tape (or when no operand requires a gradient) the same code path simply
evaluates, which is how sampling and evaluation run without bookkeeping.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> float(tape.backward(y)[x])
    6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "ShapeError",
    "TapeError",
    "as_tensor",
    "backward",
    "add", "sub", "mul", "div", "neg", "power", "matmul",
    "exp", "log", "relu", "tanh", "softplus", "sqrt",
    "sum", "mean", "gather", "scatter_add", "concat", "take_slice",
    "minimum", "maximum", "reshape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class Tensor:
    """An immutable float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


@dataclass
class Tape:
    """Records operations in evaluation order; consumed by one backward pass."""

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(node)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. every leaf tensor that requires grad."""
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if root.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if not self.nodes:
            raise TapeError("tape is empty")
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.nodes = []
        self.consumed = True
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}

    def gradient(self, root: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Like :meth:`backward` but keyed by parameter name; unused params get zeros."""
        gmap = self.backward(root)
        return {k: gmap.get(p, np.zeros_like(p.data)) for k, p in params.items()}


def backward(root: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    tape = tape if tape is not None else (_ACTIVE[-1] if _ACTIVE else None)
    if tape is None:
        raise TapeError("no tape available for backward")
    return tape.backward(root)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(np.ascontiguousarray(data) if data.ndim else np.array(data), _owned=True)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(TapeNode(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("maximum", a, b)
    pick_a = a.data >= b.data
    return _emit("maximum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:  # shared weight: flatten leading axes instead of summing outer products
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), vjp)


# -- elementwise unary --------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _emit("power", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _emit("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


# -- reductions and structure -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take_slice(a, key) -> Tensor:
    """Basic (view-style) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _emit("slice", out, (a,), vjp)


def _incidence(index: np.ndarray, size: int) -> np.ndarray:
    inc = np.zeros((size, index.size))
    inc[index, np.arange(index.size)] = 1.0
    return inc


def gather(a, index, axis: int = 0) -> Tensor:
    """Select entries ``index`` (1-D int array) along ``axis``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    if index.ndim != 1:
        raise ShapeError("gather", a.shape, index.shape, detail="index must be 1-D")
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("gather", a.shape, index.shape, detail=f"index out of range on axis {axis}")
    index = index % a.shape[axis] if index.size else index
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        return (_scatter(g, index, axis, a.shape[axis]),)

    return _emit("gather", out, (a,), vjp)


def _scatter(x: np.ndarray, index: np.ndarray, axis: int, size: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -2) if x.ndim > 1 else x[:, None]
    res = _incidence(index, size) @ moved
    return np.moveaxis(res, -2, axis) if x.ndim > 1 else res[:, 0]


def scatter_add(a, index, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``a`` along ``axis`` into ``size`` buckets given by ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    if index.ndim != 1 or index.size != a.shape[axis]:
        raise ShapeError("scatter_add", a.shape, index.shape,
                         detail=f"index length must equal extent of axis {axis}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter_add", a.shape, index.shape, detail=f"bucket out of range [0, {size})")
    out = _scatter(a.data, index, axis, size)
    return _emit("scatter_add", out, (a,), lambda g: (np.take(g, index, axis=axis),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, ts, vjp)
