"""
Dense tensors with reverse-mode differentiation.

Every differentiable operation records its parents and the name of its
backward rule. Backward rules live in ``BACKWARD_RULES`` keyed by op name so
they can be inspected (and, in verification tests, sabotaged) without
touching the forward code.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate for the requested operation."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


BACKWARD_RULES: dict[str, Callable] = {}

_grad_enabled = True


def rule(name: str):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self.saved = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str | None:
        return self._op

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = BACKWARD_RULES[node._op](node, g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar (dispatch through module functions) -------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``teacher`` marks parameters of the distillation teacher branch; the
    trainer asserts that distillation losses never reach them.
    """

    def __init__(self, data, name: str = "", trainable: bool = True, teacher: bool = False):
        super().__init__(np.array(data, copy=True))
        self.requires_grad = trainable
        self.trainable = trainable
        self.teacher = teacher
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, teacher={self.teacher})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def record(out: np.ndarray, parents: Sequence[Tensor], op: str, saved=None) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._op = op
        t.saved = saved
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data + b.data, (a, b), "add")


@rule("add")
def _add_back(node, g):
    a, b = node._parents
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data - b.data, (a, b), "sub")


@rule("sub")
def _sub_back(node, g):
    a, b = node._parents
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data * b.data, (a, b), "mul")


@rule("mul")
def _mul_back(node, g):
    a, b = node._parents
    ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data / b.data, (a, b), "div")


@rule("div")
def _div_back(node, g):
    a, b = node._parents
    ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), "neg")


@rule("neg")
def _neg_back(node, g):
    return (-g,)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data**exponent, (a,), "power", saved=exponent)


@rule("power")
def _power_back(node, g):
    (a,) = node._parents
    p = node.saved
    return (g * p * a.data ** (p - 1),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), "exp", saved=out)


@rule("exp")
def _exp_back(node, g):
    return (g * node.saved,)


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), "log")


@rule("log")
def _log_back(node, g):
    return (g / node._parents[0].data,)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record(out, (a,), "sqrt", saved=out)


@rule("sqrt")
def _sqrt_back(node, g):
    return (g * 0.5 / node.saved,)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), "tanh", saved=out)


@rule("tanh")
def _tanh_back(node, g):
    return (g * (1.0 - node.saved**2),)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    return record(np.maximum(a.data, floor), (a,), "clip_min", saved=floor)


@rule("clip_min")
def _clip_min_back(node, g):
    return (g * (node._parents[0].data > node.saved),)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return record(np.matmul(a.data, b.data), (a, b), "matmul")


@rule("matmul")
def _matmul_back(node, g):
    a, b = node._parents
    ga = gb = None
    if a.requires_grad:
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", saved=(axis, keepdims))


@rule("sum")
def _sum_back(node, g):
    (a,) = node._parents
    axis, keepdims = node.saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), "reshape")


@rule("reshape")
def _reshape_back(node, g):
    return (g.reshape(node._parents[0].shape),)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    return record(a.data.transpose(axes), (a,), "transpose", saved=axes)


@rule("transpose")
def _transpose_back(node, g):
    return (g.transpose(np.argsort(node.saved)),)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    return record(a.data[index], (a,), "getitem", saved=index)


@rule("getitem")
def _getitem_back(node, g):
    (a,) = node._parents
    out = np.zeros(a.shape, dtype=g.dtype)
    index = node.saved
    if _is_basic_index(index):
        out[index] += g
    else:
        np.add.at(out, index, g)
    return (out,)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    return record(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", saved=(axis, sizes))


@rule("concat")
def _concat_back(node, g):
    axis, sizes = node.saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return record(np.stack([t.data for t in ts], axis=axis), ts, "stack", saved=axis)


@rule("stack")
def _stack_back(node, g):
    axis = node.saved
    return tuple(np.take(g, i, axis=axis) for i in range(g.shape[axis]))
