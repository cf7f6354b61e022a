"""Dense n-d array with a reverse-mode gradient tape.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into leaf ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "set_nonfinite_trap",
]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity while the trap is on."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_trap = {"enabled": True}


def set_nonfinite_trap(enabled: bool) -> bool:
    """Toggle the NaN/inf check on op outputs. Returns the previous setting."""
    prev = _trap["enabled"]
    _trap["enabled"] = bool(enabled)
    return prev


def _check_finite(values: np.ndarray, op: str) -> None:
    if _trap["enabled"] and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {op!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100  # make ndarray + Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None, _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, values: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(values, op)
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        if not track:
            return cls(values)
        return cls(values, requires_grad=True, _parents=parents, _backward=backward, _op=op)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"backward: gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, f"grad of {node._op}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape, "sub")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape, "mul")
        a, b = self.data, other.data
        return Tensor._make(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self.data, other.data
        return Tensor._make(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), backward, "getitem")

    # -- method sugar ---------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def var(self, axis=None, keepdims=False, ddof=0) -> "Tensor":
        return var(self, axis=axis, keepdims=keepdims, ddof=ddof)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return Tensor._make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    return Tensor._make(
        a.data.sum(axis=axes, keepdims=keepdims), (a,),
        lambda g: (np.array(_expand(g, shape, axes, keepdims)),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape
    return Tensor._make(
        a.data.mean(axis=axes, keepdims=keepdims), (a,),
        lambda g: (np.array(_expand(g, shape, axes, keepdims)) / count,), "mean")


def var(a: Tensor, axis=None, keepdims=False, ddof=0) -> Tensor:
    """Variance along ``axis`` with ``count - ddof`` in the denominator."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count - ddof <= 0:
        raise ShapeError(f"var: {count} elements is too few for ddof={ddof}")
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered ** 2).sum(axis=axes, keepdims=keepdims) / (count - ddof)
    shape = a.shape

    def backward(g):
        g = _expand(g, shape, axes, keepdims)
        return (g * centered * (2.0 / (count - ddof)),)

    return Tensor._make(out, (a,), backward, "var")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor._make(out, (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                        lambda g: (g * mask,), "relu")
