"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and, when it participates in gradient
tracking, remembers its parents and a closure mapping the upstream gradient
to one gradient per parent.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "set_precision",
    "get_dtype",
    "as_tensor",
    "concat",
    "where",
]

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype = None  # resolved from FORMED_PRECISION on first use
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    if _dtype is None:
        set_precision(os.environ.get("FORMED_PRECISION", "f64"))
    return _dtype


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or get_dtype())
    return {np.dtype(np.float64): "f64", np.dtype(np.float32): "f32"}[dtype]


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # a finite sum proves every element finite; otherwise fall back to the exact test
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(np.sum(data)):
            return
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype())
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # graph construction -------------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # backward -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic ---------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        x, y = self.data, other.data
        need_x, need_y = self.requires_grad, other.requires_grad
        return Tensor._from_op(
            x * y,
            (self, other),
            lambda g: (
                _unbroadcast(g * y, x.shape) if need_x else None,
                _unbroadcast(g * x, y.shape) if need_y else None,
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        return Tensor._from_op(
            x**exponent,
            (self,),
            lambda g: (g * exponent * x ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError("matmul operands must be at least 2-d")
        if x.shape[-1] != y.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")

        need_x, need_y = self.requires_grad, other.requires_grad

        def backward(g):
            gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if need_x else None
            gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if need_y else None
            return gx, gy

        return Tensor._from_op(x @ y, (self, other), backward, "matmul")

    # elementwise functions ----------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        if (x <= 0).any():
            raise NonFiniteError("log of non-positive value")
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g / (2.0 * out),), "sqrt")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def swish(self) -> "Tensor":
        x = self.data
        s = _sigmoid(x)
        return Tensor._from_op(x * s, (self,), lambda g: (g * (s + x * s * (1.0 - s)),), "swish")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    # reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # shape manipulation -------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def expand_dims(self, axis: int) -> "Tensor":
        return self.reshape(np.expand_dims(self.data, axis).shape)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[index]), (self,), backward, "getitem")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x, dtype=x.dtype)
    return Tensor(x)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def where(condition: np.ndarray, x: Tensor, y: Tensor) -> Tensor:
    """Select from ``x`` where ``condition`` holds, else ``y``.  No gradient leaks across."""
    x, y = as_tensor(x), as_tensor(y)
    cond = np.asarray(condition, dtype=bool)
    xs, ys = x.shape, y.shape

    def backward(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), xs), _unbroadcast(np.where(cond, zero, g), ys))

    return Tensor._from_op(np.where(cond, x.data, y.data), (x, y), backward, "where")
