"""Reverse-mode automatic differentiation over dense numpy arrays.

A dynamic tape: every operation on tracked tensors records its inputs and a
backward closure on the output node.  ``backward()`` on a scalar loss walks
the recorded graph in reverse topological order and accumulates gradients
additively, so a value used k times receives the sum of its k path
contributions.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class NumericsError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype.kind in "iub":
        a = a.astype(np.float64)
    return a


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    The ``data`` array is treated as immutable once the tensor has been used
    in an operation; optimizers mutate leaf parameters only between forward
    passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction of op outputs -------------------------------------

    @staticmethod
    def _compose(
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
    ) -> "Tensor":
        """Wrap an op result, recording parents and the backward closure."""
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(g), self.data.shape).astype(
            self.data.dtype, copy=False
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar to every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitive operations ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return Tensor._compose(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return Tensor._compose(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return Tensor._compose(data, (a, b), backward)


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(a.data.shape))

    return Tensor._compose(data, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))

    return Tensor._compose(data, (a,), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = _wrap(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate(full)

    return Tensor._compose(data, (a,), backward)


def repeat_batch(a, reps: int) -> Tensor:
    """Repeat each leading-axis entry ``reps`` times: [B,...] -> [B*reps,...].

    Backward sums the contributions of the copies.
    """
    a = _wrap(a)
    b = a.shape[0]
    data = np.repeat(a.data, reps, axis=0)

    def backward(g):
        a.accumulate(g.reshape((b, reps) + a.shape[1:]).sum(axis=1))

    return Tensor._compose(data, (a,), backward)


def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor._compose(data, (a,), backward)


def tensor_mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g):
        a.accumulate(np.broadcast_to(g / n, a.data.shape))

    return Tensor._compose(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        a.accumulate(g * data * (1.0 - data))

    return Tensor._compose(data, (a,), backward)


# -- gradient utilities --------------------------------------------------


def grads_for(loss: Tensor, params: dict) -> dict:
    """Run backward and return a gradient per named parameter.

    Parameters unreachable from the loss get an all-zero gradient.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    The oracle used by every gradient check; it never touches the autodiff
    machinery.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(
                f"non-finite function value at flat index {i}: "
                f"f(+h)={fp}, f(-h)={fm}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative discrepancy between two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(
        np.max(np.abs(analytic), initial=0.0),
        np.max(np.abs(numeric), initial=0.0),
        1e-8,
    )
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
