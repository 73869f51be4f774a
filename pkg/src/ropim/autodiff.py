"""A small reverse-mode differentiation engine over numpy arrays.

Every primitive returns a new :class:`Tensor` whose ``_backward`` closure
accumulates vector-Jacobian products into its parents. The graph is the
tape: ``Tensor.backward`` orders it topologically, runs the closures once and
then releases the interior nodes.

Broadcasting is limited to what a transformer needs: leading batch axes on
either operand of ``matmul``/``add``/``mul`` are summed away in the backward
pass by :func:`_unbroadcast`.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ropim.errors import ContractError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any parameter")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over the axes broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), backward)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, slice)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(data, ts, backward)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _result(np.broadcast_to(a.data, tuple(shape)).copy(), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows for a 2-D input)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis, then apply the affine ``gamma``/``beta``.

    ``eps`` keeps constant rows finite (they normalize to ``beta``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    D = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv / D * (D * gx - gx.sum(axis=-1, keepdims=True)
                                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _result(y, (a,), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _result(np.asarray(a.data.mean()), (a,), backward)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward)


def abs_sum(a) -> Tensor:
    """Entrywise l1 norm; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return _result(np.asarray(np.abs(a.data).sum()), (a,), backward)


def abs_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign / n)

    return _result(np.asarray(np.abs(a.data).mean()), (a,), backward)


def linear_map(a, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed linear operator given as a function and its adjoint."""
    a = as_tensor(a)

    def backward(g):
        a._accumulate(adjoint(g))

    return _result(forward(a.data), (a,), backward)


def parameter(data, name: str | None = None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def numerical_grad(f: Callable[[], float], param: Tensor, step: float = 1e-5,
                   indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored. ``indices`` limits the
    check to a subset of flat positions; others stay zero.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(param.shape)
