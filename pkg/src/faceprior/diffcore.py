"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every operation on tensors that need
gradients records its parents and a closure mapping the output adjoint to
parent adjoints. The tape is implicit in those references and is rebuilt every
time the forward code runs, so there is nothing to invalidate between steps.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> y = x * x
    >>> backward(y, [x])[0]
    array(6.)
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "tensor", "backward", "grad", "gradcheck",
    "no_grad", "set_check_finite", "set_dtype", "get_dtype",
    "exp", "expm1", "log", "sqrt", "abs", "relu", "softplus", "sigmoid",
    "sin", "cos", "square", "sum", "mean", "reshape", "transpose",
    "concat", "stack", "cumsum", "take_along_axis", "where", "maximum0",
    "stop_gradient", "normalize", "matmul", "dot", "broadcast_to",
]

NORM_EPS = 1e-12

_state = {"grad_enabled": True, "check_finite": True, "dtype": np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def set_check_finite(flag: bool) -> None:
    _state["check_finite"] = bool(flag)


def set_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype.type


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.data!r}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    # a sum is non-finite whenever any entry is; overflow falls through to the full test
    if _state["check_finite"] and not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _lift(a)
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def expm1(a) -> Tensor:
    a = _lift(a)
    out = np.expm1(a.data)
    return _make(out, (a,), lambda g: (g * (out + 1.0),), "expm1")


def log(a) -> Tensor:
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs(a) -> Tensor:  # noqa: A001
    a = _lift(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def maximum0(a) -> Tensor:
    """``max(0, a)``; alias of relu kept for readability in loss code."""
    return relu(a)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def sin(a) -> Tensor:
    a = _lift(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = _lift(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


def stop_gradient(a) -> Tensor:
    return Tensor(_lift(a).data)


# ------------------------------------------------------------------ reductions

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(out).size, 1)
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,), "mean")


def cumsum(a, axis: int = -1) -> Tensor:
    a = _lift(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


# --------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    return _make(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out), (a,), bw, "getitem")


def take_along_axis(a, indices: np.ndarray, axis: int) -> Tensor:
    a = _lift(a)
    indices = np.asarray(indices)

    def bw(g):
        full = np.zeros_like(a.data)
        ax = axis % a.ndim
        # scatter-add along the gather axis
        idx = list(np.indices(indices.shape, sparse=True))
        idx[ax] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)
    return _make(np.take_along_axis(a.data, indices, axis), (a,), bw, "take_along_axis")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _make(out, tuple(ts), bw, "stack")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ValueError(f"matmul needs a 2-D+ left operand, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        # one large GEMM instead of a batch of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ b.data.T).reshape(a.shape),
                    a.data.reshape(-1, a.shape[-1]).T @ g2)
        if b.ndim == 1:
            return np.multiply.outer(g, b.data), np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb
    return _make(out, (a, b), bw, "matmul")


def dot(a, b, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sum(mul(a, b), axis=axis, keepdims=keepdims)


def normalize(a, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale to unit norm along ``axis``; the norm is floored at ``eps``."""
    a = _lift(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    out = a.data / n
    active = n > eps

    def bw(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(active, (g - out * proj) / n, g / n),)
    return _make(out, (a,), bw, "normalize")


# ------------------------------------------------------------------ gradients

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor, inputs: Iterable[Tensor], seed=None) -> list:
    """Return ``d output / d input`` for every tensor in ``inputs``.

    ``output`` must be scalar unless an explicit adjoint ``seed`` is given.
    Inputs that the output does not depend on get zero gradients.
    """
    inputs = list(inputs)
    if not isinstance(output, Tensor):
        raise TypeError("output must be a Tensor")
    if seed is None:
        if output.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        seed = np.ones_like(output.data)
    adj = {id(output): np.asarray(seed, dtype=output.data.dtype)}
    if output.requires_grad:
        for node in reversed(_toposort(output)):
            g = adj.get(id(node))
            if g is None or node._backward is None:
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = adj.get(id(p))
                adj[id(p)] = gp if prev is None else prev + gp
    grads = []
    for x in inputs:
        g = adj.get(id(x))
        grads.append(np.zeros_like(x.data) if g is None else np.array(np.broadcast_to(g, x.shape)))
    return grads


def grad(f: Callable, *args):
    """Evaluate ``f(*args)`` and return ``(value, [grad per arg])``."""
    xs = [Tensor(a, requires_grad=True) for a in args]
    out = f(*xs)
    return out.data, backward(out, xs)


def gradcheck(f: Callable, x, step: float = 1e-5, floor: float = 1e-6,
              indices: Sequence[int] | None = None) -> float:
    """Worst component-wise relative error of ``backward`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor. Components where both the analytic
    and numeric derivatives are below ``floor`` are compared against ``floor``
    rather than their own magnitude. ``indices`` restricts the check to a subset
    of flat components.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    analytic = backward(f(xt), [xt])[0].ravel()
    flat = x0.ravel()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        with no_grad():
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
            fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        num = (fp - fm) / (2 * step)
        if not np.isfinite(num):
            raise NonFiniteError(f"finite-difference estimate is not finite at component {i}")
        denom = max(np.abs(analytic[i]), np.abs(num), floor)
        worst = max(worst, float(np.abs(analytic[i] - num) / denom))
    return worst
