"""Reverse-mode differentiable tensors backed by numpy arrays.

Every op records its parents and a backward closure that maps the output
gradient to one gradient per parent. ``Tensor.backward`` replays the
recorded closures in exact reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_counter = itertools.count()


class ConfigurationError(ValueError):
    """Raised for shape or hyperparameter mismatches."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage precision (f64 is used by grad checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._order = next(_counter)
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._order = next(_counter)
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autograd -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)
        order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
        grads = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                # leaf
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            pgrads = t._backward(g)
            for p, pg in zip(t._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return total(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name", "decay_exempt")

    def __init__(self, name: str, data, decay_exempt: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay_exempt = decay_exempt

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    # np.maximum propagates NaN, unlike a masked select
    return Tensor._make(np.maximum(a.data, a.data.dtype.type(0)), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * out * (1 - out),)

    return Tensor._make(out.astype(a.dtype, copy=False), (a,), backward, "sigmoid")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    live = a.data >= floor if floor > 0 else True

    def backward(g):
        return (g * live / x,)

    return Tensor._make(np.log(x), (a,), backward, "log")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                        lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in)."""
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tuple(tensors), backward, "concat")


def take_channels(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select channels ``index`` (axis 1) of an NCHW tensor."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape
    contiguous = idx.size > 0 and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size))
    sel = slice(int(idx[0]), int(idx[0]) + idx.size) if contiguous else idx

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if contiguous:
            full[:, sel] = g
        else:
            np.add.at(full, (slice(None), idx), g)
        return (full,)

    return Tensor._make(a.data[:, sel], (a,), backward, "take_channels")


def check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values produced by {where}")
