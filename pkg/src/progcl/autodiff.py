"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the encoders and contrastive objectives need are
provided.  Every op records its parents and a closure that maps the output
gradient to parent gradients; :func:`backward` walks the tape in reverse
topological order and then frees it.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# running count of zero-norm rows mapped to zero by l2_normalize
diagnostics = {"zero_norm_rows": 0}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    """Dense matmul; ``a`` may also be a constant scipy sparse matrix."""
    if sp.issparse(a):
        m = a
        b = as_tensor(b)
        return _result(np.asarray(m @ b.data), (b,), lambda g: (np.asarray(m.T @ g),))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, idx) -> Tensor:
    """Row/element gather ``a[idx]``; repeated indices accumulate gradients."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _result(out, (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    d = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * d, (a,), lambda g: (g * d,))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def prelu(a: Tensor, weight: Tensor) -> Tensor:
    """Parametric ReLU with one learned slope per channel (or a single slope)."""
    pos = a.data > 0
    w = weight.data

    def bw(g):
        ga = g * np.where(pos, 1.0, w)
        gw = _unbroadcast(np.where(pos, 0.0, g * a.data), weight.shape)
        return ga, gw
    return _result(np.where(pos, a.data, w * a.data), (a, weight), bw)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    d = np.where(pos, 1.0, neg_part + alpha)
    return _result(out, (a,), lambda g: (g * d,))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit normalisation; rows with norm below ``eps`` map to zero."""
    norms = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    zero = norms < eps
    if zero.any():
        diagnostics["zero_norm_rows"] += int(zero.sum())
    safe = np.where(zero, 1.0, norms)
    out = np.where(zero, 0.0, a.data / safe)

    def bw(g):
        proj = g - out * np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(zero, 0.0, proj / safe),)
    return _result(out, (a,), bw)


def _released(g):
    raise RuntimeError("tape already released by an earlier backward()")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients are reset before accumulation, so gradients never carry
    over between calls.  The tape is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    if loss._backward is _released:
        raise RuntimeError("tape already released by an earlier backward()")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    for node in order:
        if not node._parents:
            node.grad = np.zeros_like(node.data)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = _released
