"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Only the operations the surrogate needs are provided.  Broadcasting follows
numpy; gradients are summed back to each operand's shape.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # -- graph plumbing

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        # iterative DFS would be needed for very deep graphs; ours are shallow
        visit(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._accum(g)
            other._accum(g)
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._accum(g * other.data)
            other._accum(g * self.data)
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def bw(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / other.data**2)
        out._backward = bw
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(np.matmul(self.data, other.data), (self, other))

        def bw(g):
            a, b = self.data, other.data
            if b.ndim == 1:
                self._accum(np.multiply.outer(g, b))
                other._accum(np.tensordot(g, a, axes=(list(range(g.ndim)), list(range(g.ndim)))))
                return
            self._accum(np.matmul(g, np.swapaxes(b, -1, -2)))
            other._accum(np.matmul(np.swapaxes(a, -1, -2), g))
        out._backward = bw
        return out

    def __pow__(self, k):
        k = float(k)
        out = Tensor(self.data**k, (self,))
        out._backward = lambda g: self._accum(g * k * self.data ** (k - 1))
        return out

    # -- reductions and reshaping

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def swapaxes(self, a, b):
        out = Tensor(np.swapaxes(self.data, a, b), (self,))
        out._backward = lambda g: self._accum(np.swapaxes(g, a, b))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)
        out._backward = bw
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=float), requires_grad=True)


def _unary(x: Tensor, value, deriv) -> Tensor:
    out = Tensor(value, (x,))
    out._backward = lambda g: x._accum(g * deriv())
    return out


def exp(x: Tensor) -> Tensor:
    v = np.exp(x.data)
    return _unary(x, v, lambda: v)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _unary(x, s, lambda: s * (1.0 - s))


def softplus(x: Tensor) -> Tensor:
    return _unary(x, np.logaddexp(0.0, x.data), lambda: _sigmoid(x.data))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _unary(x, x.data * s, lambda: s * (1.0 + x.data * (1.0 - s)))


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (x,))

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))
    out._backward = bw
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(piece)
    out._backward = bw
    return out
