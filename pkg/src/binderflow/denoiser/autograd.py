"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the toy networks need are provided. Broadcasting is
supported for elementwise ops; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # elementwise arithmetic

    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other ** -1.0

    def __pow__(self, p: float):
        def back(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor(self.data**p, (self,), back)

    # reductions and shape ops

    def sum(self, axis=None, keepdims=False):
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), (self,), lambda g: self._accum(g.reshape(self.shape)))

    def broadcast_to(self, shape):
        return Tensor(
            np.broadcast_to(self.data, shape), (self,), lambda g: self._accum(_unbroadcast(g, self.shape))
        )

    def __getitem__(self, idx):
        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        return Tensor(self.data[idx], (self,), back)

    # nonlinearities

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor(y, (self,), lambda g: self._accum(g * (1.0 - y * y)))

    def exp(self):
        y = np.exp(self.data)
        return Tensor(y, (self,), lambda g: self._accum(g * y))

    def silu(self):
        s = expit(self.data)
        y = self.data * s
        return Tensor(y, (self,), lambda g: self._accum(g * (s + y * (1.0 - s))))

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse
        soft = np.exp(y)

        def back(g):
            self._accum(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor(y, (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` for ``x`` of shape (..., f) and 2-D ``w``."""
    x, w = as_tensor(x), as_tensor(w)

    def back(g):
        x._accum(g @ w.data.T)
        w._accum(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    out = Tensor(x.data @ w.data, (x, w), back)
    return out if b is None else out + b


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, cuts, axis=axis)):
            t._accum(part)

    return Tensor(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)
