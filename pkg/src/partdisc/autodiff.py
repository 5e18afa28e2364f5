"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for the training objectives: elementwise arithmetic with
broadcasting, matmul, reductions, exp/log/tanh/relu, slicing and concat.
Gradients are exact; finite differences are used only as a test oracle.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, (self, other))
        out.backward_fn = lambda g: (
            _unbroadcast(g, self.shape),
            _unbroadcast(g, other.shape),
        )
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,))
        out.backward_fn = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, (self, other))
        out.backward_fn = lambda g: (
            _unbroadcast(g * other.value, self.shape),
            _unbroadcast(g * self.value, other.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, (self, other))
        out.backward_fn = lambda g: (
            _unbroadcast(g / other.value, self.shape),
            _unbroadcast(-g * self.value / other.value**2, other.shape),
        )
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value @ other.value, (self, other))

        def back(g):
            a, b = self.value, other.value
            if a.ndim == 1 and b.ndim == 1:
                return (g * b, g * a)
            if a.ndim == 1:
                return (g @ b.T, np.outer(a, g))
            if b.ndim == 1:
                return (np.outer(g, b), a.T @ g)
            return (g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g)

        out.backward_fn = back
        return out

    def __pow__(self, p: float):
        out = Tensor(self.value**p, (self,))
        out.backward_fn = lambda g: (g * p * self.value ** (p - 1),)
        return out

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], (self,))

        def back(g):
            full = np.zeros_like(self.value)
            np.add.at(full, idx, g)
            return (full,)

        out.backward_fn = back
        return out

    # -- elementwise functions -------------------------------------------

    def exp(self):
        v = np.exp(self.value)
        out = Tensor(v, (self,))
        out.backward_fn = lambda g: (g * v,)
        return out

    def log(self):
        out = Tensor(np.log(self.value), (self,))
        out.backward_fn = lambda g: (g / self.value,)
        return out

    def tanh(self):
        v = np.tanh(self.value)
        out = Tensor(v, (self,))
        out.backward_fn = lambda g: (g * (1 - v * v),)
        return out

    def relu(self):
        mask = self.value > 0
        out = Tensor(self.value * mask, (self,))
        out.backward_fn = lambda g: (g * mask,)
        return out

    def sqrt(self):
        return self**0.5

    # -- reductions / shape ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,))

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        out.backward_fn = back
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def max(self, axis=None, keepdims=False):
        v = self.value.max(axis=axis, keepdims=keepdims)
        out = Tensor(v, (self,))

        def back(g):
            g = np.asarray(g)
            vk = self.value.max(axis=axis, keepdims=True)
            mask = self.value == vk
            mask = mask / mask.sum(axis=axis, keepdims=True)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (mask * g,)

        out.backward_fn = back
        return out

    @property
    def T(self):
        out = Tensor(self.value.T, (self,))
        out.backward_fn = lambda g: (g.T,)
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), (self,))
        out.backward_fn = lambda g: (g.reshape(self.shape),)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: list[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out.backward_fn = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stack(tensors: list[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.value for t in tensors], axis=axis), tuple(tensors))
    out.backward_fn = lambda g: tuple(np.moveaxis(g, axis, 0))
    return out


def logsumexp_rows(t: Tensor) -> Tensor:
    m = t.detach().max(axis=-1, keepdims=True)
    return (t - m).exp().sum(axis=-1, keepdims=True).log() + m


def softmax_rows(t: Tensor) -> Tensor:
    return (t - logsumexp_rows(t)).exp()


def l2_normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((t * t).sum(axis=-1, keepdims=True) + eps**2) ** 0.5
    return t / norm


def l2_normalize_cols(t: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((t * t).sum(axis=0, keepdims=True) + eps**2) ** 0.5
    return t / norm


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor."""
    if loss.value.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    order = []
    seen = set()

    def visit(t):
        stack_ = [(t, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                stack_.append((p, False))

    visit(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.value)
    for t in reversed(order):
        if t.backward_fn is None or t.grad is None:
            continue
        for parent, g in zip(t.parents, t.backward_fn(t.grad)):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g
