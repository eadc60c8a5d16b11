"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for the token model: a `Tensor` wraps an ndarray and
remembers how it was produced; `backward` walks the tape once in reverse
topological order. Only leaves created with ``needs=True`` accumulate
gradients, and subgraphs that cannot reach such a leaf are never traversed.
All ops preserve the dtype of their inputs, so the same graph code runs in
float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

# python floats: numpy's weak promotion keeps float32 tapes in float32
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    __slots__ = ("data", "grad", "needs", "_parents", "_bw")

    def __init__(self, data, needs=False, _parents=(), _bw=None):
        self.data = data
        self.grad = None
        self.needs = needs
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, needs={self.needs})"


def leaf(data, needs=False):
    """Wrap an ndarray as a tape leaf."""
    return Tensor(np.asarray(data), needs=needs)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _acc(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(grad, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    needs = a.needs or b.needs

    def bw(g):
        if a.needs:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs:
            _acc(b, _unbroadcast(g, b.data.shape))

    return Tensor(a.data + b.data, needs, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    needs = a.needs or b.needs

    def bw(g):
        if a.needs:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return Tensor(a.data - b.data, needs, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    needs = a.needs or b.needs

    def bw(g):
        if a.needs:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(a.data * b.data, needs, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    needs = a.needs or b.needs
    out = a.data / b.data

    def bw(g):
        if a.needs:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.needs:
            _acc(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return Tensor(out, needs, (a, b), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    needs = a.needs or b.needs

    def bw(g):
        if a.needs:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.needs:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor(a.data @ b.data, needs, (a, b), bw)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        if a.needs:
            _acc(a, g * out)

    return Tensor(out, a.needs, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        if a.needs:
            _acc(a, g * (0.5 / out))

    return Tensor(out, a.needs, (a,), bw)


def clip(a, lo, hi):
    """Clamp; gradient passes through where the input is within bounds."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        if a.needs:
            _acc(a, g * mask)

    return Tensor(np.clip(a.data, lo, hi), a.needs, (a,), bw)


def gelu(a):
    """Error-function GELU with its exact derivative.

    Fused in-place passes: these arrays are the biggest in the model and
    elementwise traffic here is a measurable share of a training step.
    """
    a = _as_tensor(a)
    cdf = erf(a.data * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = a.data * cdf

    def bw(g):
        if a.needs:
            pdf = a.data * a.data
            pdf *= -0.5
            np.exp(pdf, out=pdf)
            pdf *= _INV_SQRT2PI
            pdf *= a.data
            pdf += cdf
            pdf *= g
            _acc(a, pdf)

    return Tensor(out, a.needs, (a,), bw)


def sumax(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def bw(g):
        if not a.needs:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.needs, (a,), bw)


def meanax(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def bw(g):
        if not a.needs:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return Tensor(a.data.mean(axis=axis, keepdims=keepdims), a.needs, (a,), bw)


def maxax(a, axis):
    """Max over one axis; gradient goes to the first argmax (ties broken low)."""
    a = _as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        if a.needs:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            _acc(a, full)

    return Tensor(out, a.needs, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)

    def bw(g):
        if a.needs:
            _acc(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), a.needs, (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        if a.needs:
            _acc(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), a.needs, (a,), bw)


def _topo(root):
    """Post-order over the needs-grad subgraph, iteratively (deep tapes)."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.needs and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root):
    """Accumulate gradients of `root` (a scalar tensor) into tape leaves."""
    if not root.needs:
        raise ValueError("backward() root does not depend on any gradient leaf")
    root.grad = np.ones_like(root.data)
    for node in reversed(_topo(root)):
        if node._bw is not None:
            node._bw(node.grad)
