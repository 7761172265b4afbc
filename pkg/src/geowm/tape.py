"""Reverse-mode automatic differentiation over a small numpy operator set.

The operator set is exactly what the transformer branches need: elementwise
arithmetic with broadcasting, matmul, reshape/swap/slice/concat, reductions,
last-axis layer normalization and softmax, tanh/GELU nonlinearities, and an
embedding gather.  Everything runs in float64.

Graphs are ephemeral: an op returns a :class:`Node` only when at least one
argument is a Node that requires grad, so code written against this module
runs as plain numpy when fed plain arrays (the inference path) and builds a
graph when fed :func:`leaf` parameters (the training path).  The two paths
execute identical arithmetic.

``stop_gradient`` returns a plain array, cutting the graph; it is how the
joint-objective harness severs the geometry branch's influence on the
backbone.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

_GELU_C = float(np.sqrt(2.0 / np.pi))


class Node:
    """Value in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    # Arithmetic sugar; every dunder routes through the module ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division only by plain scalars/arrays")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def leaf(data) -> Node:
    """Wrap a parameter array as a graph leaf that accumulates gradient."""
    return Node(data, requires_grad=True)


def value(x) -> np.ndarray:
    """Underlying array of a Node or array-like."""
    return x.data if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def stop_gradient(x) -> np.ndarray:
    """Detach: the value flows on, the gradient does not."""
    return value(x).copy()


def _tracked(*xs):
    return any(isinstance(x, Node) and x.requires_grad for x in xs)


def _node_parents(*xs):
    return tuple(x for x in xs if isinstance(x, Node) and x.requires_grad)


def _accum(node: Node, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not np.all(np.isfinite(root.data)):
        raise NumericalError("loss is non-finite")

    # Iterative topological order over Node parents.
    order = []
    seen = set()
    stack = [(root, False)]
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
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Operators


def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    if not _tracked(a, b):
        return out

    def back(g):
        if isinstance(a, Node) and a.requires_grad:
            _accum(a, _unbroadcast(g, va.shape))
        if isinstance(b, Node) and b.requires_grad:
            _accum(b, _unbroadcast(g, vb.shape))

    return Node(out, True, _node_parents(a, b), back)


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    if not _tracked(a, b):
        return out

    def back(g):
        if isinstance(a, Node) and a.requires_grad:
            _accum(a, _unbroadcast(g, va.shape))
        if isinstance(b, Node) and b.requires_grad:
            _accum(b, _unbroadcast(-g, vb.shape))

    return Node(out, True, _node_parents(a, b), back)


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    if not _tracked(a, b):
        return out

    def back(g):
        if isinstance(a, Node) and a.requires_grad:
            _accum(a, _unbroadcast(g * vb, va.shape))
        if isinstance(b, Node) and b.requires_grad:
            _accum(b, _unbroadcast(g * va, vb.shape))

    return Node(out, True, _node_parents(a, b), back)


def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb
    if not _tracked(a, b):
        return out

    def back(g):
        if isinstance(a, Node) and a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape))
        if isinstance(b, Node) and b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape))

    return Node(out, True, _node_parents(a, b), back)


def reshape(x, shape):
    vx = value(x)
    out = vx.reshape(shape)
    if not _tracked(x):
        return out

    def back(g):
        _accum(x, g.reshape(vx.shape))

    return Node(out, True, (x,), back)


def swapaxes(x, a, b):
    vx = value(x)
    out = np.swapaxes(vx, a, b)
    if not _tracked(x):
        return out

    def back(g):
        _accum(x, np.swapaxes(g, a, b))

    return Node(out, True, (x,), back)


def take(x, idx):
    """Basic/advanced indexing with scatter-add backward."""
    vx = value(x)
    out = vx[idx]
    if not _tracked(x):
        return out

    def back(g):
        z = np.zeros_like(vx)
        np.add.at(z, idx, g)
        _accum(x, z)

    return Node(out, True, (x,), back)


def concat(xs, axis):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if isinstance(x, Node) and x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(x, g[tuple(sl)])

    return Node(out, True, _node_parents(*xs), back)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    vx = value(x)
    out = vx.sum(axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return out
    axes = _axis_tuple(axis, vx.ndim)

    def back(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        _accum(x, np.broadcast_to(g, vx.shape).copy())

    return Node(out, True, (x,), back)


def mean(x, axis=None, keepdims=False):
    vx = value(x)
    axes = _axis_tuple(axis, vx.ndim)
    count = float(np.prod([vx.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def layer_norm(x, eps: float = 1e-6):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    vx = value(x)
    mu = vx.mean(axis=-1, keepdims=True)
    xm = vx - mu
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    if not _tracked(x):
        return xhat

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gxm))

    return Node(xhat, True, (x,), back)


def softmax(x):
    """Softmax over the last axis."""
    vx = value(x)
    shifted = vx - vx.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    if not _tracked(x):
        return y

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return Node(y, True, (x,), back)


def tanh(x):
    vx = value(x)
    y = np.tanh(vx)
    if not _tracked(x):
        return y

    def back(g):
        _accum(x, g * (1.0 - y * y))

    return Node(y, True, (x,), back)


def gelu(x):
    """Tanh-approximate GELU."""
    vx = value(x)
    u = _GELU_C * (vx + 0.044715 * vx**3)
    th = np.tanh(u)
    y = 0.5 * vx * (1.0 + th)
    if not _tracked(x):
        return y

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * vx * vx)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * vx * (1.0 - th * th) * du))

    return Node(y, True, (x,), back)


def embedding(table, ids):
    """Row gather from a parameter matrix; ids is an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    vt = value(table)
    out = vt[ids]
    if not _tracked(table):
        return out

    def back(g):
        z = np.zeros_like(vt)
        np.add.at(z, ids, g)
        _accum(table, z)

    return Node(out, True, (table,), back)


def mse(a, b):
    """Mean over all elements of the squared difference."""
    d = sub(a, b)
    return mean(mul(d, d))
