"""Small reverse-mode autodiff over float64 numpy arrays.

A graph is built eagerly: every op returns a :class:`Node` holding its value
and, when any input needs a gradient, closures that map the output gradient
back to each parent. ``backward`` walks the graph in reverse topological order.
The tape lives only as long as the nodes do, so a fresh graph is built per batch.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, TrainingAborted

__all__ = [
    "Node", "param", "const", "backward",
    "matmul", "add", "sub", "mul", "neg", "scale", "relu", "tanh", "sigmoid",
    "softmax", "log_softmax", "logsumexp", "log", "exp", "square", "abs_",
    "sqrt", "sum_", "mean", "concat", "l1_distance", "sq_euclidean",
    "euclidean", "cross_entropy", "Adam",
]


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name=None):
    """Leaf that receives a gradient."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value):
    return Node(value)


def _as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _make(value, pairs):
    """Build an output node, keeping only the parents that need gradients."""
    live = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    return Node(value, live, bool(live))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# --- linear algebra / elementwise binary ---------------------------------

def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T

    def grad_b(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g) if bv.ndim == 2 else g * av
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _make(out, ((a, grad_a), (b, grad_b)))


def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    ))


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    ))


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ))


def neg(a):
    return _make(-a.value, ((a, lambda g: -g),))


def scale(a, c):
    """Multiply by a python/numpy scalar constant."""
    c = float(c)
    return _make(a.value * c, ((a, lambda g: g * c),))


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = ", ".join(str(n.shape) for n in nodes)
        raise DimensionError(f"concat: shapes {shapes} do not conform") from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    pairs = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        def grad(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        pairs.append((n, grad))
    return _make(out, pairs)


# --- elementwise unary ------------------------------------------------------

def relu(a):
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def tanh(a):
    t = np.tanh(a.value)
    return _make(t, ((a, lambda g: g * (1.0 - t * t)),))


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(s, ((a, lambda g: g * s * (1.0 - s)),))


def log(a):
    v = a.value
    return _make(np.log(v), ((a, lambda g: g / v),))


def exp(a):
    e = np.exp(a.value)
    return _make(e, ((a, lambda g: g * e),))


def square(a):
    v = a.value
    return _make(v * v, ((a, lambda g: 2.0 * g * v),))


def abs_(a):
    v = a.value
    return _make(np.abs(v), ((a, lambda g: g * np.sign(v)),))


def sqrt(a):
    r = np.sqrt(a.value)
    return _make(r, ((a, lambda g: np.divide(0.5 * g, r, out=np.zeros_like(r), where=r > 0)),))


# --- reductions -------------------------------------------------------------

def sum_(a, axis=None):
    v = a.value
    out = v.sum(axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, v.shape).copy()

    return _make(out, ((a, grad),))


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def logsumexp(a, axis=-1):
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return _make(out, ((a, lambda g: np.expand_dims(g, axis) * soft),))


def softmax(a, axis=-1):
    v = a.value
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return p * (g - (g * p).sum(axis=axis, keepdims=True))

    return _make(p, ((a, grad),))


def log_softmax(a, axis=-1):
    v = a.value
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, ((a, lambda g: g - p * g.sum(axis=axis, keepdims=True)),))


# --- distances and losses ---------------------------------------------------

def _pair_check(op, u, v):
    if u.shape != v.shape:
        raise DimensionError(f"{op}: shapes {u.shape} and {v.shape} do not conform")


def l1_distance(u, v):
    """Sum of absolute differences over the last axis."""
    u, v = _as_node(u), _as_node(v)
    _pair_check("l1_distance", u, v)
    return sum_(abs_(sub(u, v)), axis=-1)


def sq_euclidean(u, v):
    u, v = _as_node(u), _as_node(v)
    _pair_check("sq_euclidean", u, v)
    return sum_(square(sub(u, v)), axis=-1)


def euclidean(u, v):
    """Row-wise Euclidean distance; the subgradient at a zero distance is 0."""
    u, v = _as_node(u), _as_node(v)
    _pair_check("euclidean", u, v)
    diff = u.value - v.value
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
    return _make(dist, (
        (u, lambda g: np.expand_dims(g, -1) * unit),
        (v, lambda g: -np.expand_dims(g, -1) * unit),
    ))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` under row ``logits``."""
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value if logits.value.ndim == 2 else logits.value[None, :]
    labels = labels.reshape(-1)
    if lv.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} and labels {labels.shape} do not conform")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = lv.shape[0]
    rows = np.arange(n)
    out = -logp[rows, labels].mean()

    def grad(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g / n * d).reshape(logits.shape)

    return _make(out, ((logits, grad),))


# --- backward ---------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, fn in node.parents:
            contrib = fn(g)
            key = id(parent)
            grads[key] = contrib if key not in grads else grads[key] + contrib


# --- optimizer --------------------------------------------------------------

class Adam:
    """Adam over a list of leaf nodes; moments are kept per parameter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(f"non-finite gradient for parameter {p.name!r} "
                                      f"at Adam step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
