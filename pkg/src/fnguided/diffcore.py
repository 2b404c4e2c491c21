"""Minimal reverse-mode differentiation over dense float64 arrays.

Nodes are evaluated eagerly when they are built; :func:`eval_graph` replays
the recorded forward functions from the leaves without touching the stored
values, so re-evaluation is pure. Gradients are accumulated by
:func:`backpropagate` and stored on ``Node.grad``.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12

OP_KINDS = (
    "constant", "parameter", "add", "sub", "mul", "div", "matmul", "relu",
    "tanh", "sigmoid", "log", "exp", "power", "reduce_sum", "reduce_mean",
    "broadcast", "concat", "slice", "softmax_over_axis", "reshape",
    "transpose", "clip", "neg", "linear", "custom",
)


class DiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(DiffError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


class Node:
    """A value in the computation graph.

    ``forward`` recomputes the value from the parents' values and
    ``backward`` maps the upstream gradient to one gradient per parent.
    """

    __slots__ = ("op_kind", "parents", "value", "grad", "forward",
                 "backward", "requires_grad", "name")

    def __init__(self, op_kind, value, parents=(), forward=None, backward=None,
                 name=None):
        self.op_kind = op_kind
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self.forward = forward
        self.backward = backward
        self.name = name
        self.requires_grad = op_kind == "parameter" or any(
            p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op_kind}{label}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def constant(value, name=None):
    return Node("constant", _as_array(value), name=name)


def parameter(value, name=None):
    return Node("parameter", np.array(value, dtype=np.float64), name=name)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        lead = grad.shape[:extra]
        # summing leading axes as a GEMV with ones is much faster than .sum
        flat = grad.reshape(int(np.prod(lead, dtype=np.int64)), -1)
        grad = (np.ones(flat.shape[0]) @ flat).reshape(grad.shape[extra:])
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot broadcast shapes {shapes}") from exc


# --- elementwise binary -------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g, va, vb):
        return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)

    return Node("add", a.value + b.value, (a, b), np.add, backward)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g, va, vb):
        return _unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)

    return Node("sub", a.value - b.value, (a, b), np.subtract, backward)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g, va, vb):
        ga = _unbroadcast(g * vb, va.shape) if a.requires_grad else None
        gb = _unbroadcast(g * va, vb.shape) if b.requires_grad else None
        return ga, gb

    return Node("mul", a.value * b.value, (a, b), np.multiply, backward)


def div(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g, va, vb):
        ga = _unbroadcast(g / vb, va.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * va / (vb * vb), vb.shape)
              if b.requires_grad else None)
        return ga, gb

    return Node("div", a.value / b.value, (a, b), np.divide, backward)


def neg(a):
    a = as_node(a)
    return Node("neg", -a.value, (a,), np.negative, lambda g, va: (-g,))


def _mm(x, y):
    # (..., n, k) @ (k, m) as one 2-D GEMM
    if x.ndim > 2 and y.ndim == 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    return np.matmul(x, y)


def matmul(a, b):
    """Matrix product with numpy batching semantics (ndim >= 2 on both)."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul of {a.shape} and {b.shape}")

    def backward(g, va, vb):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(vb, -1, -2)), va.shape)
        if b.requires_grad:
            if va.ndim > 2 and vb.ndim == 2:
                gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(va, -1, -2), g), vb.shape)
        return ga, gb

    return Node("matmul", _mm(a.value, b.value), (a, b), _mm, backward)


def linear(x, w, b):
    """``x @ w + b`` for ``x`` ``(..., k)``, ``w`` ``(k, m)`` and ``b`` ``(m,)``."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if w.value.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"linear of {x.shape}, {w.shape}, {b.shape}")

    def fwd(vx, vw, vb):
        out = _mm(vx, vw)
        out += vb
        return out

    def backward(g, vx, vw, vb):
        g2 = g.reshape(-1, g.shape[-1])
        gx = _mm(g, vw.T) if x.requires_grad else None
        gw = vx.reshape(-1, vx.shape[-1]).T @ g2 if w.requires_grad else None
        gb = np.ones(g2.shape[0]) @ g2 if b.requires_grad else None
        return gx, gw, gb

    return Node("linear", fwd(x.value, w.value, b.value), (x, w, b), fwd, backward)


# --- elementwise unary --------------------------------------------------

def relu(a):
    a = as_node(a)
    return Node("relu", np.maximum(a.value, 0.0), (a,),
                lambda va: np.maximum(va, 0.0),
                lambda g, va: (g * (va > 0),))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node("tanh", out, (a,), np.tanh,
                lambda g, va: (g * (1.0 - out * out),))


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a):
    a = as_node(a)
    out = _sigmoid(a.value)

    def backward(g, va):
        return (g * out * (1.0 - out),)

    return Node("sigmoid", out, (a,), _sigmoid, backward)


def log(a):
    """Natural log with the argument clamped to >= LOG_FLOOR."""
    a = as_node(a)

    def fwd(va):
        return np.log(np.maximum(va, LOG_FLOOR))

    def backward(g, va):
        return (np.where(va > LOG_FLOOR, g / np.maximum(va, LOG_FLOOR), 0.0),)

    return Node("log", fwd(a.value), (a,), fwd, backward)


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node("exp", out, (a,), np.exp, lambda g, va: (g * out,))


def power(a, exponent):
    a = as_node(a)
    p = float(exponent)

    def fwd(va):
        return va ** p

    def backward(g, va):
        return (g * p * va ** (p - 1.0),)

    return Node("power", fwd(a.value), (a,), fwd, backward)


def clip(a, lo, hi):
    a = as_node(a)

    def fwd(va):
        return np.clip(va, lo, hi)

    def backward(g, va):
        return (g * ((va >= lo) & (va <= hi)),)

    return Node("clip", fwd(a.value), (a,), fwd, backward)


# --- reductions and structure -------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = as_node(a)

    def fwd(va):
        return np.sum(va, axis=axis, keepdims=keepdims)

    def backward(g, va):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape),)

    return Node("reduce_sum", np.asarray(fwd(a.value)), (a,), fwd, backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_node(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def fwd(va):
        return np.mean(va, axis=axis, keepdims=keepdims)

    def backward(g, va):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, va.shape),)

    return Node("reduce_mean", np.asarray(fwd(a.value)), (a,), fwd, backward)


def broadcast(a, shape):
    a = as_node(a)
    shape = tuple(shape)
    _broadcast_shape(a.shape, shape)

    def fwd(va):
        return np.broadcast_to(va, shape)

    return Node("broadcast", fwd(a.value), (a,), fwd,
                lambda g, va: (_unbroadcast(g, va.shape),))


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    def backward(g, *vals):
        return tuple(np.split(g, splits, axis=axis))

    try:
        value = fwd(*(n.value for n in nodes))
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    return Node("concat", value, nodes, fwd, backward)


def slice_(a, index):
    a = as_node(a)

    def fwd(va):
        return va[index]

    def backward(g, va):
        out = np.zeros_like(va)
        np.add.at(out, index, g)
        return (out,)

    return Node("slice", np.asarray(fwd(a.value)), (a,), fwd, backward)


def reshape(a, shape):
    a = as_node(a)
    shape = tuple(shape)

    def fwd(va):
        return va.reshape(shape)

    return Node("reshape", fwd(a.value), (a,), fwd,
                lambda g, va: (g.reshape(va.shape),))


def transpose(a):
    """Swap the last two axes."""
    a = as_node(a)

    def fwd(va):
        return np.swapaxes(va, -1, -2)

    return Node("transpose", fwd(a.value), (a,), fwd,
                lambda g, va: (np.swapaxes(g, -1, -2),))


def _softmax(va, axis):
    z = va - va.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    """Softmax with the max subtracted along ``axis``."""
    a = as_node(a)

    def fwd(va):
        return _softmax(va, axis)

    def backward(g, va):
        s = _softmax(va, axis)
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Node("softmax_over_axis", fwd(a.value), (a,), fwd, backward)


def custom(value, parents, forward, backward, name=None):
    """Wrap a hand-written op; ``backward(g, *parent_values)`` -> tuple."""
    return Node("custom", value, [as_node(p) for p in parents], forward,
                backward, name=name)


# --- graph traversal ----------------------------------------------------

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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def eval_graph(root):
    """Recompute ``root`` from its leaves and return a fresh array.

    Stored node values are not modified. Raises :class:`NonFiniteError` on
    NaN/Inf anywhere in the graph.
    """
    values = {}
    for node in _topo_order(root):
        if not node.parents:
            val = node.value
        else:
            try:
                val = np.asarray(node.forward(*(values[id(p)] for p in node.parents)))
            except ValueError as exc:
                raise ShapeMismatchError(f"{node!r}: {exc}") from exc
        if not np.all(np.isfinite(val)):
            raise NonFiniteError(f"non-finite value at {node!r}")
        values[id(node)] = val
    return np.array(values[id(root)], copy=True)


def backpropagate(root):
    """Reverse-mode pass from a scalar ``root``.

    Returns ``{parameter_node: gradient}`` and sets ``.grad`` on every node
    that lies on a path to a parameter.
    """
    if root.value.size != 1:
        raise DiffError(f"backpropagate needs a scalar root, got shape {root.shape}")
    if not np.all(np.isfinite(root.value)):
        raise NonFiniteError("non-finite loss value")
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in order:
        node.grad = None
    result = {}
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node.op_kind == "parameter":
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {node!r}")
            result[node] = g
            continue
        if not node.parents or not node.requires_grad:
            continue
        parent_grads = node.backward(g, *(p.value for p in node.parents))
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                if key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)
            else:
                grads[key] = pg
    return result


def finite_difference_check(fn, point, epsilon=1e-5, analytic=None):
    """Max relative error between the analytic gradient and central differences.

    ``fn`` maps a parameter Node (built from ``point``) to a scalar Node. If
    ``analytic`` is given it is used instead of backpropagating through ``fn``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.array(point, dtype=np.float64)
    if analytic is None:
        p = parameter(point)
        out = fn(p)
        analytic = backpropagate(out).get(p, np.zeros_like(point))
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(np.sum(fn(constant(point.copy())).value))
        flat[i] = orig - epsilon
        f_minus = float(np.sum(fn(constant(point.copy())).value))
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
    denom = np.maximum(np.abs(analytic), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
