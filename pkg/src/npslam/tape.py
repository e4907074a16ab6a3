"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is built define-by-run: every operation records a node holding the
forward value and a closure that routes the adjoint to its parents. A tape is
implicit (the node graph itself) and is rebuilt for every optimization
iteration, so dynamic shapes (variable neighbor counts, per-frame batches)
need no special casing. Gradients accumulate into `Parameter` leaves, which
persist across iterations and are what the optimizer updates.
"""

from __future__ import annotations

import numpy as np

# Default element type. 32-bit can be selected at build time for speed; the
# gradient checks in the test suite require the 64-bit default.
DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    DEFAULT_DTYPE = np.dtype(dtype).type


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "_backward", "grad", "op")

    def __init__(self, value, parents=(), backward=None, op=""):
        self.value = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.parents = parents
        self._backward = backward
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            if np.shape(g) == self.value.shape:
                self.grad = np.array(g)  # copy: caller may reuse the buffer
            else:
                self.grad = np.zeros_like(self.value)
                self.grad += g
        else:
            self.grad += g

    # operator sugar -------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Node(op={self.op or 'leaf'}, shape={self.value.shape})"


class Parameter(Node):
    """Trainable leaf. Its gradient buffer persists between graph builds."""

    __slots__ = ("trainable", "name")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(np.array(value, dtype=DEFAULT_DTYPE), op="param")
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def _accumulate(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g

    def append_rows(self, rows: np.ndarray) -> None:
        """Grow a (N, d) parameter by stacking new rows (new point features)."""
        rows = np.asarray(rows, dtype=self.value.dtype)
        self.value = np.concatenate([self.value, rows], axis=0)
        self.grad = np.concatenate([self.grad, np.zeros_like(rows)], axis=0)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


def as_node(x) -> Node:
    """Wrap plain arrays/scalars as constant leaves."""
    if isinstance(x, Node):
        return x
    return Node(x, op="const")


def constant(x) -> Node:
    return as_node(x)


def _values(*xs):
    return tuple(x.value for x in xs)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape("add", a.value, b.value)
    out = Node(a.value + b.value, (a, b), op="add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.value.shape))
        b._accumulate(_unbroadcast(g, b.value.shape))

    out._backward = backward
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape("sub", a.value, b.value)
    out = Node(a.value - b.value, (a, b), op="sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.value.shape))
        b._accumulate(_unbroadcast(-g, b.value.shape))

    out._backward = backward
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape("mul", a.value, b.value)
    out = Node(a.value * b.value, (a, b), op="mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backward = backward
    return out


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape("div", a.value, b.value)
    out = Node(a.value / b.value, (a, b), op="div")

    def backward(g):
        a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = backward
    return out


def neg(a) -> Node:
    a = as_node(a)
    out = Node(-a.value, (a,), op="neg")
    out._backward = lambda g: a._accumulate(-g)
    return out


def square(a) -> Node:
    a = as_node(a)
    out = Node(a.value * a.value, (a,), op="square")
    out._backward = lambda g: a._accumulate(2.0 * a.value * g)
    return out


def sqrt(a) -> Node:
    a = as_node(a)
    val = np.sqrt(a.value)
    out = Node(val, (a,), op="sqrt")
    out._backward = lambda g: a._accumulate(g / (2.0 * val))
    return out


def absolute(a) -> Node:
    a = as_node(a)
    out = Node(np.abs(a.value), (a,), op="abs")
    out._backward = lambda g: a._accumulate(g * np.sign(a.value))
    return out


def exp(a) -> Node:
    a = as_node(a)
    val = np.exp(a.value)
    out = Node(val, (a,), op="exp")
    out._backward = lambda g: a._accumulate(g * val)
    return out


def log(a) -> Node:
    a = as_node(a)
    out = Node(np.log(a.value), (a,), op="log")
    out._backward = lambda g: a._accumulate(g / a.value)
    return out


def sin(a) -> Node:
    a = as_node(a)
    out = Node(np.sin(a.value), (a,), op="sin")
    out._backward = lambda g: a._accumulate(g * np.cos(a.value))
    return out


def cos(a) -> Node:
    a = as_node(a)
    out = Node(np.cos(a.value), (a,), op="cos")
    out._backward = lambda g: a._accumulate(-g * np.sin(a.value))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: exp(-|x|) never overflows.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Node:
    a = as_node(a)
    val = _sigmoid(a.value)
    out = Node(val, (a,), op="sigmoid")
    out._backward = lambda g: a._accumulate(g * val * (1.0 - val))
    return out


def softplus(a) -> Node:
    a = as_node(a)
    # max(x,0) + log1p(exp(-|x|)) is the stable form of log(1+exp(x)).
    val = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    out = Node(val, (a,), op="softplus")
    out._backward = lambda g: a._accumulate(g * _sigmoid(a.value))
    return out


def power(a, exponent: float) -> Node:
    a = as_node(a)
    out = Node(a.value ** exponent, (a,), op="pow")
    out._backward = lambda g: a._accumulate(g * exponent * a.value ** (exponent - 1.0))
    return out


def clamp(a, lo: float, hi: float) -> Node:
    """Clip with pass-through gradient inside [lo, hi], zero outside."""
    a = as_node(a)
    val = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    out = Node(val, (a,), op="clamp")
    out._backward = lambda g: a._accumulate(g * inside)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    out._backward = backward
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Node:
    a = as_node(a)
    out = Node(a.value.reshape(shape), (a,), op="reshape")
    out._backward = lambda g: a._accumulate(g.reshape(a.value.shape))
    return out


def transpose(a) -> Node:
    a = as_node(a)
    out = Node(a.value.T, (a,), op="transpose")
    out._backward = lambda g: a._accumulate(g.T)
    return out


def getitem(a, key) -> Node:
    a = as_node(a)
    out = Node(a.value[key], (a,), op="getitem")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        a._accumulate(full)

    out._backward = backward
    return out


def concat(nodes, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    out = Node(np.concatenate(vals, axis=axis), tuple(nodes), op="concat")
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            n._accumulate(piece)

    out._backward = backward
    return out


def stack(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = Node(np.stack([n.value for n in nodes], axis=axis), tuple(nodes), op="stack")

    def backward(g):
        for i, n in enumerate(nodes):
            n._accumulate(np.take(g, i, axis=axis))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra and indexing


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: expects 1-D/2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} and {bv.shape}")
    out = Node(av @ bv, (a, b), op="matmul")

    def backward(g):
        g = np.asarray(g)
        if av.ndim == 1 and bv.ndim == 1:  # dot product, g scalar
            a._accumulate(g * bv)
            b._accumulate(g * av)
        elif av.ndim == 2 and bv.ndim == 2:
            a._accumulate(g @ bv.T)
            b._accumulate(av.T @ g)
        elif av.ndim == 1:  # (n,) @ (n,m) -> (m,)
            a._accumulate(bv @ g)
            b._accumulate(np.outer(av, g))
        else:  # (n,m) @ (m,) -> (n,)
            a._accumulate(np.outer(g, bv))
            b._accumulate(av.T @ g)

    out._backward = backward
    return out


def gather(a, indices) -> Node:
    """Rows of `a` at `indices` (any integer array shape)."""
    a = as_node(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather: indices must be integers, got {idx.dtype}")
    out = Node(a.value[idx], (a,), op="gather")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._accumulate(full)

    out._backward = backward
    return out


def weighted_sum(values, weights, axis: int = -1) -> Node:
    """Sum of values * weights along `axis` (dot product when both are 1-D)."""
    return reduce_sum(mul(values, weights), axis=axis)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Node) -> None:
    """Backpropagate from a scalar root, accumulating into Parameter grads."""
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")

    topo = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack_.append((parent, False))

    root._accumulate(np.ones_like(root.value))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not isinstance(node, Parameter):
            node.grad = None  # free intermediate adjoints eagerly
