"""Minimal reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Var` holding its forward value and a closure that
pushes the upstream gradient to its parents. :func:`backward` walks the graph
in reverse creation order, which is a valid topological order because a node
can only be built from nodes that already exist.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/Inf."""


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "id", "needs_grad", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
        needs_grad: bool | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad
        # constant subgraphs keep no closure and no parent links
        self.parents = parents if needs_grad else ()
        self.backward_fn = backward_fn if needs_grad else None
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.value.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, op="const", needs_grad=False)


def leaf(value) -> Var:
    """A differentiable input (parameter) node."""
    return Var(value, op="leaf", needs_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Var, g: np.ndarray) -> None:
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _check_broadcast(op: str, a: Var, b: Var) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- elementwise binary ---------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Var(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return Var(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return Var(a.value * b.value, (a, b), backward, "mul")


def matmul(a, b) -> Var:
    """``(..., n) @ (n, k)``; the right operand is always a 2-D matrix."""
    a, b = as_var(a), as_var(b)
    if b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: left {a.shape} incompatible with right {b.shape}")

    def backward(g):
        if a.needs_grad:
            _accumulate(a, g @ b.value.T)
        if b.needs_grad:
            flat_a = a.value.reshape(-1, a.shape[-1])
            _accumulate(b, flat_a.T @ g.reshape(-1, g.shape[-1]))

    return Var(a.value @ b.value, (a, b), backward, "matmul")


# --- elementwise unary ----------------------------------------------------

def tanh(x: Var) -> Var:
    y = np.tanh(x.value)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return Var(y, (x,), backward, "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |z|
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x: Var) -> Var:
    y = _sigmoid(x.value)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return Var(y, (x,), backward, "sigmoid")


def relu(x: Var) -> Var:
    mask = x.value > 0

    def backward(g):
        _accumulate(x, g * mask)

    return Var(x.value * mask, (x,), backward, "relu")


def silu(x: Var) -> Var:
    s = _sigmoid(x.value)

    def backward(g):
        _accumulate(x, g * (s * (1.0 + x.value * (1.0 - s))))

    return Var(x.value * s, (x,), backward, "silu")


def absolute(x: Var) -> Var:
    # subgradient at exactly 0 is 0
    sign = np.sign(x.value)

    def backward(g):
        _accumulate(x, g * sign)

    return Var(np.abs(x.value), (x,), backward, "abs")


def square(x: Var) -> Var:
    def backward(g):
        _accumulate(x, 2.0 * g * x.value)

    return Var(x.value * x.value, (x,), backward, "square")


def clamp(x, lo, hi) -> Var:
    """``max(min(x, hi), lo)`` with bounds that may themselves be Vars.

    The gradient reaches ``x`` only strictly inside the bounds; at or beyond a
    bound it is routed to that bound instead.
    """
    x, lo, hi = as_var(x), as_var(lo), as_var(hi)
    xv = x.value
    upper = xv >= hi.value
    lower = (xv <= lo.value) | (hi.value <= lo.value)
    upper &= ~lower
    inside = ~(upper | lower)
    out = np.maximum(np.minimum(xv, hi.value), lo.value)

    def backward(g):
        _accumulate(x, _unbroadcast(g * inside, x.shape))
        _accumulate(lo, _unbroadcast(g * lower, lo.shape))
        _accumulate(hi, _unbroadcast(g * upper, hi.shape))

    return Var(out, (x, lo, hi), backward, "clamp")


# --- reductions and structure --------------------------------------------

def sum_(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.shape))

    return Var(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Var(y, (x,), backward, "softmax")


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            _accumulate(p, piece)

    return Var(value, tuple(parts), backward, "concat")


def take(x: Var, idx) -> Var:
    """Basic (non-fancy) indexing, e.g. ``x[:, 3]`` or ``x[:, :, 2:5]``."""
    value = x.value[idx]

    def backward(g):
        full = np.zeros_like(x.value)
        full[idx] = g
        _accumulate(x, full)

    return Var(value, (x,), backward, "take")


def unstack(x: Var, axis: int = 1) -> list[Var]:
    """Split ``x`` along ``axis`` into views. All parts write into one shared
    gradient buffer, so per-step slicing of a sequence costs O(slice)."""
    x = as_var(x)
    n = x.shape[axis]
    hub = Var(x.value, (x,), lambda g: _accumulate(x, g), "unstack")
    parts = []
    for t in range(n):
        index = (slice(None),) * axis + (t,)

        def backward(g, index=index):
            if hub.grad is None:
                hub.grad = np.zeros_like(hub.value)
            hub.grad[index] += g

        parts.append(Var(x.value[index], (hub,), backward, "unstack_part"))
    return parts


def reshape(x: Var, shape: tuple) -> Var:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return Var(x.value.reshape(shape), (x,), backward, "reshape")


def custom(value: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Var:
    """Wrap a hand-derived op; ``vjp(g)`` returns one gradient per parent."""

    def backward(g):
        for p, gp in zip(parents, vjp(g)):
            if gp is not None:
                _accumulate(p, gp)

    return Var(value, parents, backward, op)


# --- graph traversal ------------------------------------------------------

def _reachable(root: Var) -> list[Var]:
    seen: dict[int, Var] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p for p in node.parents if p.id not in seen)
    return sorted(seen.values(), key=lambda n: n.id)


def first_nonfinite(root: Var) -> Var | None:
    """Earliest node (in creation order) whose forward value is not finite."""
    for node in _reachable(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def backward(root: Var) -> None:
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = _reachable(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node is not root:
                # intermediate buffers are dead once pushed to the parents
                node.grad = None
