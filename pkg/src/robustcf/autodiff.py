"""Small tape-based reverse-mode autodiff over numpy float64 arrays.

Every operation appends a node to the :class:`Tape` that owns its inputs;
``Tape.backward`` walks the nodes in reverse recording order.  Plain numpy
arrays and Python scalars may be mixed freely with :class:`Var` and are
treated as constants.  Broadcasting follows numpy; gradients are summed
back to each operand's shape.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "node_id", "requires_grad", "_gen")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.requires_grad = requires_grad
        self._gen = tape._gen
        self.node_id = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, node={self.node_id})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "kind")

    def __init__(self, out, parents, backward_fn, kind):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tape:
    """Ordered record of operations; one tape per thread of execution."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._gen = 0

    def __len__(self):
        return len(self._nodes)

    def var(self, value, requires_grad: bool = True) -> Var:
        v = Var(value, self, requires_grad=requires_grad)
        v.node_id = len(self._nodes)
        self._nodes.append(_Node(v, (), None, "leaf"))
        return v

    def const(self, value) -> Var:
        return self.var(value, requires_grad=False)

    def clear(self):
        """Drop all nodes; every Var issued so far becomes unusable."""
        self._nodes = []
        self._gen += 1

    def _check(self, v: Var):
        if v.tape is not self:
            raise TapeError("operands belong to different tapes")
        if v._gen != self._gen:
            raise TapeError("Var was issued before the tape was cleared")

    def record(self, kind: str, inputs: Sequence, value, backward_fn: Callable) -> Var:
        """Append a node computing ``value`` from ``inputs``.

        ``backward_fn(g)`` receives the output gradient and returns one
        gradient (or None) per input, already shaped like the input.
        """
        for v in inputs:
            if isinstance(v, Var):
                self._check(v)
        req = any(isinstance(v, Var) and v.requires_grad for v in inputs)
        out = Var(value, self, requires_grad=req)
        out.node_id = len(self._nodes)
        self._nodes.append(_Node(out, tuple(inputs), backward_fn if req else None, kind))
        return out

    def backward(self, root: Var):
        self._check(root)
        if root.value.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self._nodes:
            node.out.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes[: root.node_id + 1]):
            out = node.out
            if node.backward_fn is None or out.grad is None:
                continue
            grads = node.backward_fn(out.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var) or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g


# --------------------------------------------------------------------------
# helpers

def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands belong to different tapes")
    if tape is None:
        raise TapeError("at least one operand must be a Var")
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {np.shape(a)} and {np.shape(b)}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape("add", av, bv)
    return _tape_of(a, b).record(
        "add", (a, b), av + bv,
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape("sub", av, bv)
    return _tape_of(a, b).record(
        "sub", (a, b), av - bv,
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape("mul", av, bv)
    return _tape_of(a, b).record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape("div", av, bv)
    out = av / bv
    return _tape_of(a, b).record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Var:
    return _tape_of(a).record("neg", (a,), -_val(a), lambda g: (-g,))


def square(a) -> Var:
    av = _val(a)
    return _tape_of(a).record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def absolute(a) -> Var:
    av = _val(a)
    return _tape_of(a).record("abs", (a,), np.abs(av), lambda g: (np.sign(av) * g,))


def exp(a) -> Var:
    out = np.exp(_val(a))
    return _tape_of(a).record("exp", (a,), out, lambda g: (out * g,))


def relu(a) -> Var:
    av = _val(a)
    mask = av > 0  # subgradient 0 at the kink
    return _tape_of(a).record("relu", (a,), np.where(mask, av, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _tape_of(a).record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    _broadcast_shape("max", av, bv)
    take_a = av >= bv
    return _tape_of(a, b).record(
        "max", (a, b), np.where(take_a, av, bv),
        lambda g: (_unbroadcast(g * take_a, av.shape), _unbroadcast(g * ~take_a, bv.shape)))


def minimum(a, b) -> Var:
    """Elementwise min; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    _broadcast_shape("min", av, bv)
    take_a = av <= bv
    return _tape_of(a, b).record(
        "min", (a, b), np.where(take_a, av, bv),
        lambda g: (_unbroadcast(g * take_a, av.shape), _unbroadcast(g * ~take_a, bv.shape)))


def where(mask, a, b) -> Var:
    """Select-by-mask; ``mask`` is a plain boolean array (never differentiated)."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    shape = np.broadcast_shapes(mask.shape, av.shape, bv.shape)
    return _tape_of(a, b).record(
        "select", (a, b), np.where(mask, av, bv),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), av.shape),
                   _unbroadcast(np.where(mask, 0.0, g), bv.shape)))


def clip(a, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi].  Derivative is 1 on the closed interval, 0 outside."""
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _tape_of(a).record("clip", (a,), np.clip(av, lo, hi), lambda g: (g * inside,))


def straight_through(soft, hard_value) -> Var:
    """Forward value ``hard_value``, gradient passed unchanged to ``soft``."""
    sv = _val(soft)
    hv = np.asarray(hard_value, dtype=np.float64)
    if hv.shape != sv.shape:
        raise ValueError(f"straight_through: shapes {sv.shape} and {hv.shape} differ")
    return _tape_of(soft).record("straight_through", (soft,), hv, lambda g: (g,))


# --------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def backward(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            gb = (av.reshape(-1, av.shape[-1]) * g.reshape(-1, 1)).sum(axis=0)
            return _unbroadcast(ga, av.shape), gb
        if av.ndim == 1:
            return g @ np.swapaxes(bv, -1, -2), _unbroadcast(np.multiply.outer(av, g), bv.shape)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _tape_of(a, b).record("matmul", (a, b), out, backward)


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _tape_of(a).record("sum", (a,), out, backward)


def mean(a, axis=None) -> Var:
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def cumsum(a, axis: int = -1) -> Var:
    av = _val(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _tape_of(a).record("cumsum", (a,), np.cumsum(av, axis=axis), backward)


def reshape(a, shape) -> Var:
    av = _val(a)
    return _tape_of(a).record("reshape", (a,), av.reshape(shape), lambda g: (g.reshape(av.shape),))


def expand_dims(a, axis) -> Var:
    av = _val(a)
    return reshape(a, np.expand_dims(av, axis).shape)


def transpose(a) -> Var:
    av = _val(a)
    return _tape_of(a).record("transpose", (a,), np.swapaxes(av, -1, -2),
                              lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, idx) -> Var:
    av = _val(a)

    def backward(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _tape_of(a).record("getitem", (a,), av[idx], backward)


def concat(xs: Sequence, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _tape_of(*xs).record("concat", tuple(xs), np.concatenate(vals, axis=axis), backward)


def take_along_axis(a, perm: np.ndarray, axis: int = -1) -> Var:
    """Apply a fixed integer permutation; the indices carry no gradient."""
    av = _val(a)
    perm = np.asarray(perm)
    if perm.shape != av.shape:
        raise ValueError(f"take_along_axis: permutation shape {perm.shape} != {av.shape}")

    def backward(g):
        out = np.zeros_like(av)
        np.put_along_axis(out, perm, g, axis=axis)
        return (out,)

    return _tape_of(a).record("permute", (a,), np.take_along_axis(av, perm, axis=axis), backward)


# --------------------------------------------------------------------------
# losses

def mse(pred, target) -> Var:
    """Mean squared error over all elements."""
    return mean(square(sub(pred, target)))


def l1(a, b) -> Var:
    """Mean absolute difference over all elements."""
    return mean(absolute(sub(a, b)))


def value_of(x) -> np.ndarray:
    return _val(x)
