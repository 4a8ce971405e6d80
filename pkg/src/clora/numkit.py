"""Dense float64 matrices with a small reverse-mode differentiation engine.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64. Operations
accept either raw arrays (constants) or :class:`Node` objects living on a
:class:`Tape`; when every input is a constant the result is a plain array and
nothing is recorded, so the same model code serves training and inference.

Scalars are 1x1 matrices.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class ContractError(RuntimeError):
    """An engine precondition was violated (e.g. backward from a non-scalar)."""


class EvaluationError(ArithmeticError):
    """A loss evaluated to a non-finite value."""


class Node:
    __slots__ = ("value", "parents", "grad_fn", "tape", "index", "name", "trainable")

    def __init__(self, tape, value, parents=(), grad_fn=None, name=None, trainable=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name
        self.trainable = trainable
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Node({label}, shape={self.value.shape})"


Operand = Union[Node, np.ndarray]


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are created, so parents always precede
    children and a reverse sweep over the list is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}

    def _record(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name=None, trainable=True) -> Node:
        value = as_matrix(value)
        if name is None:
            name = f"leaf{len(self.nodes)}"
        if name in self._leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        node = Node(self, value, name=name, trainable=trainable)
        self._leaves[name] = node
        return node

    @property
    def leaves(self) -> Mapping[str, Node]:
        return self._leaves

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``root`` for every trainable leaf, keyed by name."""
        if not isinstance(root, Node) or root.tape is not self:
            raise ContractError("root must be a node recorded on this tape")
        if root.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {root.index: np.ones((1, 1))}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.grad_fn is None:
                if g is not None:
                    grads[node.index] = g
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if not isinstance(parent, Node) or pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out = {}
        for name, leaf in self._leaves.items():
            if leaf.trainable:
                g = grads.get(leaf.index)
                out[name] = np.zeros_like(leaf.value) if g is None else g
        return out


def backward(tape: Tape, root: Node) -> dict[str, np.ndarray]:
    return tape.backward(root)


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of ndim {a.ndim}")
    return a


def value(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def scalar(x: Operand) -> float:
    v = value(x)
    if v.shape != (1, 1):
        raise ContractError(f"not a scalar: shape {v.shape}")
    return float(v[0, 0])


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _wrap(out, parents, grad_fn):
    tape = _tape_of(*parents)
    if tape is None:
        return out
    for p in parents:
        if isinstance(p, Node) and p.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return Node(tape, out, tuple(parents), grad_fn)


def _reduce_to(g, shape):
    # undo row/column-vector broadcasting
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra == rb or rb == 1 or ra == 1) and (ca == cb or cb == 1 or ca == 1):
        return
    raise ShapeError(f"{op}: cannot combine {a.shape} with {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Operand, b: Operand) -> Operand:
    av, bv = value(a), value(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} x {bv.shape} not conformable")
    out = av @ bv
    return _wrap(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Operand, b: Operand) -> Operand:
    """Sum with row/column-vector broadcasting."""
    av, bv = value(a), value(b)
    _check_broadcast(av, bv, "add")
    out = av + bv
    return _wrap(out, (a, b), lambda g: (_reduce_to(g, av.shape), _reduce_to(g, bv.shape)))


def sub(a: Operand, b: Operand) -> Operand:
    av, bv = value(a), value(b)
    _check_broadcast(av, bv, "sub")
    out = av - bv
    return _wrap(out, (a, b), lambda g: (_reduce_to(g, av.shape), -_reduce_to(g, bv.shape)))


def scale(a: Operand, c: float) -> Operand:
    c = float(c)
    return _wrap(value(a) * c, (a,), lambda g: (g * c,))


def hadamard(a: Operand, b: Operand) -> Operand:
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"hadamard: shapes {av.shape} and {bv.shape} differ")
    return _wrap(av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_col(a: Operand, col: Operand) -> Operand:
    """Scale each row of ``a`` by the matching entry of column vector ``col``."""
    av, cv = value(a), value(col)
    if cv.shape != (av.shape[0], 1):
        raise ShapeError(f"mul_col: column {cv.shape} does not match {av.shape}")
    return _wrap(av * cv, (a, col), lambda g: (g * cv, (g * av).sum(axis=1, keepdims=True)))


def absolute(a: Operand) -> Operand:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    av = value(a)
    return _wrap(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def transpose(a: Operand) -> Operand:
    return _wrap(value(a).T.copy(), (a,), lambda g: (g.T,))


def row_softmax(a: Operand) -> Operand:
    av = value(a)
    z = av - av.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _wrap(s, (a,), grad)


def log_softmax(a: Operand) -> Operand:
    av = value(a)
    z = av - av.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    s = np.exp(out)
    return _wrap(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def frobenius_sq(a: Operand) -> Operand:
    av = value(a)
    out = np.array([[np.sum(av * av)]])
    return _wrap(out, (a,), lambda g: (2.0 * g[0, 0] * av,))


def total(a: Operand) -> Operand:
    av = value(a)
    out = np.array([[av.sum()]])
    return _wrap(out, (a,), lambda g: (np.full_like(av, g[0, 0]),))


def mean(a: Operand) -> Operand:
    return scale(total(a), 1.0 / value(a).size)


def tanh(a: Operand) -> Operand:
    t = np.tanh(value(a))
    return _wrap(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Operand) -> Operand:
    av = value(a)
    mask = av > 0
    return _wrap(av * mask, (a,), lambda g: (g * mask,))


def silu(a: Operand) -> Operand:
    av = value(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * sig
    return _wrap(out, (a,), lambda g: (g * (sig + av * sig * (1.0 - sig)),))


def rms_norm_rows(a: Operand, eps: float = 1e-8) -> Operand:
    """Scale each row to unit root-mean-square (no learned gain)."""
    av = value(a)
    d = av.shape[1]
    r = np.sqrt(np.mean(av * av, axis=1, keepdims=True) + eps)
    out = av / r

    def grad(g):
        return (g / r - av * np.sum(g * av, axis=1, keepdims=True) / (d * r ** 3),)

    return _wrap(out, (a,), grad)


def slice_cols(a: Operand, start: int, stop: int) -> Operand:
    av = value(a)
    if not 0 <= start < stop <= av.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside {av.shape}")

    def grad(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return (full,)

    return _wrap(av[:, start:stop].copy(), (a,), grad)


def slice_rows(a: Operand, start: int, stop: int) -> Operand:
    av = value(a)
    if not 0 <= start < stop <= av.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] outside {av.shape}")

    def grad(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return (full,)

    return _wrap(av[start:stop].copy(), (a,), grad)


def concat_cols(parts: Sequence[Operand]) -> Operand:
    vals = [value(p) for p in parts]
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[v.shape for v in vals]}")
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])
    out = np.concatenate(vals, axis=1)
    return _wrap(out, tuple(parts),
                 lambda g: tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])))


def concat_rows(parts: Sequence[Operand]) -> Operand:
    vals = [value(p) for p in parts]
    cols = {v.shape[1] for v in vals}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[v.shape for v in vals]}")
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])
    out = np.concatenate(vals, axis=0)
    return _wrap(out, tuple(parts),
                 lambda g: tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])))


# ------------------------------------------------------------------ checking


def finite_diff_check(
    loss: Callable[[Mapping[str, Operand]], Operand],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss`` maps a dict of named operands to a scalar. The relative error of
    one coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = {k: as_matrix(v).copy() for k, v in point.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in point.items()}
    root = loss(leaves)
    if not isinstance(root, Node):
        # loss does not depend on any leaf
        analytic = {k: np.zeros_like(v) for k, v in point.items()}
    else:
        _finite_or_raise(scalar(root))
        analytic = tape.backward(root)

    def f(vals):
        out = scalar(loss(vals))
        _finite_or_raise(out)
        return out

    worst = 0.0
    for name, base in point.items():
        for idx in np.ndindex(base.shape):
            vals = dict(point)
            hi = base.copy()
            hi[idx] += eps
            lo = base.copy()
            lo[idx] -= eps
            vals[name] = hi
            f_hi = f(vals)
            vals[name] = lo
            f_lo = f(vals)
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _finite_or_raise(x):
    if not math.isfinite(x):
        raise EvaluationError(f"loss evaluated to {x}")
