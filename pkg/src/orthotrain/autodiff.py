"""Reverse-mode automatic differentiation over float64 matrices.

A :class:`Tape` is an append-only list of :class:`Node` objects. Each node
stores its value, the indices of its parents and an op tag; the op tag
selects a shape rule and a vector-Jacobian product (VJP) from the op
registry. Iterative algorithms are differentiated by unrolling: their
registered VJPs replay the exact sequence of forward updates in reverse.

Typical use::

    tape = Tape()
    x = tape.variable(x0)
    loss = tape.frob_sq(tape.matmul(x, x))
    grads = backward(tape, loss)
    grads[x]  # d loss / d x
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import linalg
from .errors import ContractError, DegenerateInputError, ShapeError

ROW_NORM_MIN = 1e-12


@dataclass
class Node:
    id: int
    op: str
    parents: tuple
    value: np.ndarray
    adjoint: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OpRule:
    shape: Callable  # (parent shapes, attrs) -> output shape
    vjp: Callable  # (upstream, node, parent values) -> sequence of parent adjoints (None = zero)


_REGISTRY: dict[str, OpRule] = {}


def register_op(tag, shape, vjp):
    _REGISTRY[tag] = OpRule(shape, vjp)


def registered_ops():
    return sorted(_REGISTRY)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.trainable: set[int] = set()

    def __len__(self):
        return len(self.nodes)

    def value(self, idx):
        return self.nodes[idx].value

    def _append(self, op, parents, value, attrs):
        node = Node(len(self.nodes), op, tuple(parents), value, None, attrs)
        self.nodes.append(node)
        return node.id

    def variable(self, value, trainable=True):
        idx = self._append("input", (), linalg.as_matrix(value).copy(), {})
        if trainable:
            self.trainable.add(idx)
        return idx

    def constant(self, value):
        return self._append("const", (), linalg.as_matrix(value), {})

    def record(self, op, inputs, value, **attrs):
        """Append a node for ``op`` applied to ``inputs`` with a precomputed ``value``."""
        if op not in _REGISTRY:
            raise ShapeError(f"unknown op tag {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeError(f"input node {i} is not on the tape")
        value = np.asarray(value, dtype=np.float64)
        shapes = [self.nodes[i].value.shape for i in inputs]
        expected = tuple(_REGISTRY[op].shape(shapes, attrs))
        if value.shape != expected:
            raise ShapeError(f"{op}: value shape {value.shape} != expected {expected} for inputs {shapes}")
        return self._append(op, inputs, value, attrs)

    # primitive ops

    def add(self, a, b):
        return self.record("add", (a, b), self.value(a) + self.value(b))

    def sub(self, a, b):
        return self.record("sub", (a, b), self.value(a) - self.value(b))

    def scale(self, a, c):
        return self.record("scale", (a,), float(c) * self.value(a), c=float(c))

    def hadamard(self, a, b):
        return self.record("hadamard", (a, b), self.value(a) * self.value(b))

    def matmul(self, a, b):
        va, vb = self.value(a), self.value(b)
        if va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
        return self.record("matmul", (a, b), va @ vb)

    def transpose(self, a):
        return self.record("transpose", (a,), np.ascontiguousarray(self.value(a).T))

    def inverse(self, a):
        va = self.value(a)
        if va.ndim != 2 or va.shape[0] != va.shape[1]:
            raise ShapeError(f"inverse needs a square matrix, got {va.shape}")
        lu = linalg.lu_factor(va)
        inv = scipy.linalg.lu_solve(lu, np.eye(va.shape[0]), check_finite=False)
        return self.record("inverse", (a,), inv, lu=lu)

    def relu(self, a):
        return self.record("relu", (a,), np.maximum(self.value(a), 0.0))

    def row_normalize(self, a):
        va = self.value(a)
        norms = np.sqrt(np.sum(va * va, axis=1, keepdims=True))
        if np.any(norms < ROW_NORM_MIN):
            raise DegenerateInputError(f"row norm below {ROW_NORM_MIN:g}")
        return self.record("row_normalize", (a,), va / norms, norms=norms)

    def frob_sq(self, a):
        va = self.value(a)
        return self.record("frob_sq", (a,), np.array([[np.sum(va * va)]]))

    def sum(self, a):
        return self.record("sum", (a,), np.array([[np.sum(self.value(a))]]))

    def add_row(self, a, bias):
        """Broadcast-add a ``1 x n`` row vector to every row of ``a``."""
        return self.record("add_row", (a, bias), self.value(a) + self.value(bias))

    def softmax_ce(self, logits, labels):
        """Mean softmax cross-entropy over rows; ``labels`` are class indices."""
        z = self.value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (z.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match logits {z.shape}")
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.sum(np.exp(shifted), axis=1))
        logp = shifted[np.arange(len(labels)), labels] - logsum
        probs = np.exp(shifted - logsum[:, None])
        return self.record("softmax_ce", (logits,), np.array([[-np.mean(logp)]]), labels=labels, probs=probs)

    def least_squares(self, outputs, labels):
        """Mean over rows of ``||z - onehot(label)||^2``."""
        z = self.value(outputs)
        labels = np.asarray(labels, dtype=np.int64)
        target = np.zeros_like(z)
        target[np.arange(len(labels)), labels] = 1.0
        diff = z - target
        return self.record("least_squares", (outputs,), np.array([[np.sum(diff * diff) / z.shape[0]]]), diff=diff)

    def slice_rows(self, a, index):
        index = _as_index(index)
        return self.record("slice_rows", (a,), self.value(a)[index], index=index)

    def slice_cols(self, a, index):
        index = _as_index(index)
        return self.record("slice_cols", (a,), np.ascontiguousarray(self.value(a)[:, index]), index=index)

    def scatter_rows(self, a, index, n_rows):
        """Zero ``n_rows x cols`` matrix with the rows of ``a`` placed at ``index``."""
        index = _as_index(index)
        va = self.value(a)
        out = np.zeros((n_rows, va.shape[1]))
        out[index] = va
        return self.record("scatter_rows", (a,), out, index=index, n_rows=n_rows)

    def concat_rows(self, parts):
        vals = [self.value(p) for p in parts]
        return self.record("concat_rows", tuple(parts), np.concatenate(vals, axis=0))

    def concat_cols(self, parts):
        vals = [self.value(p) for p in parts]
        return self.record("concat_cols", tuple(parts), np.concatenate(vals, axis=1))


def _as_index(index):
    if isinstance(index, slice):
        return index
    return np.asarray(index, dtype=np.int64)


def backward(tape, loss, upstream=1.0):
    """Reverse sweep from the scalar node ``loss``; returns ``{trainable idx: grad}``.

    Node adjoints are reset first, so replaying a tape is reproducible.
    """
    root = tape.nodes[loss]
    if root.value.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {root.value.shape}")
    for node in tape.nodes:
        node.adjoint = None
    root.adjoint = np.full((1, 1), float(upstream))
    for i in range(loss, -1, -1):
        node = tape.nodes[i]
        if node.adjoint is None or not node.parents:
            continue
        parent_vals = [tape.nodes[p].value for p in node.parents]
        grads = _REGISTRY[node.op].vjp(node.adjoint, node, parent_vals)
        for p, g in zip(node.parents, grads):
            if g is None:
                continue
            parent = tape.nodes[p]
            parent.adjoint = g if parent.adjoint is None else parent.adjoint + g
    out = {}
    for i in sorted(tape.trainable):
        node = tape.nodes[i]
        if node.adjoint is None:
            node.adjoint = np.zeros_like(node.value)
        out[i] = node.adjoint
    return out


def grad_check(f, x, h=1e-5, floor=1e-3):
    """Max relative error between the tape gradient and central differences.

    ``f(tape, x_idx)`` must build a scalar loss and return its index. Each
    entry's error is ``|g - fd| / max(|g|, |fd|, floor * max|g|)``; the floor
    keeps entries whose true gradient is ~0 from dividing noise by noise.
    """
    x = linalg.as_matrix(x)

    def evaluate(point):
        tape = Tape()
        idx = tape.variable(point)
        return tape, idx, f(tape, idx)

    tape, idx, loss = evaluate(x)
    g = backward(tape, loss)[idx]
    fd = np.zeros_like(x)
    for pos in np.ndindex(*x.shape):
        xp = x.copy()
        xp[pos] += h
        xm = x.copy()
        xm[pos] -= h
        tp, _, lp = evaluate(xp)
        tm, _, lm = evaluate(xm)
        fd[pos] = (tp.value(lp)[0, 0] - tm.value(lm)[0, 0]) / (2.0 * h)
    scale = max(float(np.max(np.abs(g))), float(np.max(np.abs(fd))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor * scale)
    return float(np.max(np.abs(g - fd) / denom))


# registry of primitive ops


def _same(shapes, attrs):
    if shapes[0] != shapes[1]:
        raise ShapeError(f"operand shapes differ: {shapes[0]} vs {shapes[1]}")
    return shapes[0]


def _first(shapes, attrs):
    return shapes[0]


def _scalar(shapes, attrs):
    return (1, 1)


def _matmul_shape(shapes, attrs):
    (m, k), (k2, n) = shapes
    if k != k2:
        raise ShapeError(f"matmul shape mismatch: {shapes[0]} @ {shapes[1]}")
    return (m, n)


def _square(shapes, attrs):
    if shapes[0][0] != shapes[0][1]:
        raise ShapeError(f"square matrix required, got {shapes[0]}")
    return shapes[0]


def _index_len(index, n):
    return len(range(n)[index]) if isinstance(index, slice) else len(index)


def _inverse_vjp(g, node, vals):
    # -A^{-T} G A^{-T} through two solves against the cached LU of A
    lu = node.attrs["lu"]
    y = scipy.linalg.lu_solve(lu, g, trans=1, check_finite=False)
    return (-scipy.linalg.lu_solve(lu, y.T, check_finite=False).T,)


def _row_normalize_vjp(g, node, vals):
    y = node.value
    return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / node.attrs["norms"],)


def _slice_rows_vjp(g, node, vals):
    out = np.zeros_like(vals[0])
    np.add.at(out, node.attrs["index"], g)
    return (out,)


def _slice_cols_vjp(g, node, vals):
    out = np.zeros_like(vals[0])
    idx = node.attrs["index"]
    if isinstance(idx, slice):
        out[:, idx] += g
    else:
        np.add.at(out.T, idx, g.T)
    return (out,)


def _concat_vjp(axis):
    def vjp(g, node, vals):
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return vjp


def _concat_shape(axis):
    def shape(shapes, attrs):
        other = 1 - axis
        if len({s[other] for s in shapes}) != 1:
            raise ShapeError(f"concat along axis {axis} needs matching dims, got {shapes}")
        out = list(shapes[0])
        out[axis] = sum(s[axis] for s in shapes)
        return tuple(out)

    return shape


def _softmax_ce_vjp(g, node, vals):
    probs = node.attrs["probs"].copy()
    labels = node.attrs["labels"]
    probs[np.arange(len(labels)), labels] -= 1.0
    return (g[0, 0] * probs / len(labels),)


def _add_row_shape(shapes, attrs):
    if shapes[1] != (1, shapes[0][1]):
        raise ShapeError(f"bias shape {shapes[1]} does not broadcast over {shapes[0]}")
    return shapes[0]


register_op("add", _same, lambda g, n, v: (g, g))
register_op("sub", _same, lambda g, n, v: (g, -g))
register_op("scale", _first, lambda g, n, v: (n.attrs["c"] * g,))
register_op("hadamard", _same, lambda g, n, v: (g * v[1], g * v[0]))
register_op("matmul", _matmul_shape, lambda g, n, v: (g @ v[1].T, v[0].T @ g))
register_op("transpose", lambda s, a: (s[0][1], s[0][0]), lambda g, n, v: (np.ascontiguousarray(g.T),))
register_op("inverse", _square, _inverse_vjp)
register_op("relu", _first, lambda g, n, v: (g * (v[0] > 0),))
register_op("row_normalize", _first, _row_normalize_vjp)
register_op("frob_sq", _scalar, lambda g, n, v: (2.0 * g[0, 0] * v[0],))
register_op("sum", _scalar, lambda g, n, v: (np.full_like(v[0], g[0, 0]),))
register_op("add_row", _add_row_shape, lambda g, n, v: (g, np.sum(g, axis=0, keepdims=True)))
register_op("softmax_ce", _scalar, _softmax_ce_vjp)
register_op(
    "least_squares", _scalar, lambda g, n, v: (g[0, 0] * 2.0 * n.attrs["diff"] / v[0].shape[0],)
)
register_op(
    "slice_rows", lambda s, a: (_index_len(a["index"], s[0][0]), s[0][1]), _slice_rows_vjp
)
register_op(
    "slice_cols", lambda s, a: (s[0][0], _index_len(a["index"], s[0][1])), _slice_cols_vjp
)
register_op(
    "scatter_rows",
    lambda s, a: (a["n_rows"], s[0][1]),
    lambda g, n, v: (np.ascontiguousarray(g[n.attrs["index"]]),),
)
register_op("concat_rows", _concat_shape(0), _concat_vjp(0))
register_op("concat_cols", _concat_shape(1), _concat_vjp(1))
