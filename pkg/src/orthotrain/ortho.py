"""Orthogonalization kernels and orthogonality-preserving updates.

Each unrolled algorithm has a plain numpy forward and a tape op whose VJP
replays the same updates in reverse (see :mod:`orthotrain.autodiff`). The
method names used by configs and the CLI are::

    gs   classical Gram-Schmidt           cp   Cayley parameterization
    mgs  modified Gram-Schmidt            ogd  Cayley-retraction gradient descent
    igs  iterative Gram-Schmidt           or   orthogonality regularization
    hr   Householder reflections          upt  unconstrained matrix (ablation)
    ls   Lowdin symmetric (Newton-Schulz)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .autodiff import Tape, register_op
from .errors import ConfigError, RankDeficiencyError, ShapeError, StateCorruptionError

METHODS = ("gs", "mgs", "igs", "hr", "ls", "cp", "ogd", "or", "upt")
UNROLLED = ("gs", "mgs", "igs", "hr", "ls")
# methods whose parameter *is* the matrix R
DIRECT = ("ogd", "or", "upt")
# methods whose R is orthogonal by construction
EXACT = ("gs", "mgs", "igs", "hr", "ls", "cp", "ogd")

GS_NORM_MIN = 1e-12
OGD_PRECONDITION_TOL = 1e-6


@dataclass(frozen=True)
class OrthoSpec:
    method: str = "gs"
    igs_unroll: int = 2
    ls_iters: int = 12
    ls_tol: float | None = 1e-11
    ogd_fixed_point_iters: int = 2
    ogd_closed_form: bool = False
    or_beta: float = 1e-3
    blocks: int = 1
    block_shared: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown orthogonalization method {self.method!r}; expected one of {METHODS}")
        if self.method == "or" and not self.or_beta > 0:
            raise ConfigError("or_beta must be positive for method 'or'")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.igs_unroll < 1 or self.ls_iters < 0 or self.ogd_fixed_point_iters < 0:
            raise ConfigError("iteration counts must be non-negative (igs_unroll >= 1)")

    def block_size(self, d):
        if d % self.blocks:
            raise ConfigError(f"blocks={self.blocks} does not divide neuron dimension {d}")
        return d // self.blocks

    def n_param_blocks(self):
        return 1 if (self.block_shared or self.blocks == 1) else self.blocks

    def to_dict(self):
        return asdict(self)


def orthogonal_parameter_count(spec, d):
    """Entries of the learned orthogonal parameter(s) for a ``d``-dim layer."""
    b = spec.block_size(d)
    return spec.n_param_blocks() * b * b


# Gram-Schmidt (classic == iterative with one pass)


def _square_or_tall(u, name):
    u = linalg.as_matrix(u, name)
    if u.shape[0] < u.shape[1]:
        raise ShapeError(f"{name} needs at least as many rows as columns, got {u.shape}")
    return u


def _igs_forward(u, unroll):
    n, m = u.shape
    er = np.zeros((m, n))  # row j holds e_j
    ts = np.empty((unroll + 1, m, n))
    norms = np.empty(m)
    for j in range(m):
        t = u[:, j].copy()
        ts[0, j] = t
        ep = er[:j]
        for i in range(unroll):
            t = t - (ep @ t) @ ep
            ts[i + 1, j] = t
        nu = float(np.sqrt(t @ t))
        if nu < GS_NORM_MIN:
            raise RankDeficiencyError(j)
        norms[j] = nu
        er[j] = t / nu
    return np.ascontiguousarray(er.T), (er, ts, norms, unroll)


def _igs_backward(g, cache):
    er, ts, norms, unroll = cache
    m, n = er.shape
    gt = g.T
    tbar = np.zeros((unroll, m, n))
    svec = np.zeros((unroll, m, m))
    wvec = np.zeros((unroll, m, m))
    ubar = np.zeros((m, n))
    for j in range(m - 1, -1, -1):
        eb = gt[j].copy()
        if j + 1 < m:
            for i in range(unroll):
                eb -= tbar[i, j + 1:].T @ svec[i, j + 1:, j] + ts[i, j + 1:].T @ wvec[i, j + 1:, j]
        e = er[j]
        tb = (eb - e * (e @ eb)) / norms[j]
        ep = er[:j]
        for i in range(unroll - 1, -1, -1):
            t_old = ts[i, j]
            w = ep @ tb
            tbar[i, j] = tb
            svec[i, j, :j] = ep @ t_old
            wvec[i, j, :j] = w
            tb = tb - w @ ep
        ubar[j] = tb
    return np.ascontiguousarray(ubar.T)


CGS_BLOCK = 64


def _cgs_forward(u, block=CGS_BLOCK):
    """Classical Gram-Schmidt, ``t_j = u_j - Q_<j Q_<j^T u_j``, in column blocks.

    Projections onto finished blocks are one matrix product per block; the
    coefficients always use the original column ``u_j``, so this is the same
    algorithm as the column-by-column loop.
    """
    n, m = u.shape
    q = np.zeros((n, m))
    norms = np.empty(m)
    for s in range(0, m, block):
        e = min(s + block, m)
        t_block = u[:, s:e] - q[:, :s] @ (q[:, :s].T @ u[:, s:e])
        for j in range(s, e):
            t = t_block[:, j - s]
            if j > s:
                qb = q[:, s:j]
                t = t - qb @ (qb.T @ u[:, j])
            nu = float(np.sqrt(t @ t))
            if nu < GS_NORM_MIN:
                raise RankDeficiencyError(j)
            norms[j] = nu
            q[:, j] = t / nu
    return q, (q, u, norms, block)


def _cgs_backward(g, cache):
    q, u, norms, block = cache
    n, m = q.shape
    coef = np.triu(q.T @ u, 1)  # c_jk = q_j^T u_k for j < k
    tbar = np.zeros((n, m))
    for s in range((m - 1) // block * block, -1, -block):
        e = min(s + block, m)
        qb = q[:, s:e]
        qbar = g[:, s:e].copy()
        if e < m:
            # later columns k >= e saw q_j through both c_jk and the projection
            later = tbar[:, e:]
            qbar -= later @ coef[s:e, e:].T + u[:, e:] @ (later.T @ qb)
        for j in range(e - 1, s - 1, -1):
            c = j - s
            if j + 1 < e:
                inner = tbar[:, j + 1:e]
                qbar[:, c] -= inner @ coef[j, j + 1:e] + u[:, j + 1:e] @ (inner.T @ qb[:, c])
            qj = qb[:, c]
            tbar[:, j] = (qbar[:, c] - qj * (qj @ qbar[:, c])) / norms[j]
    return tbar - q @ np.triu(q.T @ tbar, 1)


def _mgs_forward(u):
    n, m = u.shape
    at = np.array(u.T)  # working columns as rows
    er = np.zeros((m, n))
    norms = np.empty(m)
    coef = np.zeros((m, m))
    for k in range(m):
        a = at[k]
        nu = float(np.sqrt(a @ a))
        if nu < GS_NORM_MIN:
            raise RankDeficiencyError(k)
        e = a / nu
        er[k] = e
        norms[k] = nu
        if k + 1 < m:
            c = at[k + 1:] @ e
            at[k + 1:] -= np.outer(c, e)
            coef[k, k + 1:] = c
    return np.ascontiguousarray(er.T), (er, norms, coef, at)


def _mgs_backward(g, cache):
    er, norms, coef, at_final = cache
    m, n = er.shape
    at = at_final.copy()
    abar = np.zeros((m, n))
    gt = g.T
    for k in range(m - 1, -1, -1):
        e = er[k]
        eb = gt[k].copy()
        if k + 1 < m:
            c = coef[k, k + 1:]
            after_bar = abar[k + 1:]
            eb -= after_bar.T @ c
            cb = -(after_bar @ e)
            at[k + 1:] += np.outer(c, e)  # undo the projection: state before step k
            eb += at[k + 1:].T @ cb
            abar[k + 1:] = after_bar + np.outer(cb, e)
        abar[k] += (eb - e * (e @ eb)) / norms[k]
    return np.ascontiguousarray(abar.T)


def gram_schmidt(u, variant="classic"):
    """Orthonormalize the columns of ``u`` left to right."""
    u = _square_or_tall(u, "u")
    if variant == "classic":
        return _cgs_forward(u)[0]
    if variant == "modified":
        return _mgs_forward(u)[0]
    raise ConfigError(f"unknown Gram-Schmidt variant {variant!r}")


def iterative_gram_schmidt(u, unroll=2):
    """Gram-Schmidt with the re-orthogonalization loop unrolled ``unroll`` times."""
    if unroll < 1:
        raise ConfigError("unroll must be >= 1")
    return _igs_forward(_square_or_tall(u, "u"), unroll)[0]


# Householder


def _householder_forward(u):
    q, r, ws = linalg.householder_qr(u, return_reflectors=True)
    return q, (ws, r, q)


def _householder_backward(g, cache):
    ws, r_final, q = cache
    n = q.shape[0]
    hw = [None] * len(ws)
    hwt = [None] * len(ws)
    # Q = H_0 H_1 ... H_{n-2}; walk the chain forward, peeling one reflector per step
    qk = q.copy()
    qbar = g.copy()
    for k, w in enumerate(ws):
        if w is None:
            continue
        c = 2.0 / (w @ w)
        qk[k:] -= c * np.outer(w, w @ qk[k:])
        hw[k] = qbar[k:] @ (qk[k:].T @ w)
        hwt[k] = qk[k:] @ (qbar[k:].T @ w)
        qbar[k:] -= c * np.outer(w, w @ qbar[k:])
    # triangularization sweep in reverse, rebuilding each state with H^2 = I
    a = r_final.copy()
    abar = np.zeros_like(a)
    for k in range(len(ws) - 1, -1, -1):
        w = ws[k]
        if w is None:
            continue
        s = w @ w
        c = 2.0 / s
        a[k:, k:] -= c * np.outer(w, w @ a[k:, k:])
        before = a[k:, k:]
        sub_bar = abar[k:, k:]
        h_w = hw[k] + sub_bar @ (before.T @ w)
        h_tw = hwt[k] + before @ (sub_bar.T @ w)
        wbar = -c * (h_w + h_tw) + (4.0 / (s * s)) * (w @ h_w) * w
        abar[k:, k:] = sub_bar - c * np.outer(w, w @ sub_bar)
        x = before[:, 0]
        abar[k:, k] += wbar - wbar[0] * x / np.sqrt(x @ x)
    return abar


def householder_orthogonalize(u, return_r=False):
    """Orthogonal factor of the Householder QR of ``u``.

    The reflector for each column maps it onto ``+||x|| e_1``; no reflection
    is applied to the last column, so ``det(Q)`` may be either sign.
    """
    q, r = linalg.householder_qr(u)
    return (q, r) if return_r else q


# Lowdin symmetric orthogonalization


def _ns_forward(u, iters, tol):
    u = linalg.as_matrix(u, "u")
    if u.shape[0] != u.shape[1]:
        raise ShapeError(f"Lowdin orthogonalization needs a square matrix, got {u.shape}")
    scale = linalg.frobenius(u)
    eye = np.eye(u.shape[0])
    x = u / scale
    xs = [x]
    for _ in range(iters):
        if tol is not None and linalg.frobenius(x.T @ x - eye) <= tol:
            break
        x = 1.5 * x - 0.5 * x @ (x.T @ x)
        xs.append(x)
    return x, (xs, u, scale)


def _ns_backward(g, cache):
    xs, u, scale = cache
    gb = g
    for x in reversed(xs[:-1]):
        gb = 1.5 * gb - 0.5 * (gb @ (x.T @ x) + x @ (gb.T @ x) + x @ (x.T @ gb))
    return gb / scale - (np.sum(gb * u) / scale**3) * u


LOWDIN_MAX_ITERS = 100


def lowdin(u, iters=LOWDIN_MAX_ITERS, tol=1e-11):
    """Nearest orthogonal matrix to ``u`` in Frobenius norm (its polar factor).

    Frobenius pre-scaling shrinks the smallest singular value of a badly
    conditioned ``u`` far below 1 and each early iteration only grows it by
    1.5x, so 64x64 Gaussian inputs can need 40+ iterations; the loop stops
    at ``tol`` anyway, hence the generous cap.
    """
    return linalg.newton_schulz_polar(u, max_iters=iters, tol=tol)


# Cayley


def skew_from_params(w_params):
    upper = np.triu(linalg.as_matrix(w_params, "w_params"), 1)
    return upper - upper.T


def cayley(w_params):
    """``(I + W)(I - W)^-1`` with ``W`` built from the strict upper triangle."""
    w = skew_from_params(w_params)
    n = w.shape[0]
    if w.shape[1] != n:
        raise ShapeError(f"cayley needs a square parameter matrix, got {w.shape}")
    eye = np.eye(n)
    # R = (I+W)(I-W)^{-1}  <=>  (I-W)^T R^T = (I+W)^T
    return np.ascontiguousarray(linalg.solve((eye - w).T, (eye + w).T).T)


def cayley_node(tape, p, fused=True):
    """Tape node for :func:`cayley`.

    The fused op uses ``R = (I + W)(I - W)^-1 = 2 (I - W)^-1 - I``, so
    ``dR = 2 A^-1 dW A^-1`` with ``A = I - W``; ``fused=False`` records the
    same map from primitive ops instead.
    """
    n = tape.value(p).shape[0]
    if fused:
        w = skew_from_params(tape.value(p))
        eye = np.eye(n)
        lu = linalg.lu_factor(eye - w)
        a_inv = scipy.linalg.lu_solve(lu, eye, check_finite=False)
        return tape.record("cayley", (p,), 2.0 * a_inv - eye, a_inv=a_inv)
    mask = tape.constant(np.triu(np.ones((n, n)), 1))
    upper = tape.hadamard(p, mask)
    w = tape.sub(upper, tape.transpose(upper))
    eye = tape.constant(np.eye(n))
    return tape.matmul(tape.add(eye, w), tape.inverse(tape.sub(eye, w)))


def _cayley_vjp(g, node, vals):
    a_inv = node.attrs["a_inv"]
    wbar = 2.0 * (a_inv.T @ g @ a_inv.T)
    return (np.triu(wbar - wbar.T, 1),)


# Cayley-retraction gradient step


def ogd_skew(u, grad):
    w_hat = grad @ u.T - 0.5 * u @ (u.T @ grad @ u.T)
    return w_hat - w_hat.T


def ogd_step(u, grad, lam, iters=2, closed_form=False):
    """Move ``u`` along the Cayley curve generated by ``grad``.

    ``Y(lam) = (I - lam/2 W)^-1 (I + lam/2 W) u`` with ``W`` the skew matrix
    built from ``grad``; to first order ``Y = u + lam * W u``, which is an
    ascent direction, so pass the negated gradient (or a negative ``lam``)
    to descend. The iterative form starts from that first-order point and
    applies ``Y <- u + lam/2 W (u + Y)`` ``iters`` times; its error against
    the closed form is ``O(lam^(iters + 2))``.
    """
    u = linalg.as_matrix(u, "u")
    grad = linalg.as_matrix(grad, "grad")
    if grad.shape != u.shape:
        raise ShapeError(f"grad shape {grad.shape} != u shape {u.shape}")
    residual = linalg.ortho_residual(u)
    if residual > OGD_PRECONDITION_TOL:
        raise StateCorruptionError(f"OGD iterate left the Stiefel manifold (residual {residual:.3e})")
    if lam == 0:
        return u.copy()
    w = ogd_skew(u, grad)
    half = 0.5 * lam
    if closed_form:
        eye = np.eye(u.shape[0])
        return linalg.solve(eye - half * w, (eye + half * w) @ u)
    y = u + lam * (w @ u)
    for _ in range(iters):
        y = u + half * (w @ (u + y))
    return y


# penalty


def ortho_penalty(tape, r):
    """Tape node for ``||R^T R - I||_F^2``; the caller scales by beta."""
    n = tape.value(r).shape[1]
    gram = tape.matmul(tape.transpose(r), r)
    return tape.frob_sq(tape.sub(gram, tape.constant(np.eye(n))))


# dispatch


def orthogonal_matrix(spec, param):
    """Numpy value of the orthogonal factor that ``spec.method`` builds from ``param``."""
    m = spec.method
    if m == "gs":
        return _cgs_forward(_square_or_tall(param, "P"))[0]
    if m == "igs":
        return _igs_forward(_square_or_tall(param, "P"), spec.igs_unroll)[0]
    if m == "mgs":
        return _mgs_forward(_square_or_tall(param, "P"))[0]
    if m == "hr":
        return linalg.householder_qr(param)[0]
    if m == "ls":
        return _ns_forward(param, spec.ls_iters, spec.ls_tol)[0]
    if m == "cp":
        return cayley(param)
    return linalg.as_matrix(param).copy()


def orthogonal_node(tape, spec, p):
    """Record the construction of ``R`` from parameter node ``p``; returns R's node."""
    m = spec.method
    val = tape.value(p)
    if m == "gs":
        out, cache = _cgs_forward(_square_or_tall(val, "P"))
        return tape.record("cgs", (p,), out, cache=cache)
    if m == "igs":
        out, cache = _igs_forward(_square_or_tall(val, "P"), spec.igs_unroll)
        return tape.record("gram_schmidt", (p,), out, cache=cache)
    if m == "mgs":
        out, cache = _mgs_forward(_square_or_tall(val, "P"))
        return tape.record("mgs", (p,), out, cache=cache)
    if m == "hr":
        out, cache = _householder_forward(val)
        return tape.record("householder", (p,), out, cache=cache)
    if m == "ls":
        out, cache = _ns_forward(val, spec.ls_iters, spec.ls_tol)
        return tape.record("newton_schulz", (p,), out, cache=cache)
    if m == "cp":
        return cayley_node(tape, p)
    return p


def init_orthogonal_param(spec, size, rng, identity=False):
    """Initial trainable parameter for one ``size x size`` block.

    Unrolled methods take a standard-normal input matrix; CP takes a skew
    generator with strictly-upper entries ``N(0, 0.01^2)`` (R starts near I);
    OGD/OR/UPT start from a Haar orthogonal matrix. ``identity=True`` gives
    the parameter whose R is exactly the identity.
    """
    m = spec.method
    if identity:
        return np.zeros((size, size)) if m == "cp" else np.eye(size)
    if m in UNROLLED:
        return linalg.rand_gaussian(size, size, 0.0, 1.0, rng)
    if m == "cp":
        return np.triu(linalg.rand_gaussian(size, size, 0.0, 0.01, rng), 1)
    return linalg.rand_orthogonal(size, rng)


def block_apply(spec, params, v, tape=None):
    """``Diag(R_1..R_k) @ v`` applied per row block, never forming the full matrix.

    With ``tape`` given, ``params`` and ``v`` are node indices and a node is
    returned; otherwise they are arrays.
    """
    if tape is None:
        v = linalg.as_matrix(v, "v")
        d = v.shape[0]
    else:
        d = tape.value(v).shape[0]
    b = spec.block_size(d)
    params = list(params)
    if len(params) != spec.n_param_blocks():
        raise ConfigError(f"expected {spec.n_param_blocks()} parameter blocks, got {len(params)}")
    for p in params:
        shape = p.shape if tape is None else tape.value(p).shape
        if shape != (b, b):
            raise ShapeError(f"block parameter shape {shape} != {(b, b)}")
    if tape is None:
        blocks = [orthogonal_matrix(spec, p) for p in params]
        if spec.blocks == 1:
            return blocks[0] @ v
        out = np.empty_like(v)
        for i in range(spec.blocks):
            r = blocks[0] if len(blocks) == 1 else blocks[i]
            out[i * b:(i + 1) * b] = r @ v[i * b:(i + 1) * b]
        return out
    blocks = [orthogonal_node(tape, spec, p) for p in params]
    if spec.blocks == 1:
        return tape.matmul(blocks[0], v)
    pieces = []
    for i in range(spec.blocks):
        r = blocks[0] if len(blocks) == 1 else blocks[i]
        pieces.append(tape.matmul(r, tape.slice_rows(v, slice(i * b, (i + 1) * b))))
    return tape.concat_rows(pieces)


def block_residual(spec, blocks):
    """``||R^T R - I||_F`` of the full block-diagonal matrix from its blocks."""
    res = [linalg.ortho_residual(r) for r in blocks]
    if len(res) == 1:
        return res[0] * np.sqrt(spec.blocks)
    return float(np.sqrt(np.sum(np.square(res))))


def _cache_vjp(backward_fn):
    return lambda g, node, vals: (backward_fn(g, node.attrs["cache"]),)


def _gs_shape(shapes, attrs):
    n, m = shapes[0]
    if n < m:
        raise ShapeError(f"Gram-Schmidt needs rows >= cols, got {shapes[0]}")
    return shapes[0]


def _square_shape(shapes, attrs):
    if shapes[0][0] != shapes[0][1]:
        raise ShapeError(f"square matrix required, got {shapes[0]}")
    return shapes[0]


register_op("gram_schmidt", _gs_shape, _cache_vjp(_igs_backward))
register_op("cayley", _square_shape, _cayley_vjp)
register_op("cgs", _gs_shape, _cache_vjp(_cgs_backward))
register_op("mgs", _gs_shape, _cache_vjp(_mgs_backward))
register_op("householder", _square_shape, _cache_vjp(_householder_backward))
register_op("newton_schulz", _square_shape, _cache_vjp(_ns_backward))

__all__ = [
    "METHODS",
    "OrthoSpec",
    "Tape",
    "block_apply",
    "block_residual",
    "cayley",
    "cayley_node",
    "gram_schmidt",
    "householder_orthogonalize",
    "init_orthogonal_param",
    "iterative_gram_schmidt",
    "lowdin",
    "ogd_step",
    "orthogonal_matrix",
    "orthogonal_node",
    "orthogonal_parameter_count",
    "ortho_penalty",
]
