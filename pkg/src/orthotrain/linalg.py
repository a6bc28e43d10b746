"""Dense float64 linear-algebra core.

Matrices are plain C-ordered ``numpy.ndarray`` objects of dtype float64.
Every routine here is a pure function except the samplers, which advance
the :class:`RngState` they are given.

Random streams
--------------
All randomness goes through :class:`RngState`, a ``(seed, counter)`` pair
driving the Philox4x64-10 counter-based generator (computed by numpy's
``numpy.random.Philox(key=seed, counter=counter)``). ``counter`` counts
consumed Philox blocks; one block yields four 64-bit words. A draw of ``k``
words at counter ``c`` takes blocks ``b = 0 .. ceil(k/4) - 1``, block ``b``
being the four output words ``x0..x3`` of Philox4x64-10 with 10 rounds,
counter ``(c + 1 + b, 0, 0, 0)`` and key ``(seed, 0)``; surplus words are
dropped and the counter advances by ``ceil(k / 4)``. The stream is
therefore a function of ``(seed, counter)`` alone. Uniform doubles are
``(word >> 11) * 2**-53``; Gaussians use the Box-Muller transform on
consecutive uniform pairs ``(a, b)`` with ``u1 = 1 - a`` and ``u2 = b``,
emitting ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` where
``r = sqrt(-2 log u1)``.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    ConvergenceError,
    FormatError,
    RankDeficiencyError,
    ShapeError,
    SingularMatrixError,
)

PIVOT_RTOL = 1e-14


def as_matrix(a, name="matrix"):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def frobenius(a):
    return float(np.sqrt(np.sum(np.square(a))))


def ortho_residual(r):
    """``||R^T R - I||_F``."""
    r = as_matrix(r)
    return frobenius(r.T @ r - np.eye(r.shape[1]))


def lu_factor(a):
    """LU with partial pivoting; raises on a pivot below ``1e-14 * ||a||_F``."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"LU needs a square matrix, got {a.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)  # reported below as an error
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    threshold = PIVOT_RTOL * frobenius(a)
    pivots = np.abs(np.diag(lu))
    if a.size == 0 or np.any(pivots < threshold) or not np.all(np.isfinite(pivots)):
        k = int(np.argmin(pivots)) if a.size else 0
        raise SingularMatrixError(f"singular pivot at step {k}: |pivot|={pivots[k]:.3e}")
    return lu, piv


def solve(a, b):
    """Solve ``a @ x = b`` via LU with partial pivoting."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve shape mismatch: {a.shape} vs rhs {b.shape}")
    lu, piv = lu_factor(a)
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def det(a):
    """Determinant from the pivoted LU factors."""
    lu, piv = lu_factor(a)
    swaps = int(np.sum(piv != np.arange(len(piv))))
    return float((-1) ** swaps * np.prod(np.diag(lu)))


def _householder_v1(x, sigma2):
    mu = math.sqrt(x[0] * x[0] + sigma2)
    if x[0] <= 0:
        return x[0] - mu
    return -sigma2 / (x[0] + mu)


def householder_vector(x):
    """Householder vector ``v`` (with ``v[0] == 1``) and ``beta`` for ``x``.

    ``(I - beta v v^T) x = ||x|| e_1``. The branch on ``x[0] <= 0`` avoids
    cancellation when forming ``x[0] - ||x||``.
    """
    sigma2 = float(x[1:] @ x[1:])
    v = np.array(x, dtype=np.float64, copy=True)
    v[0] = 1.0
    if sigma2 == 0.0:
        return v, 0.0
    v1 = _householder_v1(x, sigma2)
    beta = 2.0 * v1 * v1 / (sigma2 + v1 * v1)
    v[1:] = x[1:] / v1
    return v, beta


def householder_reflector(x):
    """Unnormalized reflector ``w = x - ||x|| e_1`` (``None`` when ``beta == 0``).

    ``I - 2 w w^T / (w^T w)`` equals ``I - beta v v^T`` from
    :func:`householder_vector`; ``w[0]`` uses the same cancellation-free branch.
    """
    sigma2 = float(x[1:] @ x[1:])
    if sigma2 == 0.0:
        return None
    w = np.array(x, dtype=np.float64, copy=True)
    w[0] = _householder_v1(x, sigma2)
    return w


def householder_qr(u, return_reflectors=False):
    """Householder QR, ``u = Q @ R``, with the sign convention above.

    Reflections are applied for columns ``0 .. n-2``; the last diagonal entry
    of ``R`` keeps whatever sign elimination leaves it with. A column that is
    exactly zero on and below the diagonal raises :class:`RankDeficiencyError`.
    """
    a = as_matrix(u, "u").copy()
    n, m = a.shape
    if n != m:
        raise ShapeError(f"householder_qr needs a square matrix, got {a.shape}")
    ws = []
    for j in range(n):
        x = a[j:, j]
        if x[0] == 0.0 and not np.any(x[1:]):
            raise RankDeficiencyError(j)
        if j == n - 1:
            break
        w = householder_reflector(x)
        ws.append(w)
        if w is not None:
            a[j:, j:] -= (2.0 / (w @ w)) * np.outer(w, w @ a[j:, j:])
            a[j + 1:, j] = 0.0
    q = np.eye(n)
    for j in range(n - 2, -1, -1):
        w = ws[j]
        if w is not None:
            q[j:, j:] -= (2.0 / (w @ w)) * np.outer(w, w @ q[j:, j:])
    if return_reflectors:
        return q, a, ws
    return q, a


def newton_schulz_polar(u, max_iters=30, tol=1e-11):
    """Orthogonal polar factor of a square full-rank ``u``.

    ``u`` is scaled by ``1 / ||u||_F`` and iterated as
    ``X <- X (3I - X^T X) / 2`` until ``||X^T X - I||_F <= tol``.
    """
    u = as_matrix(u, "u")
    if u.shape[0] != u.shape[1]:
        raise ShapeError(f"polar factor needs a square matrix, got {u.shape}")
    lu_factor(u)  # rank check
    eye = np.eye(u.shape[0])
    x = u / frobenius(u)
    residual = frobenius(x.T @ x - eye)
    for _ in range(max_iters):
        if residual <= tol:
            return x
        x = 0.5 * x @ (3.0 * eye - x.T @ x)
        residual = frobenius(x.T @ x - eye)
    if residual <= tol:
        return x
    raise ConvergenceError(f"Newton-Schulz did not converge in {max_iters} iterations", residual)


@dataclass
class RngState:
    """Position in a Philox4x64-10 stream; see the module docstring."""

    seed: int
    counter: int = 0

    def raw(self, k):
        blocks = -(-k // 4)
        gen = np.random.Philox(key=int(self.seed) & (2**64 - 1), counter=int(self.counter))
        words = gen.random_raw(4 * blocks)
        self.counter += blocks
        return words[:k]

    def uniform(self, k):
        return (self.raw(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, k):
        pairs = -(-k // 2)
        uv = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - uv[:, 0]))
        theta = 2.0 * np.pi * uv[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:k]

    def permutation_subset(self, n, p):
        """``p`` distinct indices from ``range(n)`` (partial Fisher-Yates), sorted."""
        idx = np.arange(n)
        u = self.uniform(p)
        for i in range(p):
            j = i + int(u[i] * (n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return np.sort(idx[:p])

    def spawn(self, stream):
        """Independent child state for a named integer sub-stream."""
        mixed = (int(self.seed) * 0x9E3779B97F4A7C15 + int(stream) * 0xBF58476D1CE4E5B9 + 1) % 2**64
        return RngState(seed=mixed, counter=0)


def rand_uniform(rows, cols, rng):
    return rng.uniform(rows * cols).reshape(rows, cols)


def rand_gaussian(rows, cols, mean=0.0, std=1.0, rng=None):
    if std <= 0:
        raise ValueError("std must be positive")
    if rng is None:
        raise ValueError("an RngState is required")
    return mean + std * rng.normal(rows * cols).reshape(rows, cols)


def rand_orthogonal(n, rng):
    """Haar-distributed orthogonal ``n x n`` matrix.

    Householder QR of a Gaussian matrix, with columns of ``Q`` flipped so
    the triangular factor has a positive diagonal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rand_gaussian(n, n, 0.0, 1.0, rng)
    q, r = householder_qr(g)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q * signs)


def format_matrix(a):
    a = as_matrix(a)
    buf = io.StringIO()
    buf.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        buf.write(" ".join(f"{x:.17g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def parse_matrix(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty matrix text")
    try:
        rows, cols = (int(t) for t in lines[0].split())
        data = [[float(t) for t in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"malformed matrix text: {exc}") from exc
    if len(data) != rows or any(len(r) != cols for r in data):
        raise FormatError(f"matrix text does not match header {rows}x{cols}")
    return np.array(data, dtype=np.float64).reshape(rows, cols)


def write_matrix(path, a):
    from .io_utils import atomic_write_text

    atomic_write_text(path, format_matrix(a))


def read_matrix(path):
    return parse_matrix(Path(path).read_text())
