"""Hyperspherical energy of neuron sets and related diagnostics.

Neurons are the *rows* of ``v`` (``n x d``). The energy is taken over the
row directions ``x_i = v_i / ||v_i||`` and summed over ordered pairs::

    E_s = sum_{i != j} ||x_i - x_j||^-s          (s > 0)
    E_0 = sum_{i != j} log(1 / ||x_i - x_j||)    (s = 0)

The half-space variant augments the set with the antipodes ``-x_i`` and
sums over the ``2n`` points, skipping each point's own antipode.

For points drawn uniformly on S^2 the chord length ``r`` has density
``r / 2`` on ``[0, 2]``, so ``E[r^-s] = 2^(1-s) / (2 - s)`` for ``s < 2``
(1 for ``s = 1``) and ``E[-log r] = 1/2 - log 2``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .autodiff import register_op
from .errors import ConfigError, DegenerateInputError, InfiniteEnergyError, ShapeError

NORM_MIN = 1e-12
CHORD_MIN = 1e-12
MC_REFERENCE_DRAWS = 10_000


@dataclass(frozen=True)
class EnergyReport:
    s: float
    value: float
    min_angle: float
    n: int
    d: int
    half_space: bool
    uniform_ratio: float | None = None

    def to_json(self):
        return json.dumps(
            {
                "s": self.s,
                "value": self.value,
                "min_angle": self.min_angle,
                "n": self.n,
                "d": self.d,
                "half_space": self.half_space,
            }
        )


def normalize_neurons(v):
    """Scale every row to unit norm."""
    v = linalg.as_matrix(v, "v")
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if np.any(norms < NORM_MIN):
        raise DegenerateInputError("zero-norm neuron cannot be normalized")
    return v / norms


def _check_neurons(v):
    v = linalg.as_matrix(v, "v")
    if v.shape[0] < 2:
        raise ShapeError(f"energy needs at least two neurons, got {v.shape[0]}")
    return v


def _terms(dist, s):
    if s == 0:
        return -np.log(dist)
    return dist ** (-s)


def hyperspherical_energy(v, s=1.0, half_space=False):
    """s-energy of the row directions of ``v`` over ordered pairs.

    Pair terms are accumulated with :func:`math.fsum`, so the result does not
    depend on row order.
    """
    if s < 0:
        raise ConfigError("s must be >= 0")
    x = normalize_neurons(_check_neurons(v))
    n = x.shape[0]
    parts = []
    for i in range(n - 1):
        minus = np.sqrt(np.sum(np.square(x[i] - x[i + 1:]), axis=1))
        if np.min(minus) < CHORD_MIN:
            raise InfiniteEnergyError(f"neuron {i} coincides with another neuron")
        parts.append(_terms(minus, s))
        if half_space:
            plus = np.sqrt(np.sum(np.square(x[i] + x[i + 1:]), axis=1))
            if np.min(plus) < CHORD_MIN:
                raise InfiniteEnergyError(f"neuron {i} is antipodal to another neuron")
            parts.append(_terms(plus, s))
    total = math.fsum(np.concatenate(parts).tolist())
    return (4.0 if half_space else 2.0) * total


def energy_gradient(v, s=1.0, half_space=False):
    """Gradient of :func:`hyperspherical_energy` with respect to the rows of ``v``."""
    v = _check_neurons(v)
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if np.any(norms < NORM_MIN):
        raise DegenerateInputError("zero-norm neuron")
    x = v / norms
    gram = x @ x.T

    def coeffs(sign):
        # squared chords from the Gram matrix, ||x_i - sign x_j||^2 = 2 - 2 sign <x_i, x_j>
        d2 = np.maximum(2.0 - 2.0 * sign * gram, CHORD_MIN**2)
        np.fill_diagonal(d2, 1.0)
        c = -1.0 / d2 if s == 0 else -s * d2 ** (-0.5 * s - 1.0)
        np.fill_diagonal(c, 0.0)
        return c

    c = coeffs(1.0)
    gx = 2.0 * (c.sum(axis=1, keepdims=True) * x - c @ x)
    if half_space:
        cp = coeffs(-1.0)
        gx = 2.0 * gx + 4.0 * (cp.sum(axis=1, keepdims=True) * x + cp @ x)
    return (gx - x * np.sum(gx * x, axis=1, keepdims=True)) / norms


def energy_node(tape, v, s=1.0, half_space=False):
    """Record the energy of node ``v``'s rows as a scalar tape node."""
    val = hyperspherical_energy(tape.value(v), s, half_space)
    return tape.record("hyperspherical_energy", (v,), np.array([[val]]), s=s, half_space=half_space)


register_op(
    "hyperspherical_energy",
    lambda shapes, attrs: (1, 1),
    lambda g, node, vals: (g[0, 0] * energy_gradient(vals[0], node.attrs["s"], node.attrs["half_space"]),),
)


def _relative_change(before, after):
    return abs(after - before) / abs(before)


def energy_invariance_check(v, r, s=1.0, tol=1e-10):
    """Relative energy change when every normalized row is rotated by ``r``."""
    r = linalg.as_matrix(r, "r")
    res = linalg.ortho_residual(r)
    if res > tol:
        raise ValueError(f"r is not orthogonal (residual {res:.3e})")
    x = normalize_neurons(v)
    return _relative_change(hyperspherical_energy(x, s), hyperspherical_energy(x @ r.T, s))


def subset_invariance_check(v, dims, r_p, s=1.0, tol=1e-10):
    """Relative energy change after rotating only the coordinates ``dims`` of each row."""
    dims = np.asarray(dims, dtype=np.int64)
    if len(np.unique(dims)) != len(dims):
        raise ConfigError("dims must be distinct")
    r_p = linalg.as_matrix(r_p, "r_p")
    if r_p.shape != (len(dims), len(dims)):
        raise ShapeError(f"r_p shape {r_p.shape} does not match {len(dims)} dims")
    res = linalg.ortho_residual(r_p)
    if res > tol:
        raise ValueError(f"r_p is not orthogonal (residual {res:.3e})")
    x = normalize_neurons(v)
    y = x.copy()
    y[:, dims] = x[:, dims] @ r_p.T
    return _relative_change(hyperspherical_energy(x, s), hyperspherical_energy(y, s))


def refine_mhe(v, steps, lr, s=1.0, half_space=False, max_halvings=20, return_history=False):
    """Lower the energy of ``v`` by projected gradient descent on the row directions.

    After each step rows are rescaled back to their original norms. A step
    that raises the energy is retried with half the step size, up to
    ``max_halvings`` times; if none is accepted the best iterate so far is
    returned with a warning.
    """
    v = _check_neurons(v).copy()
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    energy = hyperspherical_energy(v, s, half_space)
    history = [energy]
    for step in range(steps):
        grad = energy_gradient(v, s, half_space)
        eta = lr
        for _ in range(max_halvings + 1):
            cand = v - eta * grad
            cand = cand / np.sqrt(np.sum(cand * cand, axis=1, keepdims=True)) * norms
            try:
                e_new = hyperspherical_energy(cand, s, half_space)
            except InfiniteEnergyError:
                e_new = math.inf
            if e_new <= energy:
                break
            eta *= 0.5
        else:
            warnings.warn(f"refine_mhe stalled at step {step}: no decrease after {max_halvings} halvings")
            break
        v, energy = cand, e_new
        history.append(energy)
    return (v, history) if return_history else v


def min_angle(v):
    """Separation distance: the smallest pairwise angle between row directions."""
    x = normalize_neurons(_check_neurons(v))
    cos = x @ x.T
    np.fill_diagonal(cos, -np.inf)
    return float(np.arccos(np.clip(np.max(cos), -1.0, 1.0)))


def expected_pair_term(d, s, rng=None, draws=MC_REFERENCE_DRAWS):
    """``E[||u - w||^-s]`` (or ``E[-log||u - w||]``) for independent uniform points on S^(d-1).

    Closed form on S^2; a Monte Carlo estimate elsewhere. Returns ``None``
    where the expectation diverges on S^2 (``s >= 2``).
    """
    if d == 3:
        if s == 0:
            return 0.5 - math.log(2.0)
        if s >= 2:
            return None
        return 2.0 ** (1.0 - s) / (2.0 - s)
    rng = rng if rng is not None else linalg.RngState(seed=0)
    u = normalize_neurons(linalg.rand_gaussian(draws, d, 0.0, 1.0, rng))
    w = normalize_neurons(linalg.rand_gaussian(draws, d, 0.0, 1.0, rng))
    dist = np.sqrt(np.sum(np.square(u - w), axis=1))
    return float(np.mean(_terms(dist, s)))


def uniformity_diagnostics(v, s=1.0, half_space=False, rng=None):
    v = _check_neurons(v)
    n, d = v.shape
    value = hyperspherical_energy(v, s, half_space)
    mean_term = expected_pair_term(d, s, rng)
    ratio = None
    if mean_term is not None:
        # ordered pairs: n(n-1), or 2n(2n-2) once antipodes are added
        pairs = n * (n - 1) * (4 if half_space else 1)
        ratio = value / (pairs * mean_term)
    return EnergyReport(s=s, value=value, min_angle=min_angle(v), n=n, d=d, half_space=half_space, uniform_ratio=ratio)
