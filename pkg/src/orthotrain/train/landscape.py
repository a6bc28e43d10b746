"""2-D loss surface around trained parameters along filter-normalized directions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import linalg
from ..errors import ConfigError
from .model import dataset_loss


@dataclass(frozen=True)
class LandscapeGrid:
    alpha_range: tuple = (-1.0, 1.0)
    beta_range: tuple = (-1.0, 1.0)
    steps: int = 11

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("grid needs at least one step per axis")

    def axis(self, lo, hi):
        vals = np.linspace(lo, hi, self.steps)
        vals[np.abs(vals) <= 1e-12 * max(abs(lo), abs(hi), 1.0)] = 0.0  # keep the center exact
        return vals


def dataset_objective(data):
    """``model -> (training loss, test error)`` over full dataset splits."""

    def evaluate(model):
        loss, _ = dataset_loss(model, data.x_train, data.y_train)
        _, err = dataset_loss(model, data.x_test, data.y_test)
        return loss, err

    return evaluate


def _trainable_slots(model):
    return [(li, j) for li, layer in enumerate(model.layers) for j in range(len(layer.params))]


def filter_normalized_direction(theta, rng):
    """Gaussian direction with each column rescaled to the norm of ``theta``'s column."""
    d = linalg.rand_gaussian(theta.shape[0], theta.shape[1], 0.0, 1.0, rng)
    dn = np.sqrt(np.sum(d * d, axis=0))
    tn = np.sqrt(np.sum(theta * theta, axis=0))
    scale = np.divide(tn, dn, out=np.zeros_like(tn), where=dn > 0)
    return d * scale


def landscape_grid(model, loss_fn, grid: LandscapeGrid, rng):
    """Rows ``(alpha, beta, loss, test_error)`` of ``loss_fn`` at ``theta + alpha d1 + beta d2``.

    ``theta`` is the set of trainable matrices (biases excluded). The model is
    restored to its original arrays afterwards.
    """
    slots = _trainable_slots(model)
    saved = {s: model.layers[s[0]].params[s[1]] for s in slots}
    d1 = {s: filter_normalized_direction(saved[s], rng) for s in slots}
    d2 = {s: filter_normalized_direction(saved[s], rng) for s in slots}
    rows = []
    try:
        for a in grid.axis(*grid.alpha_range):
            for b in grid.axis(*grid.beta_range):
                for s in slots:
                    model.layers[s[0]].params[s[1]] = saved[s] + a * d1[s] + b * d2[s]
                loss, err = loss_fn(model)
                rows.append((float(a), float(b), float(loss), float(err)))
    finally:
        for s in slots:
            model.layers[s[0]].params[s[1]] = saved[s]
    return rows


def format_landscape_csv(rows):
    lines = ["alpha,beta,loss,test_err"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in rows]
    return "\n".join(lines) + "\n"
