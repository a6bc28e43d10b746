"""Momentum SGD training, S-OPT rounds and per-iteration metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import linalg, ortho
from ..autodiff import backward
from ..data import load_mnist, synth_dataset
from ..errors import ConfigError, StateCorruptionError
from .model import (
    dataset_loss,
    forward,
    init_model,
    layer_energies,
    layer_ortho_residuals,
    loss_node,
)
from .specs import TrainConfig

OGD_REORTHO_TOL = 1e-9  # Lowdin re-orthonormalization threshold for OGD iterates
FOLD_ENERGY_TOL = 1e-9


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    train_loss: float
    test_error: float
    per_layer_energy: list
    per_layer_ortho_residual: list
    wall_ms: float = 0.0

    def to_dict(self):
        return {
            "iter": self.iteration,
            "epoch": self.epoch,
            "loss": self.train_loss if math.isfinite(self.train_loss) else None,
            "test_err": self.test_error,
            "energy": [e if math.isfinite(e) else None for e in self.per_layer_energy],
            "ortho_res": list(self.per_layer_ortho_residual),
            "wall_ms": self.wall_ms,
        }

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass
class TrainResult:
    records: list
    model: object
    frozen_ok: bool
    diverged: bool = False
    message: str = ""
    fold_deviations: list = field(default_factory=list)


def load_dataset(cfg, base_dir=None):
    """Build or load the dataset named by a :class:`DataConfig`."""
    if cfg.kind == "mnist":
        path = Path(cfg.path)
        if not path.is_absolute() and not path.exists() and base_dir is not None:
            path = Path(base_dir) / path
        return load_mnist(path, cfg.train_limit, cfg.test_limit)
    return synth_dataset(cfg.kind, cfg.n, cfg.noise, linalg.RngState(cfg.seed), cfg.features, cfg.classes)


def batch_stream(x, y, batch, rng):
    """Endless ``(epoch, x_batch, y_batch)`` minibatches, reshuffled every epoch."""
    n = len(y)
    epoch = 0
    while True:
        order = np.argsort(rng.uniform(n), kind="stable")
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            yield epoch, x[idx], y[idx]
        epoch += 1


class MomentumSGD:
    """Heavy-ball SGD, ``v <- mu v + g``, ``theta <- theta - lr v``.

    Orthogonal parameters of OGD layers instead move along the Cayley curve
    generated by ``-v`` and are re-orthonormalized when they drift.
    """

    def __init__(self, lr, momentum=0.9, weight_decay=0.0, decay_targets="classifier_only"):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_targets = decay_targets
        self.velocity = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig):
        return cls(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.weight_decay, cfg.decay_targets)

    def decays(self, model, li, slot):
        layer = model.layers[li]
        if slot == "bias" or self.weight_decay == 0:
            return False
        if layer.mode == "upt":
            return True
        if layer.mode != "standard":
            return False
        return self.decay_targets == "all_dense" or li == len(model.layers) - 1

    def reset(self, li):
        for key in [k for k in self.velocity if k[0] == li]:
            del self.velocity[key]

    def step(self, model, grads, lr=None):
        lr = self.lr if lr is None else lr
        for (li, slot), g in grads.items():
            layer = model.layers[li]
            theta = layer.bias if slot == "bias" else layer.params[slot]
            if self.decays(model, li, slot):
                g = g + self.weight_decay * theta
            v = self.velocity.get((li, slot))
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[(li, slot)] = v
            if slot != "bias" and layer.mode != "standard" and layer.ortho.method == "ogd":
                spec = layer.ortho
                new = ortho.ogd_step(theta, -v, lr, spec.ogd_fixed_point_iters, spec.ogd_closed_form)
                if linalg.ortho_residual(new) > OGD_REORTHO_TOL:
                    new = ortho.lowdin(new)
            else:
                new = theta - lr * v
            if not np.all(np.isfinite(new)):
                raise FloatingPointError(f"non-finite parameter in layer {li} after the update")
            if slot == "bias":
                layer.bias = new
            else:
                layer.params[slot] = new


def train_step(model, optimizer, xb, yb, lr=None):
    """One minibatch update; returns the minibatch objective before the update."""
    graph = forward(model, xb)
    tape = graph.tape
    total = loss_node(model, graph, yb)
    for p in graph.penalty_nodes:
        beta = model.layers[graph.slots[p][0]].ortho.or_beta
        total = tape.add(total, tape.scale(ortho.ortho_penalty(tape, p), beta))
    value = float(tape.value(total)[0, 0])
    if not math.isfinite(value):
        return value
    grads = backward(tape, total)
    optimizer.step(model, {graph.slots[i]: g for i, g in grads.items()}, lr)
    return value


def _sopt_layers(model):
    return [i for i, l in enumerate(model.layers) if l.mode == "sopt"]


def prepare_sopt(model, sopt):
    """Switch hidden OPT layers to S-OPT (the first keeps full OPT if requested)."""
    for i, layer in enumerate(model.layers):
        if layer.mode != "opt" or (i == 0 and sopt.full_first_layer):
            continue
        sopt.dims_for(layer.v_fixed.shape[0])
        layer.mode = "sopt"
        layer.v_work = np.array(layer.v_fixed)
        layer.params = []
        layer.dims = None
    return model


def sopt_round(model, p_spec, n_in, optimizer, data_stream, rng, lr=None, after_step=None):
    """One outer S-OPT round over every S-OPT layer.

    Each layer draws ``p`` distinct coordinates, trains ``R_p`` (started at
    the identity) for ``n_in`` iterations together with the non-OPT
    parameters, then folds ``R_p`` into the selected rows of its working
    neurons. Returns the per-layer relative energy change across the round.
    """
    layers = _sopt_layers(model)
    if not layers:
        raise ConfigError("model has no S-OPT layers")
    before = layer_energies(model)
    for li in layers:
        layer = model.layers[li]
        d = layer.v_work.shape[0]
        p = p_spec.dims_for(d) if hasattr(p_spec, "dims_for") else int(p_spec)
        if p > d:
            raise ConfigError(f"p={p} exceeds neuron dimension {d}")
        layer.dims = rng.permutation_subset(d, p)
        layer.params = [ortho.init_orthogonal_param(layer.ortho, p, rng, identity=True)]
        optimizer.reset(li)
    for _ in range(n_in):
        epoch, xb, yb = next(data_stream)
        loss = train_step(model, optimizer, xb, yb, lr)
        if after_step is not None and after_step(epoch, loss) is False:
            break
    for li in layers:
        layer = model.layers[li]
        r_p = ortho.orthogonal_matrix(layer.ortho, layer.params[0])
        layer.v_work[layer.dims] = r_p @ layer.v_work[layer.dims]
        layer.dims = None
        layer.params = []
        optimizer.reset(li)
    after = layer_energies(model)
    deviations = [abs(a - b) / abs(b) for a, b in zip(after, before)]
    method = model.layers[layers[0]].ortho.method
    if method in ortho.EXACT and max(deviations) > FOLD_ENERGY_TOL:
        raise StateCorruptionError(f"S-OPT fold changed the energy by {max(deviations):.3e}")
    return deviations


class _Diverged(Exception):
    pass


class _Runner:
    def __init__(self, cfg, model, data, on_record):
        self.cfg = cfg
        self.model = model
        self.data = data
        self.on_record = on_record
        self.records = []
        self.iteration = 0
        self.epoch = 0
        self.start = time.perf_counter()

    def evaluate(self, loss=None):
        if loss is None:
            loss, _ = dataset_loss(self.model, self.data.x_train, self.data.y_train)
            _, err = dataset_loss(self.model, self.data.x_test, self.data.y_test)
            energy = layer_energies(self.model)
            res = layer_ortho_residuals(self.model)
        else:  # divergence diagnostic: no finite state to measure
            err, energy, res = math.nan, [], []
        rec = MetricsRecord(self.iteration, self.epoch, loss, err, energy, res,
                            wall_ms=round(1000.0 * (time.perf_counter() - self.start), 3))
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)

    def after_step(self, epoch, loss):
        self.iteration += 1
        self.epoch = epoch
        if not math.isfinite(loss):
            self.evaluate(loss)
            raise _Diverged(f"non-finite loss at iteration {self.iteration}")
        if self.iteration % self.cfg.eval_every == 0:
            self.evaluate()


def train_run(cfg: TrainConfig, dataset=None, on_record=None, base_dir=None):
    """Train from scratch under ``cfg``; metrics every ``eval_every`` iterations.

    Records are also passed to ``on_record`` as they are produced. A
    non-finite loss stops the run with a diagnostic record (loss ``NaN``)
    and ``diverged=True``.
    """
    root = linalg.RngState(cfg.seed)
    data = dataset if dataset is not None else load_dataset(cfg.data, base_dir)
    if data.n_features != cfg.model.dims[0] or data.num_classes != cfg.model.dims[-1]:
        raise ConfigError(
            f"model dims {cfg.model.dims} do not fit {data.n_features} features / {data.num_classes} classes"
        )
    model = init_model(cfg.model, root.spawn(1))
    stream = batch_stream(data.x_train, data.y_train, cfg.batch, root.spawn(2))
    optimizer = MomentumSGD.from_config(cfg)
    run = _Runner(cfg, model, data, on_record)
    run.evaluate()
    deviations, message, diverged = [], "", False
    opt_cfg = cfg.optimizer

    def lr_at(counter):
        if opt_cfg.lr_step_every:
            return opt_cfg.lr * opt_cfg.lr_gamma ** (counter // opt_cfg.lr_step_every)
        return opt_cfg.lr

    try:
        if cfg.sopt is not None:
            prepare_sopt(model, cfg.sopt)
            sopt_rng = root.spawn(3)
            for r in range(cfg.sopt.n_out):
                deviations.append(
                    sopt_round(model, cfg.sopt, cfg.sopt.n_in, optimizer, stream, sopt_rng, lr_at(r), run.after_step)
                )
        else:
            per_epoch = -(-len(data.y_train) // cfg.batch)
            total = cfg.iterations or cfg.epochs * per_epoch
            for _ in range(total):
                epoch, xb, yb = next(stream)
                run.after_step(epoch, train_step(model, optimizer, xb, yb, lr_at(run.iteration)))
    except _Diverged as exc:
        diverged, message = True, str(exc)
    except (ArithmeticError, FloatingPointError) as exc:
        diverged, message = True, f"numerical failure at iteration {run.iteration}: {exc}"
        run.evaluate(math.nan)
    if not diverged and (not run.records or run.records[-1].iteration != run.iteration):
        run.evaluate()
    return TrainResult(run.records, model, model.frozen_ok(), diverged, message, deviations)
