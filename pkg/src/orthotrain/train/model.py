"""Layer state, initialization, forward passes and weight materialization.

A layer maps ``h -> act(h @ W + b)`` with ``W`` of shape ``d x n``
(``n`` neurons of dimension ``d`` stored as columns). In OPT modes
``W = R @ V`` where ``V`` is drawn once and frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .. import linalg, ortho
from ..autodiff import Tape
from ..energy import hyperspherical_energy, normalize_neurons, refine_mhe
from ..errors import InfiniteEnergyError, ShapeError, StateCorruptionError
from .specs import ModelSpec

MODES = ("opt", "standard", "cls_opt", "upt", "sopt")


def array_hash(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


@dataclass
class LayerState:
    mode: str
    params: list  # trainable matrices: R parameter block(s), or [W] for standard layers
    bias: np.ndarray  # 1 x n
    activation: bool
    ortho: ortho.OrthoSpec | None = None
    v_fixed: np.ndarray | None = None  # d x n, never written after init
    v_hash: str = ""
    v_work: np.ndarray | None = None  # S-OPT working copy that rounds fold into
    dims: np.ndarray | None = None  # S-OPT coordinates of the current round

    @property
    def shape(self):
        if self.mode == "standard":
            return self.params[0].shape
        return self.v_fixed.shape

    def frozen_ok(self):
        return self.v_fixed is None or array_hash(self.v_fixed) == self.v_hash


@dataclass
class Model:
    spec: ModelSpec
    layers: list
    e0: list = field(default_factory=list)  # energy of each tracked layer at init
    energy_s: float = 1.0

    def tracked_layers(self):
        """Layers whose neuron energy is traced: the OPT-family ones, else the hidden ones."""
        idx = [i for i, l in enumerate(self.layers) if l.mode != "standard"]
        return idx or list(range(len(self.layers) - 1))

    def frozen_ok(self):
        return all(l.frozen_ok() for l in self.layers)


def _draw_neurons(spec, d, n, rng):
    if spec.init == "xavier":
        std = np.sqrt(2.0 / (d + n))
    else:
        std = spec.init_std or np.sqrt(2.0 / d)
    mean = spec.init_mean if spec.init == "normal" else 0.0
    return linalg.rand_gaussian(d, n, mean, std, rng)


def _refine(spec, v):
    # energy refinement first, then normalization
    if spec.refine in ("mhe", "both") and v.shape[1] > 1 and spec.refine_steps > 0:
        v = refine_mhe(v.T, spec.refine_steps, spec.refine_lr, spec.refine_s).T
    if spec.refine in ("normalize", "both"):
        v = normalize_neurons(v.T).T
    return np.ascontiguousarray(v)


def _layer_mode(spec, is_output):
    if spec.ortho is None:
        return "standard"
    if spec.cls_opt:
        return "cls_opt" if is_output else "standard"
    if is_output:
        return "standard"
    return "upt" if spec.ortho.method == "upt" else "opt"


def init_model(spec: ModelSpec, rng, energy_s=1.0):
    layers = []
    for li in range(spec.n_layers):
        d, n = spec.dims[li], spec.dims[li + 1]
        is_output = li == spec.n_layers - 1
        v = _refine(spec, _draw_neurons(spec, d, n, rng))
        mode = _layer_mode(spec, is_output)
        bias = np.zeros((1, n))
        if mode == "standard":
            layers.append(LayerState(mode, [v], bias, not is_output))
            continue
        os_ = spec.ortho
        b = os_.block_size(d)
        params = [ortho.init_orthogonal_param(os_, b, rng) for _ in range(os_.n_param_blocks())]
        v.setflags(write=False)
        layers.append(LayerState(mode, params, bias, not is_output, os_, v, array_hash(v)))
    model = Model(spec, layers, energy_s=energy_s)
    model.e0 = layer_energies(model)
    return model


# effective weights


def effective_weight(layer):
    if layer.mode == "standard":
        return layer.params[0]
    if layer.mode == "sopt":
        w = layer.v_work.copy()
        if layer.dims is not None:
            r_p = ortho.orthogonal_matrix(layer.ortho, layer.params[0])
            w[layer.dims] = r_p @ layer.v_work[layer.dims]
        return w
    return ortho.block_apply(layer.ortho, layer.params, layer.v_fixed)


def orthogonal_blocks(layer):
    """Current orthogonal factor(s) of an OPT-family layer."""
    if layer.mode == "standard":
        return []
    return [ortho.orthogonal_matrix(layer.ortho, p) for p in layer.params]


def materialize(model):
    """Per-layer ``(W_eff, bias)`` for an ordinary dense forward pass."""
    return [(np.ascontiguousarray(effective_weight(l)), l.bias.copy()) for l in model.layers]


def dense_forward(weights, x, activations):
    h = linalg.as_matrix(x, "x")
    for (w, b), act in zip(weights, activations):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"input width {h.shape[1]} != layer input {w.shape[0]}")
        h = h @ w + b
        if act:
            h = np.maximum(h, 0.0)
    return h


def predict_logits(model, x):
    return dense_forward(materialize(model), x, [l.activation for l in model.layers])


def parameter_counts(model):
    """Entries of each materialized weight matrix (what inference stores)."""
    return [int(np.prod(l.shape)) for l in model.layers]


def _traced_energy(w, s):
    # a layer whose neurons coincide (e.g. 1-d inputs) has infinite energy; tracing must not stop training
    try:
        return hyperspherical_energy(w.T, s)
    except InfiniteEnergyError:
        return math.inf


def layer_energies(model, s=None):
    s = model.energy_s if s is None else s
    return [_traced_energy(effective_weight(model.layers[i]), s) for i in model.tracked_layers()]


def layer_ortho_residuals(model):
    out = []
    for i in model.tracked_layers():
        layer = model.layers[i]
        if layer.mode == "standard":
            out.append(None)
            continue
        blocks = orthogonal_blocks(layer)
        if layer.mode == "sopt":
            out.append(float(linalg.ortho_residual(blocks[0])) if blocks else 0.0)
        else:
            out.append(float(ortho.block_residual(layer.ortho, blocks)))
    return out


# tape forward


def _weight_node(tape, layer, pnodes):
    if layer.mode == "standard":
        return pnodes[0]
    if layer.mode == "sopt":
        if layer.dims is None:
            return tape.constant(layer.v_work)
        d = layer.v_work.shape[0]
        r_p = ortho.orthogonal_node(tape, layer.ortho, pnodes[0])
        moved = tape.matmul(r_p, tape.constant(layer.v_work[layer.dims]))
        rest = layer.v_work.copy()
        rest[layer.dims] = 0.0
        return tape.add(tape.constant(rest), tape.scatter_rows(moved, layer.dims, d))
    return ortho.block_apply(layer.ortho, pnodes, tape.constant(layer.v_fixed), tape=tape)


@dataclass
class ForwardGraph:
    tape: Tape
    output: int
    slots: dict  # trainable node -> (layer index, param index or "bias")
    penalty_nodes: list  # parameter nodes of OR layers


def forward(model, x, tape=None):
    """Record the network on a tape; returns a :class:`ForwardGraph`."""
    tape = tape if tape is not None else Tape()
    x = linalg.as_matrix(x, "x")
    if x.shape[1] != model.spec.dims[0]:
        raise ShapeError(f"x has {x.shape[1]} columns, model expects {model.spec.dims[0]}")
    h = tape.constant(x)
    slots, penalty = {}, []
    for li, layer in enumerate(model.layers):
        pnodes = []
        for j, p in enumerate(layer.params):
            idx = tape.variable(p)
            slots[idx] = (li, j)
            pnodes.append(idx)
        if layer.ortho is not None and layer.ortho.method == "or" and layer.mode != "standard":
            penalty.extend(pnodes)
        b = tape.variable(layer.bias)
        slots[b] = (li, "bias")
        z = tape.add_row(tape.matmul(h, _weight_node(tape, layer, pnodes)), b)
        h = tape.relu(z) if layer.activation else z
    return ForwardGraph(tape, h, slots, penalty)


def loss_node(model, graph, labels):
    if model.spec.output == "least_squares":
        return graph.tape.least_squares(graph.output, labels)
    return graph.tape.softmax_ce(graph.output, labels)


def dataset_loss(model, x, y):
    """Mean data loss (no penalty terms) and classification error over a set."""
    z = predict_logits(model, x)
    y = np.asarray(y, dtype=np.int64)
    err = float(np.mean(np.argmax(z, axis=1) != y))
    if model.spec.output == "least_squares":
        target = np.zeros_like(z)
        target[np.arange(len(y)), y] = 1.0
        return float(np.sum((z - target) ** 2) / len(y)), err
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted[np.arange(len(y)), y] - np.log(np.sum(np.exp(shifted), axis=1))
    return float(-np.mean(logp)), err


def verify_frozen(model):
    for i, l in enumerate(model.layers):
        if not l.frozen_ok():
            raise StateCorruptionError(f"frozen neurons of layer {i} changed")
