"""Run-directory persistence in plain matrix text files (byte-stable across runs)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import linalg
from ..errors import FormatError
from ..io_utils import atomic_write_text
from .model import LayerState, Model, array_hash, materialize


def save_weights(model, directory):
    """Materialized ``W_eff`` and bias of every layer (what inference needs)."""
    directory = Path(directory)
    for i, (w, b) in enumerate(materialize(model)):
        linalg.write_matrix(directory / f"layer{i}_W.txt", w)
        linalg.write_matrix(directory / f"layer{i}_b.txt", b)


def save_state(model, directory):
    """Everything needed to rebuild the trained model for later evaluation."""
    directory = Path(directory)
    manifest = {"e0": model.e0, "energy_s": model.energy_s, "layers": []}
    for i, layer in enumerate(model.layers):
        entry = {"mode": layer.mode, "n_params": len(layer.params), "activation": layer.activation,
                 "v_hash": layer.v_hash}
        for j, p in enumerate(layer.params):
            linalg.write_matrix(directory / f"layer{i}_param{j}.txt", p)
        linalg.write_matrix(directory / f"layer{i}_bias.txt", layer.bias)
        if layer.v_fixed is not None:
            linalg.write_matrix(directory / f"layer{i}_v.txt", layer.v_fixed)
        if layer.v_work is not None:
            linalg.write_matrix(directory / f"layer{i}_vwork.txt", layer.v_work)
        manifest["layers"].append(entry)
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1) + "\n")


def load_state(spec, directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if len(manifest["layers"]) != spec.n_layers:
        raise FormatError(f"state has {len(manifest['layers'])} layers, config has {spec.n_layers}")
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        params = [linalg.read_matrix(directory / f"layer{i}_param{j}.txt") for j in range(entry["n_params"])]
        bias = linalg.read_matrix(directory / f"layer{i}_bias.txt")
        layer = LayerState(entry["mode"], params, bias, entry["activation"])
        if entry["mode"] != "standard":
            layer.ortho = spec.ortho
            v = linalg.read_matrix(directory / f"layer{i}_v.txt")
            if array_hash(v) != entry["v_hash"]:
                raise FormatError(f"layer {i}: stored neurons do not match their recorded hash")
            v.setflags(write=False)
            layer.v_fixed, layer.v_hash = v, entry["v_hash"]
            work = directory / f"layer{i}_vwork.txt"
            if work.exists():
                layer.v_work = np.array(linalg.read_matrix(work))
        layers.append(layer)
    return Model(spec, layers, e0=manifest["e0"], energy_s=manifest["energy_s"])
