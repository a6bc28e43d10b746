"""TOML experiment configs mirroring :class:`TrainConfig` field names.

Schema (every key optional, defaults from the dataclasses)::

    seed = 0                  # 64-bit run seed
    batch = 100
    epochs = 20
    iterations = 0            # > 0 overrides epochs with a fixed iteration count
    weight_decay = 5e-4
    decay_targets = "classifier_only"   # or "all_dense"
    eval_every = 100

    [optimizer]
    lr = 0.01
    momentum = 0.9
    lr_step_every = 0
    lr_gamma = 0.1

    [model]
    dims = [784, 256, 256, 10]
    cls_opt = false
    activation = "relu"
    output = "softmax_ce"     # or "least_squares"
    init = "he"               # "xavier", "normal"
    init_mean = 0.0
    init_std = 0.0            # 0 means the He std
    refine = "none"           # "mhe", "normalize", "both"
    refine_steps = 0
    refine_lr = 0.1
    refine_s = 1.0

    [model.ortho]             # omit the table for standard training
    method = "gs"             # gs mgs igs hr ls cp ogd or upt
    igs_unroll = 2
    ls_iters = 12
    ls_tol = 1e-11
    ogd_fixed_point_iters = 2
    ogd_closed_form = false
    or_beta = 1e-3
    blocks = 1
    block_shared = false

    [sopt]                    # omit for plain OPT
    p = 4                     # count, or a float fraction of d
    n_out = 10
    n_in = 10
    full_first_layer = true

    [data]
    kind = "blobs"            # "two_rings", "mnist"
    n = 2000
    noise = 1.0
    features = 32
    classes = 4
    seed = 0
    path = ""                 # IDX directory for mnist
    train_limit = 0
    test_limit = 0

Unknown keys are errors. ``ls_tol = 0`` disables the Newton-Schulz early
stop (``ls_tol=None`` in :class:`OrthoSpec`).
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

import tomli_w

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .io_utils import atomic_write_text
from .ortho import OrthoSpec
from .train.specs import DataConfig, ModelSpec, OptimizerConfig, SOptConfig, TrainConfig

_NESTED = {
    (TrainConfig, "model"): ModelSpec,
    (TrainConfig, "optimizer"): OptimizerConfig,
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "sopt"): SOptConfig,
    (ModelSpec, "ortho"): OrthoSpec,
}


def _coerce(cls, name, value, where):
    hint = typing.get_type_hints(cls)[name]
    types = typing.get_args(hint) or (hint,)
    if bool in types:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{where}: unexpected boolean")
    if float in types and int not in types and isinstance(value, int):
        return float(value)
    if name == "dims":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list of widths")
        return tuple(value)
    return value


def _build(cls, table, path):
    if not isinstance(table, dict):
        raise ConfigError(f"[{path}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{path or 'top level'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in table.items():
        where = f"{path}.{name}" if path else name
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, where) if sub else _coerce(cls, name, value, where)
    if cls is OrthoSpec and kwargs.get("ls_tol") == 0:
        kwargs["ls_tol"] = None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{path}]: {exc}") from exc


def config_from_dict(data):
    return _build(TrainConfig, data, "")


def config_to_dict(cfg):
    def convert(obj):
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                if type(obj) is OrthoSpec and f.name == "ls_tol":
                    out[f.name] = 0.0
                continue
            if dataclasses.is_dataclass(value):
                value = convert(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    return convert(cfg)


def parse_config(text):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg):
    return tomli_w.dumps(config_to_dict(cfg))


def load_config(path):
    return parse_config(Path(path).read_text())


def save_config(path, cfg):
    atomic_write_text(path, dump_config(cfg))
