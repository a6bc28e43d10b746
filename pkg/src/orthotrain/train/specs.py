"""Frozen configuration records for models and training runs."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError
from ..ortho import OrthoSpec

INITS = ("he", "xavier", "normal")
REFINES = ("none", "mhe", "normalize", "both")
OUTPUTS = ("softmax_ce", "least_squares")
DECAY_TARGETS = ("classifier_only", "all_dense")
DATA_KINDS = ("blobs", "two_rings", "mnist")


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths plus how hidden neurons are parameterized.

    ``ortho=None`` is standard training. Otherwise every hidden layer is
    ``W = R V`` with ``R`` built by ``ortho.method`` (``upt`` leaves ``R``
    unconstrained). With ``cls_opt`` the hidden layers are standard and only
    the output layer is ``R V``.
    """

    dims: tuple = (32, 32, 32, 4)
    ortho: OrthoSpec | None = None
    cls_opt: bool = False
    activation: str = "relu"
    output: str = "softmax_ce"
    init: str = "he"
    init_mean: float = 0.0
    init_std: float = 0.0  # 0 picks the He std
    refine: str = "none"
    refine_steps: int = 0
    refine_lr: float = 0.1
    refine_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ConfigError(f"dims must list at least two positive widths, got {self.dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ConfigError(f"output must be one of {OUTPUTS}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if self.init != "normal" and self.init_mean != 0.0:
            raise ConfigError("init_mean is only used with init='normal'")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        if self.refine not in REFINES:
            raise ConfigError(f"refine must be one of {REFINES}")
        if self.cls_opt and self.ortho is None:
            raise ConfigError("cls_opt needs an ortho spec for the output layer")

    @property
    def n_layers(self):
        return len(self.dims) - 1


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_step_every: int = 0  # step decay period in iterations (S-OPT: outer rounds); 0 disables
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and 0 <= momentum < 1")
        if self.lr_step_every < 0 or self.lr_gamma <= 0:
            raise ConfigError("need lr_step_every >= 0 and lr_gamma > 0")


@dataclass(frozen=True)
class SOptConfig:
    """``p`` is a count (int) or a fraction of each layer's input dimension (float < 1)."""

    p: int | float = 4
    n_out: int = 10
    n_in: int = 10
    full_first_layer: bool = True

    def __post_init__(self):
        if self.p <= 0 or self.n_out < 0 or self.n_in < 0:
            raise ConfigError("sopt needs p > 0 and non-negative n_out/n_in")
        if isinstance(self.p, float) and self.p > 1:
            raise ConfigError("a fractional p must lie in (0, 1]")

    def dims_for(self, d):
        p = max(1, int(round(self.p * d))) if isinstance(self.p, float) else int(self.p)
        if p > d:
            raise ConfigError(f"sopt p={p} exceeds neuron dimension {d}")
        return p


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"
    n: int = 2000
    noise: float = 1.0
    features: int = 32
    classes: int = 4
    seed: int = 0
    path: str = ""
    train_limit: int = 0
    test_limit: int = 0

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATA_KINDS}")
        if self.kind == "mnist" and not self.path:
            raise ConfigError("mnist dataset needs a path")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sopt: SOptConfig | None = None
    batch: int = 100
    epochs: int = 1
    iterations: int = 0  # fixed iteration count; 0 means run `epochs` full passes
    weight_decay: float = 0.0
    decay_targets: str = "classifier_only"
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 0 or self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("need batch >= 1, epochs >= 0, iterations >= 0, eval_every >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.decay_targets not in DECAY_TARGETS:
            raise ConfigError(f"decay_targets must be one of {DECAY_TARGETS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.sopt is not None:
            if self.model.ortho is None or self.model.cls_opt:
                raise ConfigError("sopt needs OPT hidden layers")
            if self.model.ortho.blocks != 1:
                raise ConfigError("sopt does not combine with block-diagonal R")
