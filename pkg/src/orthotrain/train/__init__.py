"""OPT training: models with ``W = R V`` layers, optimizers, S-OPT and landscapes."""

from .landscape import LandscapeGrid, dataset_objective, landscape_grid
from .loop import (
    MetricsRecord,
    MomentumSGD,
    TrainResult,
    batch_stream,
    load_dataset,
    prepare_sopt,
    sopt_round,
    train_run,
    train_step,
)
from .model import (
    LayerState,
    Model,
    dense_forward,
    effective_weight,
    forward,
    init_model,
    layer_energies,
    layer_ortho_residuals,
    materialize,
    parameter_counts,
    predict_logits,
)
from .specs import DataConfig, ModelSpec, OptimizerConfig, SOptConfig, TrainConfig

__all__ = [
    "DataConfig",
    "LandscapeGrid",
    "LayerState",
    "MetricsRecord",
    "Model",
    "ModelSpec",
    "MomentumSGD",
    "OptimizerConfig",
    "SOptConfig",
    "TrainConfig",
    "TrainResult",
    "batch_stream",
    "dataset_objective",
    "dense_forward",
    "effective_weight",
    "forward",
    "init_model",
    "landscape_grid",
    "layer_energies",
    "layer_ortho_residuals",
    "load_dataset",
    "materialize",
    "parameter_counts",
    "predict_logits",
    "prepare_sopt",
    "sopt_round",
    "train_run",
    "train_step",
]
