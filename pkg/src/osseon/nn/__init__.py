"""Tensor engine, network architectures, and the two-phase trainer."""

from .model import (
    CUNet,
    LayerSpec,
    Model,
    PENet,
    Tensor,
    build_cunet,
    build_pe,
    load_model,
    save_model,
)
from .train import (
    LogRow,
    OptimState,
    TrainConfig,
    TrainResult,
    adam_step,
    train_two_phase,
    write_loss_log,
)

__all__ = [
    "CUNet",
    "LayerSpec",
    "Model",
    "PENet",
    "Tensor",
    "build_cunet",
    "build_pe",
    "load_model",
    "save_model",
    "LogRow",
    "OptimState",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "train_two_phase",
    "write_loss_log",
]
