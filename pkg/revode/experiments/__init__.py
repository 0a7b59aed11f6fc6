from ..losses import mse_loss
from .datasets import (
    Normalization,
    Trajectory,
    generate_coupled_oscillator,
    generate_lorenz,
    generate_white_dwarf,
    ingest_csv,
    read_trajectory_csv,
    white_dwarf_field,
    write_trajectory_csv,
)
from .optim import OptimizerConfig, OptimizerState, adamw_update
from .training import DatasetConfig, TrainConfig, TrainingResult, loss_trend_ok, train, train_repeats

__all__ = [
    "DatasetConfig",
    "Normalization",
    "OptimizerConfig",
    "OptimizerState",
    "TrainConfig",
    "Trajectory",
    "TrainingResult",
    "adamw_update",
    "generate_coupled_oscillator",
    "generate_lorenz",
    "generate_white_dwarf",
    "ingest_csv",
    "loss_trend_ok",
    "mse_loss",
    "read_trajectory_csv",
    "train",
    "train_repeats",
    "white_dwarf_field",
    "write_trajectory_csv",
]
