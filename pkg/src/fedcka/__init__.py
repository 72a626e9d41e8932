"""Federated learning simulator with contrastive layer-similarity regularization."""

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    FedCKAError,
    IngestionError,
)
from .federation import RoundConfig, RoundMetrics, Simulation, run_experiment
from .model import Model, build_base_cnn, build_deep_cnn
from .similarity import kernel_cka, linear_cka

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "FedCKAError",
    "IngestionError",
    "Model",
    "RoundConfig",
    "RoundMetrics",
    "Simulation",
    "build_base_cnn",
    "build_deep_cnn",
    "kernel_cka",
    "linear_cka",
    "run_experiment",
]
