"""Federated averaging over pluggable pub/sub transports, plus an MNIST experiment harness."""

from fedkit.nn import (
    EvalResult,
    ModelParams,
    TrainConfig,
    evaluate,
    init_model,
    train_epochs,
)
from fedkit.aggregator import ClientUpdate, fedavg_aggregate

__version__ = "0.1.0"

__all__ = [
    "ClientUpdate",
    "EvalResult",
    "ModelParams",
    "TrainConfig",
    "evaluate",
    "fedavg_aggregate",
    "init_model",
    "train_epochs",
    "__version__",
]
