"""The refinement network: architecture, training and model files."""

from .network import (
    DEFAULT_HIDDEN,
    MlpModel,
    backward,
    build_model,
    forward,
    init_model,
    loss_and_grad,
    predict,
    refine,
    softmax,
)
from .persistence import load_model, save_model
from .training import Adam, OptimizerState, TrainConfig, format_history, learning_rate, train

__all__ = [
    "DEFAULT_HIDDEN",
    "MlpModel",
    "Adam",
    "OptimizerState",
    "TrainConfig",
    "backward",
    "build_model",
    "forward",
    "format_history",
    "init_model",
    "learning_rate",
    "load_model",
    "loss_and_grad",
    "predict",
    "refine",
    "save_model",
    "softmax",
    "train",
]
