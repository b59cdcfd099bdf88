"""Hybrid deep neural networks for mixed numeric and curve inputs."""

from hdnn.tensor import RngStream, tensor_new
from hdnn.layers import Mode
from hdnn.model import HybridModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from hdnn.trainer import TrainSpec, evaluate, predict, train

__all__ = [
    "HybridModel",
    "Mode",
    "ModelConfig",
    "RngStream",
    "TrainSpec",
    "build_model",
    "evaluate",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "tensor_new",
    "train",
]

__version__ = "0.1.0"
