"""Vision-HgNN: image classification with learned visual hypergraphs."""

from .autodiff import Tensor, backward, no_grad
from .errors import CheckpointError, ConfigError, DataError, DimensionError
from .model import VisionHgNN, VisionHgNNConfig, forward, forward_patches, init_parameters, predict
from .training import EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "EvalReport",
    "Tensor",
    "TrainConfig",
    "VisionHgNN",
    "VisionHgNNConfig",
    "backward",
    "evaluate",
    "forward",
    "forward_patches",
    "init_parameters",
    "no_grad",
    "predict",
    "train",
]
