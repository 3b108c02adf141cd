"""Sparse-token self-supervised ViT pretraining with positional-mismatch detection, on a numpy autodiff engine."""

from .config import DataConfig, TrainConfig
from .model import ViTConfig
from .rng import ConfigError, SparsitySchedule
from .tensor import Tensor

__all__ = ["ConfigError", "DataConfig", "SparsitySchedule", "Tensor", "TrainConfig", "ViTConfig"]
__version__ = "0.1.0"
