"""TransAttUnet segmentation at desk scale on a small numpy autodiff core."""

from .tensor import Tensor, checked_mode
from .model import ModelConfig, TransAttUnet
from .losses import LossConfig, combined_loss
from .optim import OptimConfig, lr_schedule

__all__ = [
    "Tensor",
    "checked_mode",
    "ModelConfig",
    "TransAttUnet",
    "LossConfig",
    "combined_loss",
    "OptimConfig",
    "lr_schedule",
]

__version__ = "0.1.0"
