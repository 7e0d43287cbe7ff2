from .layers import (
    BiLSTM,
    Conv2D,
    Dropout,
    Linear,
    MaxPoolFreq,
    ReLU,
    Sigmoid,
    layer_from_spec,
)
from .losses import bce_loss, ce_loss, mse_loss
from .network import Sequential, gradient_check, load_checkpoint, save_checkpoint
from .optim import Adam

__all__ = [
    "Adam",
    "BiLSTM",
    "Conv2D",
    "Dropout",
    "Linear",
    "MaxPoolFreq",
    "ReLU",
    "Sequential",
    "Sigmoid",
    "bce_loss",
    "ce_loss",
    "gradient_check",
    "layer_from_spec",
    "load_checkpoint",
    "mse_loss",
    "save_checkpoint",
]
