"""Minimal float64 reverse-mode autodiff engine."""
from .core import DTYPE, Parameter, Tensor, is_grad_enabled, no_grad
from .functional import (
    batchnorm2d,
    concat_channels,
    conv2d,
    dice_loss,
    max_pool2d,
    mul,
    relu,
    sigmoid,
    upsample2x,
    weighted_sum,
)
from .gradcheck import GradcheckResult, gradcheck
from .optim import SGD, AdamW, sgd_step, zero_grad

__all__ = [
    "DTYPE", "Parameter", "Tensor", "is_grad_enabled", "no_grad",
    "batchnorm2d", "concat_channels", "conv2d", "dice_loss", "max_pool2d", "mul",
    "relu", "sigmoid", "upsample2x", "weighted_sum",
    "GradcheckResult", "gradcheck", "SGD", "AdamW", "sgd_step", "zero_grad",
]
