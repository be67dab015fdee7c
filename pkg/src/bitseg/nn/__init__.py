"""Autodiff substrate: tensors with a tape, differentiable layers, gradient checks."""

from .tensor import Tensor, TapeNode, as_tensor, grad_enabled, no_grad, parameter
from .functional import (
    ConvSpec,
    affine,
    batchnorm2d,
    bilinear_upsample,
    concat_channels,
    conv2d_binary,
    conv2d_float,
    make_filter,
    maxpool2d,
    prelu,
    softmax_ce_loss,
    weighted_sum,
)
from .gradcheck import GradReport, check_binary_conv_grads, finite_difference_check

__all__ = [
    "Tensor",
    "TapeNode",
    "as_tensor",
    "parameter",
    "grad_enabled",
    "no_grad",
    "ConvSpec",
    "affine",
    "batchnorm2d",
    "bilinear_upsample",
    "concat_channels",
    "conv2d_binary",
    "conv2d_float",
    "make_filter",
    "maxpool2d",
    "prelu",
    "softmax_ce_loss",
    "weighted_sum",
    "GradReport",
    "check_binary_conv_grads",
    "finite_difference_check",
]
