"""Minimal tensor, layer, autodiff and optimizer kernels."""
from .gradcheck import GradCheckResult, grad_check, relative_error
from .ops import (
    BatchNormState,
    BatchNormStateError,
    GRUParams,
    ShapeError,
    batchnorm1d,
    channel_scale,
    conv1d,
    cross_entropy,
    dropout,
    global_maxpool,
    gru_cell,
    linear,
    log_softmax,
    maxpool1d,
    relu,
    same_padding,
    sigmoid,
    softmax_cross_entropy,
    tanh,
)
from .optim import SGDNesterov
from .tensor import NonFiniteError, Tensor, add, mul, no_grad, stack

__all__ = [
    "BatchNormState", "BatchNormStateError", "GRUParams", "GradCheckResult", "NonFiniteError",
    "SGDNesterov", "ShapeError", "Tensor", "add", "batchnorm1d", "channel_scale", "conv1d",
    "cross_entropy", "dropout", "global_maxpool", "grad_check", "gru_cell", "linear",
    "log_softmax", "maxpool1d", "mul", "no_grad", "relative_error", "relu", "same_padding",
    "sigmoid", "softmax_cross_entropy", "stack", "tanh",
]
