"""Small reverse-mode autodiff engine: tensors, layers, Adam, gradient checks."""
from . import nn
from . import tensor as ops
from .check import GradCheckReport, grad_check, numeric_grad, relative_error
from .optim import Adam
from .tensor import (
    GraphStateError,
    ShapeError,
    Tensor,
    batch_norm,
    concat,
    conv1d,
    conv2d,
    conv_transpose1d,
    leaky_relu,
    mean,
    mse,
    repeat,
    softplus,
    squared_l2,
    stop_gradient,
    take_rows,
    tensor,
)

__all__ = [
    "Adam",
    "GradCheckReport",
    "GraphStateError",
    "ShapeError",
    "Tensor",
    "batch_norm",
    "concat",
    "conv1d",
    "conv2d",
    "conv_transpose1d",
    "grad_check",
    "leaky_relu",
    "mean",
    "mse",
    "nn",
    "numeric_grad",
    "ops",
    "relative_error",
    "repeat",
    "softplus",
    "squared_l2",
    "stop_gradient",
    "take_rows",
    "tensor",
]
