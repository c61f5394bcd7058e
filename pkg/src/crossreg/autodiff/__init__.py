"""Tensor container and reverse-mode autodiff for the ops the networks need."""
from .kernels import get_backend, set_backend
from .ops import (
    BatchNormState,
    add,
    batch_norm,
    center_crop,
    concat,
    conv3d,
    crop_slices,
    div,
    exp,
    getitem,
    leaky_relu,
    mean,
    mul,
    power,
    reshape,
    scale,
    softmax,
    sqrt,
    sub,
    sum,
    upsample_nearest,
)
from .tensor import Tensor, as_tensor, backward, no_grad, set_debug, topological_order

__all__ = [
    "BatchNormState", "Tensor", "add", "as_tensor", "backward", "batch_norm", "center_crop",
    "concat", "conv3d", "crop_slices", "div", "exp", "get_backend", "getitem", "leaky_relu",
    "mean", "mul", "no_grad", "power", "reshape", "scale", "set_backend", "set_debug",
    "softmax", "sqrt", "sub", "sum", "topological_order", "upsample_nearest",
]
