"""Minimal dense tensors with reverse-mode autodiff and compiled conv kernels."""
from .gradcheck import grad_check
from .kernels import BACKEND
from .ops import (
    add,
    add_channel,
    attention,
    concat,
    conv1d_time,
    conv2d,
    group_norm,
    matmul,
    mean,
    mse,
    mul,
    resize_nearest,
    reshape,
    scale,
    silu,
    square,
    sub,
    sum,
    transpose,
)
from .tensor import NonFiniteError, Tensor, set_finite_checks

__all__ = [
    "BACKEND",
    "NonFiniteError",
    "Tensor",
    "add",
    "add_channel",
    "attention",
    "concat",
    "conv1d_time",
    "conv2d",
    "grad_check",
    "group_norm",
    "matmul",
    "mean",
    "mse",
    "mul",
    "resize_nearest",
    "reshape",
    "scale",
    "set_finite_checks",
    "silu",
    "square",
    "sub",
    "sum",
    "transpose",
]
