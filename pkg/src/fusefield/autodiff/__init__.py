"""Minimal reverse-mode automatic differentiation over dense float64 tensors."""

from .gradcheck import grad_check
from .optim import Adam, adam_step
from .tensor import (
    Tensor,
    affine,
    clamp,
    concat,
    conv2d,
    conv3d,
    dropout,
    gather,
    graph_records,
    relu,
    scatter_add,
    sigmoid,
    trilinear_sample,
)

__all__ = [
    "Tensor",
    "relu",
    "clamp",
    "concat",
    "gather",
    "scatter_add",
    "conv2d",
    "conv3d",
    "dropout",
    "trilinear_sample",
    "sigmoid",
    "affine",
    "graph_records",
    "Adam",
    "adam_step",
    "grad_check",
]
