"""Minimal reverse-mode autodiff engine: tensors, ops, Adam, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numerical_grad
from .ops import (
    activation,
    add,
    concat,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    dense,
    mul,
    relu,
    reshape,
    scale,
    slice_rows,
    softmax,
    sum_all,
    tanh,
    transpose,
    weighted_mse,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, get_tape, grad_enabled, no_grad

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "cross_entropy",
    "dense",
    "get_tape",
    "grad_enabled",
    "gradcheck",
    "load_checkpoint",
    "mul",
    "no_grad",
    "numerical_grad",
    "relu",
    "reshape",
    "save_checkpoint",
    "scale",
    "slice_rows",
    "softmax",
    "sum_all",
    "tanh",
    "transpose",
    "weighted_mse",
]
