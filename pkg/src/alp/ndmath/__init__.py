"""Numeric core: checked ops over torch autograd, Adam, clipping, checkpoints."""
from .ops import (
    ContractError,
    NumericError,
    ShapeError,
    add,
    affine,
    avg_pool2,
    check_finite,
    concat,
    conv2d,
    cross_entropy,
    gru_cell,
    l2norm,
    log_softmax,
    mse,
    mul,
    relu,
    softmax,
    tanh,
)
from .optim import Adam, AdamState, adam_step, backprop, clip_global_grad_norm, clip_grads_, global_norm
from . import checkpoint

__all__ = [
    "ContractError", "NumericError", "ShapeError",
    "add", "affine", "avg_pool2", "check_finite", "concat", "conv2d", "cross_entropy",
    "gru_cell", "l2norm", "log_softmax", "mse", "mul", "relu", "softmax", "tanh",
    "Adam", "AdamState", "adam_step", "backprop", "clip_global_grad_norm", "clip_grads_",
    "global_norm", "checkpoint",
]
