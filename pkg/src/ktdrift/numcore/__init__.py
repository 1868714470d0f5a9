"""Minimal dense-tensor core with reverse-mode differentiation and Adam."""

from .archive import load_archive, save_archive
from .gradcheck import grad_check
from .optim import AdamState, adam_step
from .tensor import (
    PROB_EPS,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_loss,
    default_dtype,
    dropout,
    embedding,
    getitem,
    layer_norm,
    log,
    matmul,
    mean_all,
    mul,
    parameter,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax_lastdim,
    stack,
    sub,
    sum_all,
    take_last,
    tanh,
    transpose,
)

__all__ = [
    "PROB_EPS", "AdamState", "Tape", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "bce_loss", "default_dtype", "dropout", "embedding", "getitem",
    "grad_check", "layer_norm", "load_archive", "log", "matmul", "mean_all", "mul",
    "parameter", "relu", "reshape", "save_archive", "set_default_dtype", "sigmoid",
    "softmax_lastdim", "stack", "sub", "sum_all", "take_last", "tanh", "transpose",
]
