"""Minimal reverse-mode autodiff kernel, layers, optimizer, and checkpoints."""

from .tensor import (
    Tensor,
    as_tensor,
    assert_finite,
    concat,
    default_dtype,
    external_grad_op,
    grad_enabled,
    gru_cell,
    layer_norm,
    log_softmax,
    no_grad,
    set_default_dtype,
    smooth_l1,
    softmax,
    stack,
    stop_gradient,
)
from .layers import GRU, MLP, Conv1dSame, LayerNorm, Linear, Module, MultiHeadSelfAttention, Param
from .optim import AdamW, copy_params, cosine_lr, ema_update
from .ckpt import FORMAT as CKPT_FORMAT
from .ckpt import file_sha256, load_checkpoint, load_into, save_checkpoint

__all__ = [
    "Tensor", "as_tensor", "assert_finite", "concat", "default_dtype",
    "external_grad_op", "grad_enabled", "gru_cell", "layer_norm", "log_softmax",
    "no_grad", "set_default_dtype", "smooth_l1", "softmax", "stack", "stop_gradient",
    "GRU", "MLP", "Conv1dSame", "LayerNorm", "Linear", "Module",
    "MultiHeadSelfAttention", "Param",
    "AdamW", "copy_params", "cosine_lr", "ema_update",
    "CKPT_FORMAT", "file_sha256", "load_checkpoint", "load_into", "save_checkpoint",
]
