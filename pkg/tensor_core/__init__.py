"""
Numeric substrate: tensors, autodiff, optimizer, checkpoints
"""

from tensor_core.tensor import Tensor, get_default_dtype, is_grad_enabled, no_grad, precision
from tensor_core.ops import (
    concat,
    cross_entropy,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    softmax,
)
from tensor_core.optim import SGD, GradientError, OptimizerState, lr_at_epoch
from tensor_core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tensor_core.gradcheck import gradcheck, relative_error

__all__ = [
    "Tensor", "get_default_dtype", "is_grad_enabled", "no_grad", "precision",
    "concat", "cross_entropy", "gelu", "l2_normalize", "layer_norm", "log_softmax",
    "masked_fill", "matmul", "softmax",
    "SGD", "GradientError", "OptimizerState", "lr_at_epoch",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "gradcheck", "relative_error",
]
