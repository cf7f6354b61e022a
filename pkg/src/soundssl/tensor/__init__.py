"""Minimal reverse-mode autodiff on numpy arrays."""

from .checkpoint import (CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint,
                         save_checkpoint, state_checksum)
from .core import (NonFiniteError, ShapeError, Tensor, as_tensor, exp, is_grad_enabled, log,
                   matmul, mean, no_grad, relu, reshape, set_nonfinite_trap, sqrt, transpose, tsum,
                   var)
from .gradcheck import GradCheckReport, grad_check
from .nn import (batchnorm, conv2d, dense, global_average_pool, log_softmax, maxpool2d,
                 softmax_cross_entropy)

__all__ = [
    "CheckpointError", "GradCheckReport", "NonFiniteError", "ShapeError", "Tensor",
    "as_tensor", "batchnorm", "checkpoint_bytes", "conv2d", "dense", "exp",
    "global_average_pool", "grad_check", "is_grad_enabled", "load_checkpoint", "log",
    "log_softmax", "matmul", "maxpool2d", "mean", "no_grad", "parse_checkpoint", "relu",
    "reshape", "save_checkpoint", "set_nonfinite_trap", "softmax_cross_entropy", "sqrt",
    "state_checksum", "transpose", "tsum", "var",
]
