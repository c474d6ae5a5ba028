"""Minimal reverse-mode autodiff over numpy arrays."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import ShapeError
from .gradcheck import gradcheck, max_relative_error, numeric_grad
from .tensor import Parameter, Tensor, as_tensor, is_grad_enabled, make_op, no_grad, zero_grads

__all__ = [
    "Parameter", "ShapeError", "Tensor", "as_tensor", "functional", "gradcheck",
    "is_grad_enabled", "load_checkpoint", "make_op", "max_relative_error", "no_grad",
    "numeric_grad", "save_checkpoint", "zero_grads",
]
