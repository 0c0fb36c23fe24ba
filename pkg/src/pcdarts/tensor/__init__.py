"""Reverse-mode autodiff over dense numpy arrays."""
from . import functional, kernels
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .core import (
    NumericalError,
    ShapeError,
    Tensor,
    activation_peak,
    backward,
    clear_tape,
    default_dtype,
    default_dtype_as,
    no_grad,
    reset_activation_peak,
    scope,
    set_default_dtype,
    tape,
    zero_grads,
)
from .optim import SGD, Adam, adam_step, cosine_lr, sgd_step

__all__ = [
    "Adam", "NumericalError", "SGD", "ShapeError", "Tensor", "activation_peak", "adam_step",
    "backward", "clear_tape", "cosine_lr", "default_dtype", "default_dtype_as", "functional",
    "kernels", "load_checkpoint", "no_grad", "reset_activation_peak", "save_checkpoint",
    "scope", "set_default_dtype", "sgd_step", "tape", "zero_grads",
]
