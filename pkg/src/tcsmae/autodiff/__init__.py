"""Minimal reverse-mode autodiff engine, Adam, and checkpoint I/O."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numerical_grad
from .optim import Adam
from .tensor import NonFiniteError, Tensor

__all__ = [
    "Adam", "NonFiniteError", "Tensor", "gradcheck", "load_checkpoint", "numerical_grad",
    "ops", "save_checkpoint",
]
