"""Minimal reverse-mode autodiff used to train the separation models."""
from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, relative_error
from .optim import Adam, PlateauHalver, clip_grad_norm
from .tensor import BatchNormState, Parameter, Tape, Tensor, backward, forward

__all__ = [
    "Adam", "BatchNormState", "Parameter", "PlateauHalver", "Tape", "Tensor",
    "backward", "check_gradients", "clip_grad_norm", "forward", "load_checkpoint", "ops", "relative_error",
    "save_checkpoint",
]
