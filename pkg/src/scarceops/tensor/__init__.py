"""Numerical core: tensors, reverse-mode autodiff, layers and Adam."""

from . import functional
from .nn import BasicBlock, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, kaiming_uniform, make_rng
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tape, TapeEntry, Tensor, active_tape, backward

__all__ = [
    "functional",
    "Tensor",
    "Tape",
    "TapeEntry",
    "backward",
    "active_tape",
    "ShapeError",
    "NonFiniteError",
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "BatchNorm2d",
    "BasicBlock",
    "make_rng",
    "kaiming_uniform",
    "Adam",
    "AdamState",
    "adam_step",
]
