"""Minimal float64 reverse-mode autodiff: tensors, layers, Adam, checkpoints."""

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, backward

__all__ = [
    "MAGIC",
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "load_checkpoint",
    "save_checkpoint",
]
