from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (apply_activation, conv2d, cross_entropy, lstm_step)
from .optim import Adam, AdamState, adam_update, clip_grad_norm
from .tensor import DTYPE, ShapeError, Tape, TapeError, Tensor, backward, no_tape

__all__ = [
    "Adam", "AdamState", "CheckpointError", "DTYPE", "ShapeError", "Tape", "TapeError",
    "Tensor", "adam_update", "apply_activation", "backward", "clip_grad_norm", "conv2d",
    "cross_entropy", "functional", "load_checkpoint", "lstm_step", "no_tape",
    "save_checkpoint",
]
