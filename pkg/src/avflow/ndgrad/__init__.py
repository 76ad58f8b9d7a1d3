"""Minimal dense tensors with reverse-mode autodiff, AdamW and a checkpoint container."""

from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck
from .optim import AdamState, AdamW, StateMismatch, adamw_step
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = list(_tensor_all) + [
    "ops", "AdamState", "AdamW", "StateMismatch", "adamw_step", "CheckpointError",
    "load_checkpoint", "save_checkpoint", "gradcheck",
]
