"""Learnable ID/OOD prompts, their losses and the training loop."""

from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .losses import (
    OUT_LOSS_FORMS,
    RATIO_A,
    RATIO_B,
    LossWeights,
    loss_div,
    loss_div_grad,
    loss_in,
    loss_in_grad,
    loss_out,
    loss_out_grad,
    total_loss,
)
from .prompts import INIT_STD, PromptSet, init_prompts, prompt_features
from .train import AdamW, TrainConfig, interleaved_stream, objective, train

__all__ = [
    "AdamW", "INIT_STD", "LossWeights", "OUT_LOSS_FORMS", "PromptSet", "RATIO_A", "RATIO_B",
    "TrainConfig", "checkpoint_bytes", "init_prompts", "interleaved_stream", "load_checkpoint",
    "loss_div", "loss_div_grad", "loss_in", "loss_in_grad", "loss_out", "loss_out_grad",
    "objective", "prompt_features", "save_checkpoint", "total_loss", "train",
]
