"""
Prompt training on a frozen backbone, plus toy backbone pretraining
"""

from .optim import AdamState, adam_update, clip_by_global_norm, lr_schedule
from .pretrain import PretrainConfig, per_token_loss, pretrain_lm
from .trainer import PromptTrainer, TokenBatcher, TrainConfig, nll_loss, train_step

__all__ = [
    "AdamState",
    "PretrainConfig",
    "PromptTrainer",
    "TokenBatcher",
    "TrainConfig",
    "adam_update",
    "clip_by_global_norm",
    "lr_schedule",
    "nll_loss",
    "per_token_loss",
    "pretrain_lm",
    "train_step",
]
