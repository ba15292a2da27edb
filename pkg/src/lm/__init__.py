"""
Frozen decoder-only language model
"""

from .cache import Activation, PastSegment, PastSequence
from .checkpoint import load_checkpoint, save_checkpoint
from .config import LmConfig
from .model import LanguageModel, LmOutput, LmParams

__all__ = [
    "Activation",
    "LanguageModel",
    "LmConfig",
    "LmOutput",
    "LmParams",
    "PastSegment",
    "PastSequence",
    "load_checkpoint",
    "save_checkpoint",
]
