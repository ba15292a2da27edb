"""
Generation and evaluation
"""

from .evaluate import TranslationModel, evaluate, translate_all
from .metrics import EvalReport, bleu, sequence_accuracy, token_accuracy
from .search import LmDecodeSession, Translation, beam_search, translate_greedy

__all__ = [
    "EvalReport",
    "LmDecodeSession",
    "Translation",
    "TranslationModel",
    "beam_search",
    "bleu",
    "evaluate",
    "sequence_accuracy",
    "token_accuracy",
    "translate_all",
    "translate_greedy",
]
