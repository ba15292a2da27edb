"""
Continuous prompts, the multi-stage pipeline and single-pass baselines
"""

from .methods import (
    METHODS,
    DecodeStart,
    PromptMethod,
    create_method,
    load_method,
    source_context,
)
from .msp import msp_decode_hidden, msp_encode, msp_reencode, msp_source_context
from .prefix import prefix_forward, prompt_tuning_forward
from .prompts import (
    EmbeddingPrompt,
    PromptParams,
    StagePrompts,
    bake,
    reparameterize,
    share_single_prompt,
)

__all__ = [
    "METHODS",
    "DecodeStart",
    "EmbeddingPrompt",
    "PromptMethod",
    "PromptParams",
    "StagePrompts",
    "bake",
    "create_method",
    "load_method",
    "msp_decode_hidden",
    "msp_encode",
    "msp_reencode",
    "msp_source_context",
    "prefix_forward",
    "prompt_tuning_forward",
    "reparameterize",
    "share_single_prompt",
    "source_context",
]
