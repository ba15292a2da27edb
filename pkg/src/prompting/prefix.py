"""
Single-pass baselines: prefix-tuning and prompt tuning
"""

import logging
from typing import Optional

import numpy as np

from ..autodiff.tensor import Tensor, add, reshape
from ..core.errors import ShapeError
from ..lm.cache import PastSequence
from ..lm.model import IdArray, LanguageModel, LmOutput
from .prompts import EmbeddingPrompt, prompt_past

logger = logging.getLogger(__name__)


def prefix_forward(
    lm: LanguageModel,
    template: IdArray,
    prompt: Optional[Tensor],
    pad_mask: Optional[np.ndarray] = None,
    past: Optional[PastSequence] = None,
) -> LmOutput:
    """
    One continuous pass over the template with the prompt as past.

    The prompt takes no positions; template token i sits at position i.
    """
    context = prompt_past(prompt, lm.config) + (past or PastSequence())
    return lm.forward(template, context, position_offset=0, pad_mask=pad_mask)


def embedding_prompt_past(lm: LanguageModel, eprompt: Optional[EmbeddingPrompt]) -> PastSequence:
    """
    Activations of the pseudo-tokens at positions 0..L-1.

    The result is batch-free (batch 1) and broadcasts over any batch.
    """
    if eprompt is None or eprompt.prompt_length == 0:
        return PastSequence()
    length, d = eprompt.prompt_length, lm.config.d_model
    if length > lm.config.max_positions:
        raise ShapeError(
            f"position overflow: prompt length {length} > max_positions {lm.config.max_positions}"
        )
    x = add(eprompt.vectors, lm.position_embedding(np.arange(length)))
    out = lm.forward_embeddings(reshape(x, (1, length, d)), tag="prompt")
    return PastSequence((out.segment,))


def prompt_tuning_forward(
    lm: LanguageModel,
    template: IdArray,
    eprompt: Optional[EmbeddingPrompt],
    pad_mask: Optional[np.ndarray] = None,
) -> LmOutput:
    """
    Template pass after L pseudo-token embeddings.

    Pseudo-tokens consume positions 0..L-1, so the template starts at L.
    Outputs cover the template tokens only.
    """
    offset = 0 if eprompt is None else eprompt.prompt_length
    return lm.forward(
        template, embedding_prompt_past(lm, eprompt), position_offset=offset, pad_mask=pad_mask
    )
