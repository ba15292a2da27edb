"""
Multi-stage prompting pipeline
Encoding, re-encoding and decoding passes over the same frozen LM. Each stage
sees its own prompt and starts its position ids at 0.
"""

import logging
from typing import Optional

import numpy as np

from ..autodiff.tensor import Tensor
from ..core.errors import DataError, ShapeError
from ..data.vocab import BOS
from ..lm.cache import PastSequence
from ..lm.model import IdArray, LanguageModel
from .prompts import StagePrompts, prompt_past

logger = logging.getLogger(__name__)


def msp_encode(
    lm: LanguageModel,
    x: IdArray,
    prompts: StagePrompts,
    pad_mask: Optional[np.ndarray] = None,
) -> PastSequence:
    """H^e: source activations conditioned on the encoding prompt."""
    past = prompt_past(prompts.encode, lm.config)
    out = lm.forward(x, past, position_offset=0, pad_mask=pad_mask, tag="encoded")
    return PastSequence((out.segment,))


def msp_reencode(
    lm: LanguageModel,
    x: IdArray,
    prompts: StagePrompts,
    encoded: PastSequence,
    pad_mask: Optional[np.ndarray] = None,
) -> PastSequence:
    """
    H^r: a second pass over x whose past is the re-encoding prompt plus H^e.

    Every position sees all of H^e, so H^r[0] already depends on the whole
    source.
    """
    length = np.asarray(x).shape[-1]
    if len(encoded) != length:
        raise ShapeError(f"re-encoding {length} tokens against {len(encoded)} encoded entries")
    past = prompt_past(prompts.reencode, lm.config) + encoded
    out = lm.forward(x, past, position_offset=0, pad_mask=pad_mask, tag="reencoded")
    return PastSequence((out.segment,))


def decode_past(lm: LanguageModel, prompts: StagePrompts, reencoded: PastSequence) -> PastSequence:
    """Source-side context of the decoding stage: P^d ++ H^r (H^e is dropped)."""
    return prompt_past(prompts.decode, lm.config) + reencoded


def msp_decode_hidden(
    lm: LanguageModel,
    y: IdArray,
    prompts: StagePrompts,
    reencoded: PastSequence,
    pad_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Teacher-forced decoding outputs G for y = BOS y_1 ... y_{T-1}."""
    ids = np.asarray(y, dtype=np.int64)
    if ids.size == 0 or not np.all(ids[..., 0] == BOS):
        raise DataError("decoder input must begin with BOS")
    out = lm.forward(
        ids,
        decode_past(lm, prompts, reencoded),
        position_offset=0,
        pad_mask=pad_mask,
        tag="decoded",
    )
    return out.hidden


def msp_source_context(
    lm: LanguageModel,
    x: IdArray,
    prompts: StagePrompts,
    pad_mask: Optional[np.ndarray] = None,
) -> PastSequence:
    """Run encode and re-encode once and return the decoding-stage past."""
    encoded = msp_encode(lm, x, prompts, pad_mask)
    reencoded = msp_reencode(lm, x, prompts, encoded, pad_mask)
    return decode_past(lm, prompts, reencoded)
