"""
Continuous prompts and the reparameterization network
Compact L x d blocks pass through tanh(B @ W1) @ W2 to become activation-width
prompts of shape (L, 2Nd)
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from ..autodiff.tensor import Tensor, concat, matmul, no_grad, slice_axis, tanh
from ..core.errors import ShapeError
from ..lm.cache import PastSegment, PastSequence
from ..lm.config import LmConfig

logger = logging.getLogger(__name__)

STAGES = ("encode", "reencode", "decode")


class PromptParams:
    """
    Trainable prompt blocks plus the shared W1 (d x d) and W2 (d x 2Nd).

    One block per stage name; MSP uses encode/reencode/decode, prefix-tuning
    a single "prefix" block and the shared ablation a single "shared" block.
    """

    def __init__(self, blocks: Mapping[str, Tensor], w1: Tensor, w2: Tensor):
        if not blocks:
            raise ShapeError("PromptParams needs at least one block")
        d = w1.shape[0]
        if w1.shape != (d, d):
            raise ShapeError(f"W1 must be square, got {w1.shape}")
        if w2.ndim != 2 or w2.shape[0] != d or w2.shape[1] % (2 * d):
            raise ShapeError(f"W2 must be ({d}, 2Nd), got {w2.shape}")
        lengths = {b.shape[0] for b in blocks.values()}
        for name, block in blocks.items():
            if block.ndim != 2 or block.shape[1] != d:
                raise ShapeError(f"prompt block {name!r} must be (L, {d}), got {block.shape}")
        if len(lengths) != 1:
            raise ShapeError(f"prompt blocks differ in length: {sorted(lengths)}")
        self.blocks: Dict[str, Tensor] = dict(blocks)
        self.w1 = w1
        self.w2 = w2
        for name, t in self.parameters().items():
            t.name = name

    @classmethod
    def init(
        cls,
        stages: Sequence[str],
        prompt_length: int,
        config: LmConfig,
        rng: np.random.Generator,
        std: float = 0.02,
    ) -> "PromptParams":
        d = config.d_model
        blocks = {
            stage: Tensor(rng.normal(0.0, std, (prompt_length, d)), requires_grad=True)
            for stage in stages
        }
        w1 = Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, std, (d, config.activation_width)), requires_grad=True)
        return cls(blocks, w1, w2)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "PromptParams":
        blocks = {
            name.split(".", 1)[1]: Tensor(a, requires_grad=True)
            for name, a in arrays.items()
            if name.startswith("reparam.") and name not in ("reparam.w1", "reparam.w2")
        }
        return cls(
            blocks,
            Tensor(arrays["reparam.w1"], requires_grad=True),
            Tensor(arrays["reparam.w2"], requires_grad=True),
        )

    @property
    def stages(self) -> Sequence[str]:
        return tuple(self.blocks)

    @property
    def prompt_length(self) -> int:
        return next(iter(self.blocks.values())).shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"reparam.{stage}": block for stage, block in self.blocks.items()}
        params["reparam.w1"] = self.w1
        params["reparam.w2"] = self.w2
        return params

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


@dataclass(frozen=True)
class StagePrompts:
    """Activation-width prompts for the three MSP stages, each (L, 2Nd)."""

    encode: Tensor
    reencode: Tensor
    decode: Tensor

    def __post_init__(self) -> None:
        shapes = {self.encode.shape, self.reencode.shape, self.decode.shape}
        if len(shapes) != 1:
            raise ShapeError(f"stage prompts differ in shape: {sorted(shapes)}")

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {f"prompt.{stage}": getattr(self, stage).data for stage in STAGES}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "StagePrompts":
        return cls(*(Tensor(arrays[f"prompt.{stage}"]) for stage in STAGES))


@dataclass
class EmbeddingPrompt:
    """L pseudo-token embeddings prepended at the input layer, (L, d)."""

    vectors: Tensor

    @classmethod
    def init(
        cls, prompt_length: int, config: LmConfig, rng: np.random.Generator, std: float = 0.02
    ) -> "EmbeddingPrompt":
        data = rng.normal(0.0, std, (prompt_length, config.d_model))
        return cls(Tensor(data, requires_grad=True, name="prompt.embedding"))

    @property
    def prompt_length(self) -> int:
        return self.vectors.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"prompt.embedding": self.vectors}


def reparameterize_blocks(
    params: PromptParams, stages: Optional[Sequence[str]] = None
) -> Dict[str, Tensor]:
    """
    Run the stacked blocks through the tanh MLP and split per stage.

    All stages go through one matrix chain, so W1 and W2 receive the summed
    gradient of every stage.
    """
    stages = tuple(stages or params.stages)
    length = params.prompt_length
    stacked = concat([params.blocks[s] for s in stages], axis=0)
    hidden = matmul(tanh(matmul(stacked, params.w1)), params.w2)
    return {
        stage: slice_axis(hidden, 0, i * length, (i + 1) * length)
        for i, stage in enumerate(stages)
    }


def reparameterize(params: PromptParams) -> StagePrompts:
    """Stage prompts from the encode/reencode/decode blocks."""
    missing = [s for s in STAGES if s not in params.blocks]
    if missing:
        raise ShapeError(f"PromptParams lacks stage blocks {missing}")
    out = reparameterize_blocks(params, STAGES)
    return StagePrompts(out["encode"], out["reencode"], out["decode"])


def share_single_prompt(params: PromptParams, block: str = "shared") -> StagePrompts:
    """One reparameterized prompt used by all three stages."""
    prompt = reparameterize_blocks(params, (block,))[block]
    return StagePrompts(prompt, prompt, prompt)


def bake(params: PromptParams, shared: bool = False) -> StagePrompts:
    """Fixed stage prompts for inference; the network is not needed afterwards."""
    with no_grad():
        prompts = share_single_prompt(params) if shared else reparameterize(params)
    logger.debug(f"Baked prompts of shape {prompts.encode.shape}")
    return StagePrompts(
        prompts.encode.detach(), prompts.reencode.detach(), prompts.decode.detach()
    )


def prompt_past(prompt: Optional[Tensor], config: LmConfig) -> PastSequence:
    """A one-segment past holding the prompt; empty for a missing or L=0 prompt."""
    if prompt is None or prompt.shape[0] == 0:
        return PastSequence()
    return PastSequence((PastSegment.from_prompt(prompt, config.n_layers, config.d_model),))
