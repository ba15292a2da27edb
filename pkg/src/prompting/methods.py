"""
Prompting methods
Each method owns its trainable parameters, computes the batched training
loss, bakes its inference prompts and builds the decoding start state for a
source sentence.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Type

import numpy as np

from ..autodiff.tensor import Tensor, cross_entropy_logits, no_grad, slice_axis
from ..core.errors import ConfigError, ShapeError
from ..data.tasks import build_template
from ..data.vocab import BOS, EOS, PAD, SEP, SEP1, SEP2
from ..lm.cache import PastSequence
from ..lm.config import LmConfig
from ..lm.model import LanguageModel
from .msp import msp_decode_hidden, msp_encode, msp_reencode, msp_source_context
from .prefix import embedding_prompt_past, prefix_forward, prompt_tuning_forward
from .prompts import (
    EmbeddingPrompt,
    PromptParams,
    StagePrompts,
    bake,
    prompt_past,
    reparameterize,
    reparameterize_blocks,
    share_single_prompt,
)

logger = logging.getLogger(__name__)

Pair = Tuple[Sequence[int], Sequence[int]]
BakedPrompts = Mapping[str, Tensor]


@dataclass(frozen=True)
class DecodeStart:
    """Where generation begins: source-side past, first input token, its position."""

    past: PastSequence
    first_token: int
    start_position: int


def pad_batch(seqs: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids, real-token mask)."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask


def _template_loss(
    lm: LanguageModel, hidden: Tensor, ids: np.ndarray, weights: np.ndarray
) -> Tuple[Tensor, int]:
    """Next-token NLL over template positions whose label is marked."""
    width = ids.shape[1]
    logits = lm.logits(slice_axis(hidden, 1, 0, width - 1))
    w = weights[:, 1:].astype(np.float64)
    return cross_entropy_logits(logits, ids[:, 1:], w), int(w.sum())


class PromptMethod(ABC):
    """A way of steering the frozen LM with trainable prompts."""

    name: str = ""

    def __init__(self, lm: LanguageModel):
        self.lm = lm

    @abstractmethod
    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors, by checkpoint name."""

    @abstractmethod
    def batch_loss(self, batch: Sequence[Pair]) -> Tuple[Tensor, int]:
        """Summed NLL of every target token (and EOS) plus that token count."""

    @abstractmethod
    def bake(self) -> Dict[str, np.ndarray]:
        """Inference prompts ("prompt.*") computed from the current parameters."""

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def trainable_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}


class MultiStagePrompting(PromptMethod):
    """Separate encode / re-encode / decode prompts through one reparameterization."""

    name = "msp"
    shared = False

    def __init__(self, lm: LanguageModel, params: PromptParams):
        super().__init__(lm)
        self.params = params

    @classmethod
    def create(
        cls, lm: LanguageModel, prompt_length: int, rng: np.random.Generator, std: float = 0.02
    ) -> "MultiStagePrompting":
        stages = ("shared",) if cls.shared else ("encode", "reencode", "decode")
        return cls(lm, PromptParams.init(stages, prompt_length, lm.config, rng, std))

    @classmethod
    def from_arrays(
        cls, lm: LanguageModel, arrays: Mapping[str, np.ndarray]
    ) -> "MultiStagePrompting":
        return cls(lm, PromptParams.from_arrays(arrays))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters()

    def stage_prompts(self) -> StagePrompts:
        return share_single_prompt(self.params) if self.shared else reparameterize(self.params)

    def batch_loss(self, batch: Sequence[Pair]) -> Tuple[Tensor, int]:
        prompts = self.stage_prompts()
        x, x_mask = pad_batch([src for src, _ in batch])
        y_in, y_mask = pad_batch([[BOS] + list(tgt) for _, tgt in batch])
        labels, _ = pad_batch([list(tgt) + [EOS] for _, tgt in batch])

        encoded = msp_encode(self.lm, x, prompts, x_mask)
        reencoded = msp_reencode(self.lm, x, prompts, encoded, x_mask)
        hidden = msp_decode_hidden(self.lm, y_in, prompts, reencoded, y_mask)
        weights = y_mask.astype(np.float64)
        loss = cross_entropy_logits(self.lm.logits(hidden), labels, weights)
        return loss, int(weights.sum())

    def bake(self) -> Dict[str, np.ndarray]:
        return bake(self.params, shared=self.shared).to_arrays()


class SharedPromptMSP(MultiStagePrompting):
    """Ablation: one prompt reused by all three stages."""

    name = "msp-shared"
    shared = True


class PrefixTuning(PromptMethod):
    """One activation-level prompt for a single templated pass."""

    name = "prefix"
    template = "single"

    def __init__(self, lm: LanguageModel, params: PromptParams):
        super().__init__(lm)
        if "prefix" not in params.blocks:
            raise ShapeError("prefix-tuning needs a 'prefix' prompt block")
        self.params = params

    @classmethod
    def create(
        cls, lm: LanguageModel, prompt_length: int, rng: np.random.Generator, std: float = 0.02
    ) -> "PrefixTuning":
        return cls(lm, PromptParams.init(("prefix",), prompt_length, lm.config, rng, std))

    @classmethod
    def from_arrays(cls, lm: LanguageModel, arrays: Mapping[str, np.ndarray]) -> "PrefixTuning":
        return cls(lm, PromptParams.from_arrays(arrays))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters()

    def prompt(self) -> Tensor:
        return reparameterize_blocks(self.params, ("prefix",))["prefix"]

    def batch_loss(self, batch: Sequence[Pair]) -> Tuple[Tensor, int]:
        templates = [build_template(list(src), list(tgt), self.template) for src, tgt in batch]
        ids, pad = pad_batch([t[0] for t in templates])
        weights, _ = pad_batch([t[1].astype(np.int64) for t in templates])
        out = prefix_forward(self.lm, ids, self.prompt(), pad)
        return _template_loss(self.lm, out.hidden, ids, weights.astype(bool))

    def bake(self) -> Dict[str, np.ndarray]:
        with no_grad():
            prompt = self.prompt()
        return {"prompt.prefix": prompt.data}


class DoublePrefixTuning(PrefixTuning):
    """Prefix-tuning over the "x <S1> x <S2> y" template."""

    name = "prefix-double"
    template = "double"


class PromptTuning(PromptMethod):
    """Trainable pseudo-token embeddings, L x d parameters and nothing else."""

    name = "prompt"

    def __init__(self, lm: LanguageModel, eprompt: EmbeddingPrompt):
        super().__init__(lm)
        self.eprompt = eprompt

    @classmethod
    def create(
        cls, lm: LanguageModel, prompt_length: int, rng: np.random.Generator, std: float = 0.02
    ) -> "PromptTuning":
        return cls(lm, EmbeddingPrompt.init(prompt_length, lm.config, rng, std))

    @classmethod
    def from_arrays(cls, lm: LanguageModel, arrays: Mapping[str, np.ndarray]) -> "PromptTuning":
        return cls(lm, EmbeddingPrompt(Tensor(arrays["prompt.embedding"], requires_grad=True)))

    def parameters(self) -> Dict[str, Tensor]:
        return self.eprompt.parameters()

    def batch_loss(self, batch: Sequence[Pair]) -> Tuple[Tensor, int]:
        templates = [build_template(list(src), list(tgt), "single") for src, tgt in batch]
        ids, pad = pad_batch([t[0] for t in templates])
        weights, _ = pad_batch([t[1].astype(np.int64) for t in templates])
        out = prompt_tuning_forward(self.lm, ids, self.eprompt, pad)
        return _template_loss(self.lm, out.hidden, ids, weights.astype(bool))

    def bake(self) -> Dict[str, np.ndarray]:
        return {"prompt.embedding": self.eprompt.vectors.data.copy()}


METHODS: Dict[str, Type[PromptMethod]] = {
    cls.name: cls
    for cls in (
        MultiStagePrompting,
        SharedPromptMSP,
        PrefixTuning,
        DoublePrefixTuning,
        PromptTuning,
    )
}


def create_method(
    name: str,
    lm: LanguageModel,
    prompt_length: int,
    rng: np.random.Generator,
    std: float = 0.02,
) -> PromptMethod:
    """Fresh trainable method by name."""
    if name not in METHODS:
        raise ConfigError(f"method must be one of {sorted(METHODS)}, got {name!r}")
    if prompt_length < 0:
        raise ConfigError(f"prompt_length must be >= 0, got {prompt_length}")
    method = METHODS[name].create(lm, prompt_length, rng, std)  # type: ignore[attr-defined]
    logger.info(f"Method {name}: {method.num_parameters()} trainable parameters")
    return method


def load_method(name: str, lm: LanguageModel, arrays: Mapping[str, np.ndarray]) -> PromptMethod:
    """Trainable method restored from checkpoint arrays."""
    if name not in METHODS:
        raise ConfigError(f"method must be one of {sorted(METHODS)}, got {name!r}")
    return METHODS[name].from_arrays(lm, arrays)  # type: ignore[attr-defined]


def expected_parameter_count(name: str, config: LmConfig, prompt_length: int) -> int:
    """Trainable parameter count of a method for a given backbone shape."""
    d, n = config.d_model, config.n_layers
    mlp = d * d + 2 * n * d * d
    counts = {
        "msp": 3 * prompt_length * d + mlp,
        "msp-shared": prompt_length * d + mlp,
        "prefix": prompt_length * d + mlp,
        "prefix-double": prompt_length * d + mlp,
        "prompt": prompt_length * d,
    }
    return counts[name]


def source_context(
    name: str, lm: LanguageModel, prompts: BakedPrompts, source: Sequence[int]
) -> DecodeStart:
    """
    Decoding start state from baked prompts only.

    msp / msp-shared: P^d ++ H^r, then BOS at position 0.
    prefix: prompt ++ acts(x), then <S> at position S.
    prefix-double: prompt ++ acts(x <S1> x), then <S2> at position 2S+1.
    prompt: acts(pseudo-tokens ++ x), then <S> at position L+S.
    """
    x = np.asarray(source, dtype=np.int64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"source must be a non-empty 1-D id sequence, got shape {x.shape}")
    if name in ("msp", "msp-shared"):
        stage = StagePrompts(
            prompts["prompt.encode"], prompts["prompt.reencode"], prompts["prompt.decode"]
        )
        return DecodeStart(msp_source_context(lm, x, stage), BOS, 0)
    if name in ("prefix", "prefix-double"):
        head = x if name == "prefix" else np.concatenate([x, [SEP1], x])
        out = prefix_forward(lm, head, prompts["prompt.prefix"])
        past = prompt_past(prompts["prompt.prefix"], lm.config).then(out.segment)
        return DecodeStart(past, SEP if name == "prefix" else SEP2, len(head))
    if name == "prompt":
        eprompt = EmbeddingPrompt(prompts["prompt.embedding"])
        past = embedding_prompt_past(lm, eprompt)
        out = lm.forward(x, past, position_offset=eprompt.prompt_length)
        return DecodeStart(past.then(out.segment), SEP, eprompt.prompt_length + len(x))
    raise ConfigError(f"method must be one of {sorted(METHODS)}, got {name!r}")


def baked_tensors(arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """Read-only tensors for the "prompt.*" entries of a checkpoint."""
    out = {}
    for name, array in arrays.items():
        if name.startswith("prompt."):
            tensor = Tensor(array)
            tensor.freeze()
            out[name] = tensor
    return out


def baked_names(name: str) -> List[str]:
    if name in ("msp", "msp-shared"):
        return ["prompt.encode", "prompt.reencode", "prompt.decode"]
    if name in ("prefix", "prefix-double"):
        return ["prompt.prefix"]
    return ["prompt.embedding"]
