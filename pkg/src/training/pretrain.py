"""
Toy backbone pretraining
Next-token language modelling on monolingual sentences with every theta
tensor trainable; the result comes back frozen
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from ..autodiff.tensor import (
    Tensor,
    backward,
    cross_entropy_logits,
    no_grad,
    scale,
    slice_axis,
)
from ..core.errors import ConfigError, DataError, NumericError
from ..data.vocab import BOS, EOS
from ..lm.config import LmConfig
from ..lm.model import LanguageModel, LmParams
from ..prompting.methods import pad_batch
from .optim import AdamState, adam_update, clip_by_global_norm, lr_schedule
from .trainer import collect_grads

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    tokens_per_batch: int = 1024
    learning_rate: float = 3e-3
    warmup_steps: int = 100
    seed: int = 0
    log_interval: int = 100
    clip_norm: float = 1.0
    held_out: int = 200

    def __post_init__(self) -> None:
        for name in ("steps", "tokens_per_batch", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"pretrain.{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown pretrain keys: {sorted(unknown)}")
        return cls(**data)


def lm_batch_loss(lm: LanguageModel, sentences: Sequence[Sequence[int]]) -> Tuple[Tensor, int]:
    """Summed next-token NLL of BOS s EOS over a batch of sentences."""
    ids, mask = pad_batch([[BOS] + list(s) + [EOS] for s in sentences])
    width = ids.shape[1]
    if width > lm.config.max_positions:
        raise DataError(
            f"sentence of {width - 2} tokens exceeds max_positions {lm.config.max_positions}"
        )
    out = lm.forward(ids, pad_mask=mask)
    logits = lm.logits(slice_axis(out.hidden, 1, 0, width - 1))
    weights = mask[:, 1:].astype(np.float64)
    return cross_entropy_logits(logits, ids[:, 1:], weights), int(weights.sum())


def per_token_loss(
    lm: LanguageModel, sentences: Sequence[Sequence[int]], batch_size: int = 64
) -> float:
    """Mean held-out NLL per predicted token (ln V for a uniform model)."""
    total, tokens = 0.0, 0
    with no_grad():
        for start in range(0, len(sentences), batch_size):
            loss, n = lm_batch_loss(lm, sentences[start : start + batch_size])
            total += loss.item()
            tokens += n
    return total / max(tokens, 1)


def _batches(
    sentences: List[List[int]], budget: int, rng: np.random.Generator
) -> Iterator[List[List[int]]]:
    order: List[int] = []
    while True:
        batch: List[List[int]] = []
        used = 0
        while True:
            if not order:
                order = [int(i) for i in rng.permutation(len(sentences))][::-1]
            cost = len(sentences[order[-1]]) + 2
            if batch and used + cost > budget:
                break
            batch.append(sentences[order.pop()])
            used += cost
            if used >= budget:
                break
        yield batch


def pretrain_lm(
    sentences: Sequence[Sequence[int]],
    lm_config: LmConfig,
    config: PretrainConfig,
) -> Tuple[LmParams, Dict[str, float]]:
    """
    Train a fresh backbone on tokenized sentences.

    The last ``held_out`` sentences (when the corpus is large enough) are
    kept aside for the held-out loss.

    Returns:
        (frozen parameters, {"held_out_loss", "uniform_loss", "train_loss"})

    Raises:
        DataError: Empty corpus or token ids outside the vocabulary
    """
    data = [list(s) for s in sentences if len(s) > 0]
    if not data:
        raise DataError("empty corpus: nothing to pretrain on")
    for n, s in enumerate(data, start=1):
        if max(s) >= lm_config.vocab_size or min(s) < 0:
            raise DataError(
                f"sentence {n}: token id outside vocabulary of {lm_config.vocab_size}"
            )

    held = config.held_out if len(data) > 2 * config.held_out else 0
    train, held_out = (data[:-held], data[-held:]) if held else (data, [])

    rng = np.random.default_rng(config.seed)
    params = LmParams.init(lm_config, np.random.default_rng([config.seed, 11]), trainable=True)
    lm = LanguageModel(lm_config, params)
    state = AdamState()
    batches = _batches(train, config.tokens_per_batch, rng)
    named = params.parameters()
    interval_loss, interval_tokens = 0.0, 0
    logger.info(f"Pretraining {params.num_parameters()} parameters for {config.steps} steps")

    for step in range(1, config.steps + 1):
        lr = lr_schedule(step, config.warmup_steps, config.learning_rate)
        for tensor in named.values():
            tensor.zero_grad()
        loss, n_tokens = lm_batch_loss(lm, next(batches))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"Non-finite pretraining loss at step {step}", {"step": step, "lr": lr}
            )
        backward(scale(loss, 1.0 / max(n_tokens, 1)))
        grads, _ = clip_by_global_norm(collect_grads(named), config.clip_norm)
        adam_update(named, grads, state, lr)
        interval_loss += value
        interval_tokens += n_tokens
        if step % config.log_interval == 0:
            mean = interval_loss / max(interval_tokens, 1)
            logger.info(f"pretrain step {step}: loss {mean:.4f} lr {lr:.2e}")
            interval_loss, interval_tokens = 0.0, 0

    for tensor in named.values():
        tensor.zero_grad()
    params.freeze()
    stats = {
        "uniform_loss": float(np.log(lm_config.vocab_size)),
        "train_loss": per_token_loss(lm, train[: max(config.held_out, 1)]),
    }
    if held_out:
        stats["held_out_loss"] = per_token_loss(lm, held_out)
        logger.info(
            f"Held-out loss {stats['held_out_loss']:.4f} (uniform {stats['uniform_loss']:.4f})"
        )
    return params, stats
