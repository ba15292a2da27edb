"""
Prompt trainer
Optimizes prompt parameters only; the backbone stays frozen throughout
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..autodiff.tensor import Tensor, backward, no_grad, scale
from ..core.errors import ConfigError, DataError, GradientError, NumericError
from ..core.safety import TrainingGuard
from ..prompting.methods import METHODS, Pair, PromptMethod
from .optim import AdamState, adam_update, clip_by_global_norm, lr_schedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Prompt training hyper-parameters (desk scale)."""

    method: str = "msp"
    prompt_length: int = 16
    steps: int = 2000
    tokens_per_batch: int = 2048
    learning_rate: float = 7e-4
    warmup_steps: int = 400
    seed: int = 1
    log_interval: int = 50
    checkpoint_interval: int = 0
    clip_norm: float = 1.0
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(
                f"train.method must be one of {sorted(METHODS)}, got {self.method!r}"
            )
        for name in ("steps", "tokens_per_batch", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.prompt_length < 0 or self.checkpoint_interval < 0 or self.warmup_steps < 0:
            raise ConfigError(
                "train.prompt_length, warmup_steps and checkpoint_interval must be >= 0"
            )
        if self.learning_rate < 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown train keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class StepResult:
    step: int
    loss_sum: float
    n_tokens: int
    lr: float
    grad_norm: float

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / max(self.n_tokens, 1)


def nll_loss(method: PromptMethod, pairs: Sequence[Pair], reduction: str = "sum") -> Tensor:
    """
    -sum_t log P(y_t | y_<t, x) over every pair (EOS included).

    reduction="mean" divides by the number of target tokens.
    """
    loss, n_tokens = method.batch_loss(pairs)
    if reduction == "sum":
        return loss
    if reduction == "mean":
        return scale(loss, 1.0 / max(n_tokens, 1))
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def pair_cost(pair: Pair) -> int:
    return len(pair[0]) + len(pair[1]) + 1


class TokenBatcher:
    """
    Endless stream of batches filled up to a token budget.

    Pairs are visited in a fresh seeded permutation each epoch; a batch
    always holds at least one pair.
    """

    def __init__(self, pairs: Sequence[Pair], tokens_per_batch: int, rng: np.random.Generator):
        if not pairs:
            raise DataError("cannot batch an empty corpus")
        self.pairs = list(pairs)
        self.tokens_per_batch = tokens_per_batch
        self.rng = rng
        self._order: List[int] = []

    def __iter__(self) -> Iterator[List[Pair]]:
        return self

    def __next__(self) -> List[Pair]:
        batch: List[Pair] = []
        used = 0
        while True:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(len(self.pairs))][::-1]
            candidate = self.pairs[self._order[-1]]
            if batch and used + pair_cost(candidate) > self.tokens_per_batch:
                return batch
            self._order.pop()
            batch.append(candidate)
            used += pair_cost(candidate)
            if used >= self.tokens_per_batch:
                return batch


def collect_grads(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {
        name: np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        for name, t in params.items()
    }


def train_step(
    method: PromptMethod,
    batch: Sequence[Pair],
    state: AdamState,
    lr: float,
    clip_norm: float = 1.0,
    guard: Optional[TrainingGuard] = None,
) -> StepResult:
    """
    One optimizer step on the mean per-token NLL of the batch.

    Only the method's prompt parameters move; their gradients are cleared
    again before returning.

    Raises:
        GradientError: The backbone is not frozen
        NumericError: Non-finite loss or gradients
    """
    if not method.lm.params.frozen:
        raise GradientError("backbone must be frozen before prompt training")
    params = method.parameters()
    for tensor in params.values():
        tensor.zero_grad()

    loss_sum, n_tokens = method.batch_loss(batch)
    loss_value = loss_sum.item()
    step = state.step + 1
    if guard is not None:
        guard.check_step(step, lr, loss_value, {})
    backward(scale(loss_sum, 1.0 / max(n_tokens, 1)))

    grads = collect_grads(params)
    norms = {name: float(np.sqrt(np.sum(g * g))) for name, g in grads.items()}
    if guard is not None:
        guard.check_step(step, lr, loss_value, norms)
    elif not all(np.isfinite(n) for n in norms.values()):
        raise NumericError(f"Non-finite gradient at step {step}", {"grad_norms": norms})

    clipped, norm = clip_by_global_norm(grads, clip_norm)
    adam_update(params, clipped, state, lr)
    for tensor in params.values():
        tensor.zero_grad()
    return StepResult(step, loss_value, n_tokens, lr, norm)


class PromptTrainer:
    """
    Runs the prompt training loop.

    Writes one metrics record per logging interval and calls
    ``checkpoint_fn(step)`` every checkpoint interval and at the end.
    """

    def __init__(
        self,
        method: PromptMethod,
        config: TrainConfig,
        metrics_path: Optional[Path] = None,
        checkpoint_fn: Optional[Callable[[int], None]] = None,
    ):
        self.method = method
        self.config = config
        self.metrics_path = metrics_path
        self.checkpoint_fn = checkpoint_fn
        self.guard = TrainingGuard(method.lm.params)
        self.state = AdamState()
        self.history: List[Dict[str, Any]] = []

    def _write_metrics(self, record: Dict[str, Any]) -> None:
        self.history.append(record)
        if self.metrics_path is None:
            return
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def train(self, pairs: Sequence[Pair]) -> List[Dict[str, Any]]:
        cfg = self.config
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            self.metrics_path.write_text("")
        batches = TokenBatcher(pairs, cfg.tokens_per_batch, np.random.default_rng([cfg.seed, 7]))
        logger.info(
            f"Training {cfg.method} for {cfg.steps} steps "
            f"({self.method.num_parameters()} trainable parameters)"
        )

        interval_loss, interval_tokens, total_tokens = 0.0, 0, 0
        for step in range(1, cfg.steps + 1):
            lr = lr_schedule(step, cfg.warmup_steps, cfg.learning_rate)
            result = train_step(
                self.method, next(batches), self.state, lr, cfg.clip_norm, self.guard
            )
            interval_loss += result.loss_sum
            interval_tokens += result.n_tokens
            total_tokens += result.n_tokens

            if step % cfg.log_interval == 0:
                record = {
                    "step": step,
                    "loss": interval_loss / max(interval_tokens, 1),
                    "lr": lr,
                    "tokens": total_tokens,
                }
                self._write_metrics(record)
                logger.info(
                    f"step {step}: loss {record['loss']:.4f} lr {lr:.2e} tokens {total_tokens}"
                )
                interval_loss, interval_tokens = 0.0, 0

            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                self.guard.check_backbone(step)
                if self.checkpoint_fn is not None and step != cfg.steps:
                    self.checkpoint_fn(step)

        self.guard.check_backbone(cfg.steps)
        if self.checkpoint_fn is not None:
            self.checkpoint_fn(cfg.steps)
        return self.history


def evaluate_loss(
    method: PromptMethod, pairs: Sequence[Pair], batch_size: int = 32
) -> Tuple[float, int]:
    """Summed NLL and token count over pairs, without recording a graph."""
    total, tokens = 0.0, 0
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            loss, n = method.batch_loss(pairs[start : start + batch_size])
            total += loss.item()
            tokens += n
    return total, tokens
