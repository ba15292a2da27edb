"""
Language model configuration
"""

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from ..core.errors import ConfigError

# Paper-scale backbone (24 layers, hidden size 1024) for reference; the desk
# defaults below are what the repository trains.
PAPER_N_LAYERS = 24
PAPER_D_MODEL = 1024


@dataclass(frozen=True)
class LmConfig:
    """Shape of the decoder-only transformer."""

    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 50
    max_positions: int = 64
    prompt_length: int = 16
    init_std: float = 0.02

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"lm.{name} must be >= 1, got {getattr(self, name)}")
        if self.prompt_length < 0:
            raise ConfigError(f"lm.prompt_length must be >= 0, got {self.prompt_length}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"lm.d_model ({self.d_model}) must be divisible by "
                f"lm.n_heads ({self.n_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def activation_width(self) -> int:
        """Width of one activation h_t: N (key, value) pairs of width d."""
        return 2 * self.n_layers * self.d_model

    def shape_dict(self) -> Dict[str, int]:
        """The fields that determine tensor shapes (hashed into checkpoints)."""
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.shape_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown lm config keys: {sorted(unknown)}")
        return cls(**data)
