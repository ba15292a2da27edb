"""
Activation cache types
Past activations are the currency of prompt and stage composition
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..autodiff.tensor import Tensor, slice_axis
from ..core.errors import ShapeError

SOURCE_TAGS = ("prompt", "encoded", "reencoded", "decoded")


@dataclass(frozen=True)
class Activation:
    """One timestep's per-layer (key, value) pairs, each of width d."""

    keys: Tuple[np.ndarray, ...]
    values: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.keys) != len(self.values):
            raise ShapeError("Activation needs one value vector per key vector")
        widths = {k.shape for k in self.keys} | {v.shape for v in self.values}
        if len(widths) > 1:
            raise ShapeError(f"Activation vectors differ in width: {widths}")

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def vector(self) -> np.ndarray:
        """Concatenated layout [k_1, v_1, ..., k_N, v_N] of width 2Nd."""
        parts = []
        for k, v in zip(self.keys, self.values):
            parts.extend((k, v))
        return np.concatenate(parts)


@dataclass(frozen=True)
class PastSegment:
    """
    A contiguous run of past activations with one source tag.

    keys/values hold one tensor per layer, shaped (M, d) for batch-free
    segments such as prompts, or (B, M, d). ``mask`` marks attendable
    positions per batch row, (B, M); None means all are attendable.
    """

    keys: Tuple[Tensor, ...]
    values: Tuple[Tensor, ...]
    tag: str
    mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.tag not in SOURCE_TAGS:
            raise ShapeError(f"Unknown source tag {self.tag!r}")
        if not self.keys or len(self.keys) != len(self.values):
            raise ShapeError("PastSegment needs matching per-layer keys and values")
        shape = self.keys[0].shape
        for t in self.keys + self.values:
            if t.shape != shape:
                raise ShapeError(f"PastSegment tensors differ: {t.shape} vs {shape}")
        if self.mask is not None and self.mask.shape[-1] != shape[-2]:
            raise ShapeError(f"PastSegment mask {self.mask.shape} vs length {shape[-2]}")

    @property
    def length(self) -> int:
        return self.keys[0].shape[-2]

    @property
    def batch(self) -> Optional[int]:
        shape = self.keys[0].shape
        return None if len(shape) == 2 else shape[0]

    @property
    def width(self) -> int:
        return self.keys[0].shape[-1]

    def activation(self, index: int, row: int = 0) -> Activation:
        """The activation at one position (and batch row)."""
        def pick(t: Tensor) -> np.ndarray:
            return t.data[index] if t.ndim == 2 else t.data[row, index]

        return Activation(
            tuple(pick(k).copy() for k in self.keys),
            tuple(pick(v).copy() for v in self.values),
        )

    @classmethod
    def from_prompt(cls, prompt: Tensor, n_layers: int, d_model: int) -> "PastSegment":
        """
        Split an (L, 2Nd) prompt into per-layer key/value blocks.

        Layer i reads columns [2id, (2i+1)d) as keys and [(2i+1)d, (2i+2)d)
        as values, matching Activation.vector().
        """
        if prompt.ndim != 2 or prompt.shape[1] != 2 * n_layers * d_model:
            raise ShapeError(
                f"Prompt must be (L, {2 * n_layers * d_model}), got {prompt.shape}"
            )
        keys, values = [], []
        for i in range(n_layers):
            keys.append(slice_axis(prompt, 1, 2 * i * d_model, (2 * i + 1) * d_model))
            values.append(
                slice_axis(prompt, 1, (2 * i + 1) * d_model, (2 * i + 2) * d_model)
            )
        return cls(tuple(keys), tuple(values), "prompt")


@dataclass(frozen=True)
class PastSequence:
    """Ordered past activations made of tagged segments."""

    segments: Tuple[PastSegment, ...] = ()

    def __len__(self) -> int:
        return sum(s.length for s in self.segments)

    def then(self, *segments: Optional[PastSegment]) -> "PastSequence":
        """A new sequence with segments appended (None entries are skipped)."""
        return PastSequence(self.segments + tuple(s for s in segments if s is not None))

    def __add__(self, other: "PastSequence") -> "PastSequence":
        return PastSequence(self.segments + other.segments)

    def tags(self) -> List[str]:
        """Source tag of every entry, in order."""
        out: List[str] = []
        for s in self.segments:
            out.extend([s.tag] * s.length)
        return out

    def activations(self, row: int = 0) -> List[Activation]:
        return [s.activation(i, row) for s in self.segments for i in range(s.length)]
