"""
Decoder-only transformer over past activations
GPT-2 style blocks: pre-norm residuals, GELU MLP of width 4d, learned absolute
positions and an output layer tied to the token embedding
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from ..autodiff.tensor import (
    Tensor,
    add,
    concat,
    embedding_lookup,
    gelu,
    layernorm,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax_lastdim,
    transpose,
)
from ..core.errors import ShapeError
from .cache import Activation, PastSegment, PastSequence
from .config import LmConfig

logger = logging.getLogger(__name__)

IdArray = Union[np.ndarray, List[int], int]


def _layer_shapes(config: LmConfig, i: int) -> Dict[str, Tuple[int, ...]]:
    d = config.d_model
    prefix = f"lm.h{i}"
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.w_qkv": (d, 3 * d),
        f"{prefix}.attn.b_qkv": (3 * d,),
        f"{prefix}.attn.w_o": (d, d),
        f"{prefix}.attn.b_o": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.w_in": (d, 4 * d),
        f"{prefix}.mlp.b_in": (4 * d,),
        f"{prefix}.mlp.w_out": (4 * d, d),
        f"{prefix}.mlp.b_out": (d,),
    }


def param_shapes(config: LmConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every backbone tensor, in a fixed order."""
    shapes: Dict[str, Tuple[int, ...]] = {
        "lm.wte": (config.vocab_size, config.d_model),
        "lm.wpe": (config.max_positions, config.d_model),
    }
    for i in range(config.n_layers):
        shapes.update(_layer_shapes(config, i))
    shapes["lm.ln_f.g"] = (config.d_model,)
    shapes["lm.ln_f.b"] = (config.d_model,)
    return shapes


class LmParams:
    """
    Backbone parameters (theta).

    Once frozen, every buffer is read-only and excluded from graphs, so no
    optimizer step can touch it.
    """

    def __init__(self, config: LmConfig, tensors: Dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"LM parameters mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {tensors[name].shape}")
            tensors[name].name = name
        self.config = config
        self._tensors = {name: tensors[name] for name in expected}
        self._frozen = False

    @classmethod
    def init(
        cls,
        config: LmConfig,
        rng: np.random.Generator,
        trainable: bool = True,
        zero_positions: bool = False,
    ) -> "LmParams":
        """Normal(0, init_std) weights, zero biases, unit layer-norm gains."""
        tensors: Dict[str, Tensor] = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf == "b" or leaf.startswith("b_"):
                data = np.zeros(shape)
            elif name == "lm.wpe" and zero_positions:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            tensors[name] = Tensor(data, requires_grad=trainable)
        params = cls(config, tensors)
        if not trainable:
            params.freeze()
        return params

    @classmethod
    def from_arrays(cls, config: LmConfig, arrays: Dict[str, np.ndarray]) -> "LmParams":
        """Build frozen parameters from checkpoint arrays (lm.* entries)."""
        tensors = {
            name: Tensor(array) for name, array in arrays.items() if name.startswith("lm.")
        }
        params = cls(config, tensors)
        params.freeze()
        return params

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        for tensor in self._tensors.values():
            tensor.freeze()
        self._frozen = True
        logger.debug(f"Backbone frozen ({self.num_parameters()} parameters)")

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._tensors)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def fingerprint(self) -> str:
        """sha256 over every buffer; equal fingerprints mean bit-identical theta."""
        digest = hashlib.sha256()
        for name, tensor in self._tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


@dataclass
class LmOutput:
    """Final-layer outputs G and the activations the call produced."""

    hidden: Tensor
    segment: PastSegment


class LanguageModel:
    """
    f_LM: maps input embeddings plus past activations to outputs and new
    activations. Prompts and earlier stages enter only through ``past``.
    """

    def __init__(self, config: LmConfig, params: LmParams):
        if params.config != config:
            raise ShapeError("LmParams were built for a different LmConfig")
        self.config = config
        self.params = params

    # embeddings

    def embed(self, token_ids: IdArray, positions: IdArray) -> Tensor:
        """Token row plus position row; positions never exceed max_positions."""
        ids = np.asarray(token_ids, dtype=np.int64)
        pos = np.broadcast_to(np.asarray(positions, dtype=np.int64), ids.shape)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(
                f"token id outside [0, {self.config.vocab_size}): "
                f"{int(ids.min())}..{int(ids.max())}"
            )
        if pos.size and (pos.min() < 0 or pos.max() >= self.config.max_positions):
            raise ShapeError(
                f"position overflow: index {int(pos.max())} with "
                f"max_positions={self.config.max_positions} (sequence too long)"
            )
        return add(
            embedding_lookup(self.params["lm.wte"], ids),
            embedding_lookup(self.params["lm.wpe"], np.array(pos)),
        )

    def position_embedding(self, positions: IdArray) -> Tensor:
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size and pos.max() >= self.config.max_positions:
            raise ShapeError(
                f"position overflow: index {int(pos.max())} with "
                f"max_positions={self.config.max_positions}"
            )
        return embedding_lookup(self.params["lm.wpe"], pos)

    # transformer

    def _split_heads(self, t: Tensor, keys: bool) -> Tensor:
        """(..., M, d) -> (..., H, M, dh), or (..., H, dh, M) for keys."""
        n_heads, dh = self.config.n_heads, self.config.head_dim
        lead = t.shape[:-2]
        m = t.shape[-2]
        split = reshape(t, lead + (m, n_heads, dh))
        k = len(lead)
        order = tuple(range(k)) + ((k + 1, k + 2, k) if keys else (k + 1, k, k + 2))
        return transpose(split, order)

    def _attention(
        self,
        layer: int,
        h: Tensor,
        past_keys: List[Tuple[Tensor, Tensor, np.ndarray]],
        self_keep: np.ndarray,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        d = self.config.d_model
        p = f"lm.h{layer}.attn"
        qkv = add(matmul(h, self.params[f"{p}.w_qkv"]), self.params[f"{p}.b_qkv"])
        q = slice_axis(qkv, -1, 0, d)
        k = slice_axis(qkv, -1, d, 2 * d)
        v = slice_axis(qkv, -1, 2 * d, 3 * d)

        qh = self._split_heads(q, keys=False)  # (B, H, T, dh)
        blocks = past_keys + [(k, v, self_keep)]
        scores = [matmul(qh, self._split_heads(bk, keys=True)) for bk, _, _ in blocks]
        lengths = [s.shape[-1] for s in scores]
        b, t = h.shape[0], h.shape[1]
        keep = np.concatenate(
            [np.broadcast_to(m, (b, 1, t, n)) for (_, _, m), n in zip(blocks, lengths)],
            axis=-1,
        )
        weights = softmax_lastdim(
            scale(concat(scores, axis=-1), 1.0 / math.sqrt(self.config.head_dim)), keep
        )

        mixed: Optional[Tensor] = None
        start = 0
        for (_, bv, _), n in zip(blocks, lengths):
            part = matmul(
                slice_axis(weights, -1, start, start + n), self._split_heads(bv, keys=False)
            )
            mixed = part if mixed is None else add(mixed, part)
            start += n

        merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        out = add(matmul(merged, self.params[f"{p}.w_o"]), self.params[f"{p}.b_o"])
        return out, k, v

    def _past_blocks(
        self, past: PastSequence, layer: int, batch: int
    ) -> List[Tuple[Tensor, Tensor, np.ndarray]]:
        blocks = []
        for seg in past.segments:
            if seg.width != self.config.d_model or len(seg.keys) != self.config.n_layers:
                raise ShapeError(
                    f"past segment ({len(seg.keys)} layers, width {seg.width}) does not "
                    f"match LM ({self.config.n_layers} layers, width {self.config.d_model})"
                )
            if seg.batch not in (None, 1, batch):
                raise ShapeError(f"past segment batch {seg.batch} vs input batch {batch}")
            mask = np.ones((1, seg.length), dtype=bool) if seg.mask is None else seg.mask
            # (Bm, M) -> (Bm, 1, 1, M) to broadcast over heads and queries
            blocks.append((seg.keys[layer], seg.values[layer], mask[:, None, None, :]))
        return blocks

    def forward_embeddings(
        self,
        x: Tensor,
        past: Optional[PastSequence] = None,
        pad_mask: Optional[np.ndarray] = None,
        tag: str = "decoded",
    ) -> LmOutput:
        """
        Run all layers over input embeddings x of shape (B, T, d).

        Token i attends to every attendable past entry plus tokens 0..i of
        this call. ``pad_mask`` (B, T) marks real tokens; padded tokens are
        hidden from other queries and from every later stage.
        """
        past = past or PastSequence()
        if x.ndim != 3 or x.shape[-1] != self.config.d_model:
            raise ShapeError(
                f"input embeddings must be (B, T, {self.config.d_model}), got {x.shape}"
            )
        batch, t = x.shape[0], x.shape[1]
        if t < 1:
            raise ShapeError("forward needs at least one token")

        causal = np.tril(np.ones((t, t), dtype=bool))
        if pad_mask is None:
            self_keep = causal[None, None, :, :]
        else:
            pad = np.asarray(pad_mask, dtype=bool)
            if pad.shape != (batch, t):
                raise ShapeError(f"pad_mask {pad.shape} vs input ({batch}, {t})")
            visible = pad[:, None, None, :] | np.eye(t, dtype=bool)[None, None]
            self_keep = causal[None, None] & visible

        hidden = x
        keys: List[Tensor] = []
        values: List[Tensor] = []
        for i in range(self.config.n_layers):
            p = f"lm.h{i}"
            h = layernorm(hidden, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            attn, k, v = self._attention(i, h, self._past_blocks(past, i, batch), self_keep)
            hidden = add(hidden, attn)
            h = layernorm(hidden, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            h = gelu(add(matmul(h, self.params[f"{p}.mlp.w_in"]), self.params[f"{p}.mlp.b_in"]))
            h = add(matmul(h, self.params[f"{p}.mlp.w_out"]), self.params[f"{p}.mlp.b_out"])
            hidden = add(hidden, h)
            keys.append(k)
            values.append(v)

        out = layernorm(hidden, self.params["lm.ln_f.g"], self.params["lm.ln_f.b"])
        mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool).copy()
        return LmOutput(out, PastSegment(tuple(keys), tuple(values), tag, mask))

    def forward(
        self,
        tokens: IdArray,
        past: Optional[PastSequence] = None,
        position_offset: int = 0,
        pad_mask: Optional[np.ndarray] = None,
        tag: str = "decoded",
    ) -> LmOutput:
        """
        Sequence application of f_LM over token ids, (T,) or (B, T).

        Positions are position_offset + i. A 1-D input returns (T, d)
        outputs and an unbatched segment.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
            raise ShapeError(f"tokens must be a non-empty (T,) or (B, T) array, got {ids.shape}")
        t = ids.shape[-1]
        if position_offset < 0 or position_offset + t > self.config.max_positions:
            raise ShapeError(
                f"position overflow: offset {position_offset} + length {t} > "
                f"max_positions {self.config.max_positions}"
            )
        positions = np.arange(position_offset, position_offset + t)
        batched = ids if ids.ndim == 2 else ids[None, :]
        x = self.embed(batched, np.broadcast_to(positions, batched.shape))
        out = self.forward_embeddings(x, past, pad_mask, tag)
        return out if ids.ndim == 2 else _squeeze(out)

    def step(
        self, x: Union[Tensor, np.ndarray], past: Optional[PastSequence] = None
    ) -> Tuple[Tensor, Activation]:
        """Single-step application: one input embedding (d,) -> (g, h)."""
        vec = x if isinstance(x, Tensor) else Tensor(x)
        if vec.shape != (self.config.d_model,):
            raise ShapeError(f"step input must be ({self.config.d_model},), got {vec.shape}")
        out = self.forward_embeddings(reshape(vec, (1, 1, self.config.d_model)), past)
        g = reshape(out.hidden, (self.config.d_model,))
        return g, out.segment.activation(0)

    # output layer

    def logits(self, hidden: Tensor) -> Tensor:
        """Tied output layer: hidden @ wte^T."""
        h = hidden if hidden.ndim >= 2 else reshape(hidden, (1, hidden.shape[0]))
        out = matmul(h, transpose(self.params["lm.wte"], (1, 0)))
        return out if hidden.ndim >= 2 else reshape(out, (self.config.vocab_size,))

    def output_distribution(self, g: Union[Tensor, np.ndarray]) -> np.ndarray:
        """Probability vector(s) over the vocabulary for output(s) g."""
        vec = g if isinstance(g, Tensor) else Tensor(g)
        if vec.shape[-1] != self.config.d_model:
            raise ShapeError(f"output width {vec.shape[-1]} vs d_model {self.config.d_model}")
        return softmax_lastdim(self.logits(vec)).data.astype(np.float64)

    def log_probs(self, hidden: Tensor) -> np.ndarray:
        """float64 log-softmax of the tied logits (inference helper)."""
        z = self.logits(hidden).data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _squeeze(out: LmOutput) -> LmOutput:
    """Drop the unit batch axis from a single-sequence call."""
    seg = out.segment
    t, d = out.hidden.shape[1], out.hidden.shape[2]
    return LmOutput(
        reshape(out.hidden, (t, d)),
        PastSegment(
            tuple(reshape(k, (t, d)) for k in seg.keys),
            tuple(reshape(v, (t, d)) for v in seg.values),
            seg.tag,
        ),
    )
