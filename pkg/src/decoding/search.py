"""
Greedy and beam search
Search runs against a DecodeSession: any object that reorders its hypothesis
states and returns next-token log-probabilities
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

import numpy as np

from ..autodiff.tensor import Tensor, no_grad
from ..core.errors import ShapeError
from ..data.vocab import EOS
from ..lm.cache import PastSegment
from ..lm.model import LanguageModel
from ..prompting.methods import DecodeStart

logger = logging.getLogger(__name__)


class DecodeSession(Protocol):
    """Hypothesis states for one source sentence."""

    first_token: int

    def can_advance(self) -> bool:
        """False once another step would exceed the position limit."""

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """
        Keep rows ``parents`` of the current states, feed ``tokens`` and
        return float64 next-token log-probabilities, (len(tokens), V).
        """


class LmDecodeSession:
    """
    Decoding-stage states over a frozen LM.

    The source-side past is shared read-only by every hypothesis; only the
    decoded segment is stacked per hypothesis and reordered by parent index.
    """

    def __init__(self, lm: LanguageModel, start: DecodeStart):
        self.lm = lm
        self.start = start
        self.first_token = start.first_token
        self.keys: Optional[List[np.ndarray]] = None
        self.values: Optional[List[np.ndarray]] = None
        self.steps = 0

    @property
    def position(self) -> int:
        return self.start.start_position + self.steps

    def can_advance(self) -> bool:
        return self.position < self.lm.config.max_positions

    def _decoded(self) -> Optional[PastSegment]:
        if self.keys is None or self.values is None:
            return None
        return PastSegment(
            tuple(Tensor(k) for k in self.keys), tuple(Tensor(v) for v in self.values), "decoded"
        )

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        parents = np.asarray(parents, dtype=np.int64)
        tokens = np.asarray(tokens, dtype=np.int64)
        if parents.shape != tokens.shape or parents.ndim != 1:
            raise ShapeError(f"parents {parents.shape} vs tokens {tokens.shape}")
        with no_grad():
            if self.keys is not None and self.values is not None:
                self.keys = [k[parents] for k in self.keys]
                self.values = [v[parents] for v in self.values]
            past = self.start.past.then(self._decoded())
            out = self.lm.forward(tokens[:, None], past, position_offset=self.position)
            new_keys = [k.data for k in out.segment.keys]
            new_values = [v.data for v in out.segment.values]
            if self.keys is None or self.values is None:
                self.keys, self.values = new_keys, new_values
            else:
                self.keys = [np.concatenate([a, b], axis=1) for a, b in zip(self.keys, new_keys)]
                self.values = [
                    np.concatenate([a, b], axis=1) for a, b in zip(self.values, new_values)
                ]
            self.steps += 1
            return self.lm.log_probs(out.hidden)[:, 0, :]


@dataclass
class Translation:
    """Best hypothesis: tokens without EOS, summed and length-normalized log-prob."""

    tokens: List[int]
    logprob: float
    score: float
    truncated: bool = False


def _normalized(logprob: float, length: int) -> float:
    return logprob / max(length, 1)


def translate_greedy(session: DecodeSession, max_len: int) -> Translation:
    """
    Argmax decoding until EOS, max_len tokens or the position limit.

    Ties go to the lowest token id.
    """
    tokens: List[int] = []
    logprob = 0.0
    current = session.first_token
    for _ in range(max_len):
        if not session.can_advance():
            break
        lp = session.advance(np.zeros(1, dtype=np.int64), np.array([current]))[0]
        nxt = int(np.argmax(lp))
        logprob = logprob + lp[nxt]
        if nxt == EOS:
            return Translation(tokens, float(logprob), _normalized(logprob, len(tokens) + 1))
        tokens.append(nxt)
        current = nxt
    return Translation(tokens, float(logprob), _normalized(logprob, len(tokens)), True)


def beam_search(session: DecodeSession, k: int, max_len: int) -> Translation:
    """
    Length-normalized beam search with a shrinking beam.

    Each step keeps the top (k - finished) expansions by summed log-prob;
    expansions ending in EOS leave the beam. Equal scores are ordered by the
    flat (parent, token) index, so k=1 reproduces greedy decoding exactly.
    """
    if k < 1:
        raise ValueError(f"beam size must be >= 1, got {k}")
    live: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Translation] = []
    parents = np.zeros(1, dtype=np.int64)
    inputs = np.array([session.first_token], dtype=np.int64)

    for _ in range(max_len):
        if not session.can_advance():
            break
        lp = session.advance(parents, inputs)
        vocab = lp.shape[1]
        totals = np.array([score for _, score in live])[:, None] + lp
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: k - len(finished)]

        next_live: List[Tuple[List[int], float]] = []
        next_parents: List[int] = []
        for index in order:
            parent, token = divmod(int(index), vocab)
            seq, total = live[parent][0], flat[index]
            if token == EOS:
                finished.append(Translation(seq, float(total), _normalized(total, len(seq) + 1)))
            else:
                next_live.append((seq + [token], total))
                next_parents.append(parent)
        live = next_live
        if not live:
            break
        parents = np.array(next_parents, dtype=np.int64)
        inputs = np.array([seq[-1] for seq, _ in live], dtype=np.int64)

    if len(finished) < k:
        # hypotheses still open at max_len or the position limit
        for seq, total in live:
            finished.append(Translation(seq, float(total), _normalized(total, len(seq)), True))
    best = finished[0]
    for hyp in finished[1:]:
        if hyp.score > best.score:
            best = hyp
    return best


def default_max_len(source_length: int) -> int:
    return 2 * source_length + 8
