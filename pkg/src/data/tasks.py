"""
Synthetic translation tasks
Deterministic string transductions that make exact-match evaluation possible
"""

import logging
import string
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np

from ..core.errors import ConfigError, DataError
from .corpus import ParallelCorpus
from .vocab import EOS, SEP, SEP1, SEP2, Vocab

logger = logging.getLogger(__name__)

TASK_KINDS = ("reverse", "cipher", "copy", "sort")
TEMPLATE_KINDS = ("single", "double")


@dataclass(frozen=True)
class TaskSpec:
    """A seeded task over the first ``alphabet_size`` lowercase letters."""

    kind: str = "reverse"
    alphabet_size: int = 8
    min_len: int = 3
    max_len: int = 8
    seed: int = 1234
    shift: int = 1

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.alphabet_size < 2:
            raise DataError(f"task alphabet needs at least 2 symbols, got {self.alphabet_size}")
        if self.alphabet_size > len(string.ascii_lowercase):
            raise ConfigError(f"task.alphabet_size must be <= 26, got {self.alphabet_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(
                f"task length range [{self.min_len}, {self.max_len}] is not valid"
            )

    @property
    def alphabet(self) -> str:
        return string.ascii_lowercase[: self.alphabet_size]

    def apply(self, source: str) -> str:
        """The task's pure function from source to target."""
        if self.kind == "reverse":
            return source[::-1]
        if self.kind == "copy":
            return source
        if self.kind == "sort":
            return "".join(sorted(source))
        alphabet = self.alphabet
        return "".join(
            alphabet[(alphabet.index(c) + self.shift) % len(alphabet)] for c in source
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown task keys: {sorted(unknown)}")
        return cls(**data)


def sample_source(spec: TaskSpec, index: int) -> str:
    """Source string number ``index``; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    letters = rng.integers(0, spec.alphabet_size, size=length)
    return "".join(spec.alphabet[i] for i in letters)


def gen_corpus(spec: TaskSpec, n: int, vocab: Vocab, start: int = 0) -> ParallelCorpus:
    """n pairs drawn from indices start..start+n-1 of the seeded generator."""
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    texts = []
    for index in range(start, start + n):
        source = sample_source(spec, index)
        texts.append((source, spec.apply(source)))
    return ParallelCorpus.from_texts(texts, vocab)


def gen_splits(
    spec: TaskSpec, sizes: Mapping[str, int], vocab: Vocab
) -> Dict[str, ParallelCorpus]:
    """
    Disjoint splits: a source string lands in at most one split.

    Splits are filled in the order given; indices continue across splits so
    the result is deterministic.

    Raises:
        DataError: The task has too few distinct strings for the sizes asked
    """
    capacity = sum(
        spec.alphabet_size**length for length in range(spec.min_len, spec.max_len + 1)
    )
    wanted = sum(sizes.values())
    if wanted > capacity:
        raise DataError(f"task has {capacity} distinct sources, {wanted} requested")

    seen = set()
    index = 0
    budget = 50 * wanted + 1000
    splits: Dict[str, ParallelCorpus] = {}
    for name, size in sizes.items():
        texts: List[Tuple[str, str]] = []
        while len(texts) < size:
            if index >= budget:
                raise DataError(f"could not draw {size} fresh sources for split {name!r}")
            source = sample_source(spec, index)
            index += 1
            if source in seen:
                continue
            seen.add(source)
            texts.append((source, spec.apply(source)))
        splits[name] = ParallelCorpus.from_texts(texts, vocab)
        logger.debug(f"Split {name}: {size} pairs")
    return splits


def gen_monolingual(spec: TaskSpec, n: int, lexicon_size: int = 200) -> List[str]:
    """
    Sentences of lexicon words over the task alphabet, for LM pretraining.

    The lexicon is drawn once from the task seed; sentence i is drawn from
    its own index-seeded stream.
    """
    if n < 1:
        raise DataError(f"monolingual corpus size must be >= 1, got {n}")
    lex_rng = np.random.default_rng([spec.seed, 0x4C4558])
    lexicon = []
    for _ in range(lexicon_size):
        length = int(lex_rng.integers(spec.min_len, spec.max_len + 1))
        letters = lex_rng.integers(0, spec.alphabet_size, size=length)
        lexicon.append("".join(spec.alphabet[i] for i in letters))
    sentences = []
    for index in range(n):
        rng = np.random.default_rng([spec.seed, 0x4D4F4E, index])
        words = rng.integers(0, lexicon_size, size=int(rng.integers(1, 4)))
        sentences.append(" ".join(lexicon[w] for w in words))
    return sentences


def build_template(
    x: List[int], y: List[int], kind: str = "single"
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single-sequence training template and its loss mask.

    single: x <S> y </s>
    double: x <S1> x <S2> y </s>
    The mask is True exactly on the y and </s> positions.
    """
    if kind == "single":
        head = list(x) + [SEP]
    elif kind == "double":
        head = list(x) + [SEP1] + list(x) + [SEP2]
    else:
        raise DataError(f"template kind must be one of {TEMPLATE_KINDS}, got {kind!r}")
    ids = np.array(head + list(y) + [EOS], dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(head) :] = True
    return ids, mask
