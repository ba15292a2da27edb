"""
Parallel corpus container and TSV I/O
One "source<TAB>target" pair per line, UTF-8, no header
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

from ..core.errors import DataError
from .vocab import Vocab

logger = logging.getLogger(__name__)

Pair = Tuple[List[int], List[int]]


@dataclass
class ParallelCorpus:
    """Tokenized (source, target) pairs; both sides non-empty, ids in vocab."""

    pairs: List[Pair]
    vocab: Vocab = field(repr=False)

    def __post_init__(self) -> None:
        for n, (src, tgt) in enumerate(self.pairs, start=1):
            if not src or not tgt:
                raise DataError(f"pair {n}: empty {'source' if not src else 'target'}")
            self.vocab.check_ids(src, f"pair {n} source: ")
            self.vocab.check_ids(tgt, f"pair {n} target: ")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def sources(self) -> List[List[int]]:
        return [src for src, _ in self.pairs]

    def targets(self) -> List[List[int]]:
        return [tgt for _, tgt in self.pairs]

    def source_texts(self) -> List[str]:
        return [self.vocab.detokenize(src) for src, _ in self.pairs]

    def target_texts(self) -> List[str]:
        return [self.vocab.detokenize(tgt) for _, tgt in self.pairs]

    @classmethod
    def from_texts(cls, texts: Sequence[Tuple[str, str]], vocab: Vocab) -> "ParallelCorpus":
        return cls([(vocab.tokenize(s), vocab.tokenize(t)) for s, t in texts], vocab)


def read_corpus(path: Union[str, Path], vocab: Vocab) -> ParallelCorpus:
    """
    Load a TSV corpus.

    Raises:
        DataError: Missing tab, empty side, unknown character or empty file;
            the message names the file and line
        FileNotFoundError: Missing file
    """
    path = Path(path)
    pairs: List[Pair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if "\t" not in line:
                raise DataError(f"{path}: line {lineno}: missing tab separator")
            source, target = line.split("\t", 1)
            if not source or not target:
                side = "source" if not source else "target"
                raise DataError(f"{path}: line {lineno}: empty {side}")
            try:
                pairs.append((vocab.tokenize(source), vocab.tokenize(target)))
            except DataError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    if not pairs:
        raise DataError(f"{path}: empty corpus")
    logger.debug(f"Read {len(pairs)} pairs from {path}")
    return ParallelCorpus(pairs, vocab)


def write_corpus(path: Union[str, Path], corpus: ParallelCorpus) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for source, target in zip(corpus.source_texts(), corpus.target_texts()):
            fh.write(f"{source}\t{target}\n")
    logger.info(f"Wrote {len(corpus)} pairs to {path}")
    return path


def read_lines(path: Union[str, Path]) -> List[str]:
    """Plain-text lines (monolingual corpora and translate inputs)."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").rstrip("\r") for line in fh]


def write_lines(path: Union[str, Path], lines: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(f"{line}\n")
    return path
