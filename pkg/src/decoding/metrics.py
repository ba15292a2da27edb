"""
Evaluation metrics
Corpus BLEU-4 with exponential smoothing, sequence and token accuracy
"""

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Hashable, List, Sequence, Tuple, Union

from ..core.errors import DataError

logger = logging.getLogger(__name__)

MAX_ORDER = 4

Tokens = Sequence[Hashable]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> None:
    if len(candidates) != len(references):
        raise DataError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise DataError("empty corpus: nothing to score")


def bleu_stats(
    candidates: Sequence[Tokens], references: Sequence[Tokens]
) -> Tuple[List[int], List[int], int, int]:
    """Clipped n-gram matches and totals per order, plus both corpus lengths."""
    _check_pairs(candidates, references)
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    sys_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        sys_len += len(cand)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            correct[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    return correct, total, sys_len, ref_len


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """
    Corpus BLEU-4 in [0, 100] over token sequences.

    Orders with zero matches get precision 1 / (2^k * total), k counting the
    zero-match orders so far. Orders with no candidate n-grams at all are
    left out of the geometric mean, so short corpora use a lower effective
    order. No unigram match scores 0.
    """
    correct, total, sys_len, ref_len = bleu_stats(candidates, references)
    if correct[0] == 0:
        return 0.0

    orders = [n for n in range(MAX_ORDER) if total[n] > 0]
    log_sum = 0.0
    smooth = 1.0
    for n in orders:
        if correct[n] == 0:
            smooth *= 2.0
            precision = 1.0 / (smooth * total[n])
        else:
            precision = correct[n] / total[n]
        log_sum += math.log(precision)

    brevity = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * brevity * math.exp(log_sum / len(orders))


def sequence_accuracy(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    _check_pairs(candidates, references)
    hits = sum(list(c) == list(r) for c, r in zip(candidates, references))
    return hits / len(candidates)


def token_accuracy(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Position-wise matches over the longer of each candidate/reference pair."""
    _check_pairs(candidates, references)
    matches = slots = 0
    for cand, ref in zip(candidates, references):
        matches += sum(a == b for a, b in zip(cand, ref))
        slots += max(len(cand), len(ref))
    return matches / slots if slots else 1.0


@dataclass
class EvalReport:
    bleu: float
    seq_accuracy: float
    token_accuracy: float
    n_examples: int
    truncated: int = 0
    mean_score: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def score_corpus(
    candidates: Sequence[Tokens],
    references: Sequence[Tokens],
    truncated: int = 0,
    mean_score: float = 0.0,
) -> EvalReport:
    report = EvalReport(
        bleu=bleu(candidates, references),
        seq_accuracy=sequence_accuracy(candidates, references),
        token_accuracy=token_accuracy(candidates, references),
        n_examples=len(candidates),
        truncated=truncated,
        mean_score=mean_score,
    )
    logger.info(
        f"BLEU {report.bleu:.2f}, seq-acc {report.seq_accuracy:.3f}, "
        f"token-acc {report.token_accuracy:.3f} over {report.n_examples} examples"
    )
    return report
