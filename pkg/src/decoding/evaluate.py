"""
Translation with a trained prompt bundle, and corpus evaluation
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..autodiff.tensor import Tensor, default_dtype, no_grad, precision
from ..data.corpus import ParallelCorpus
from ..data.vocab import Vocab
from ..lm.model import LanguageModel
from ..prompting.methods import DecodeStart, source_context
from .metrics import EvalReport, score_corpus
from .search import LmDecodeSession, Translation, beam_search, default_max_len, translate_greedy

logger = logging.getLogger(__name__)


@dataclass
class TranslationModel:
    """
    Frozen LM plus baked prompts for one method.

    Holds no trainable state, so translate() may run from several threads.
    """

    lm: LanguageModel
    method: str
    prompts: Dict[str, Tensor]
    vocab: Vocab
    dtype: np.dtype = field(default_factory=default_dtype)

    def start(self, source: Sequence[int]) -> DecodeStart:
        """Source-side context, computed once per sentence."""
        with no_grad():
            return source_context(self.method, self.lm, self.prompts, source)

    def translate(
        self, source: Sequence[int], k: int = 4, max_len: Optional[int] = None
    ) -> Translation:
        limit = default_max_len(len(source)) if max_len is None else max_len
        with precision(self.dtype), no_grad():
            session = LmDecodeSession(self.lm, self.start(source))
            if k == 1:
                return translate_greedy(session, limit)
            return beam_search(session, k, limit)

    def translate_text(self, text: str, k: int = 4, max_len: Optional[int] = None) -> str:
        result = self.translate(self.vocab.tokenize(text), k, max_len)
        return self.vocab.detokenize(result.tokens, strip_specials=True)


def translate_all(
    model: TranslationModel,
    sources: Sequence[Sequence[int]],
    k: int = 4,
    threads: int = 1,
    max_len: Optional[int] = None,
) -> List[Translation]:
    """Decode every source; output order follows input order."""
    if threads <= 1:
        return [model.translate(src, k, max_len) for src in sources]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="Decode") as pool:
        return list(pool.map(lambda src: model.translate(src, k, max_len), sources))


def evaluate(
    model: TranslationModel,
    corpus: ParallelCorpus,
    k: int = 4,
    threads: int = 1,
) -> EvalReport:
    """Beam-decode every source and score against the references."""
    results = translate_all(model, corpus.sources(), k, threads)
    candidates = [r.tokens for r in results]
    truncated = sum(r.truncated for r in results)
    mean_score = float(np.mean([r.score for r in results]))
    if truncated:
        logger.warning(f"{truncated} of {len(results)} outputs were truncated")
    return score_corpus(candidates, corpus.targets(), truncated, mean_score)
