"""
Synthetic tasks, vocabulary and corpus files
"""

from .corpus import ParallelCorpus, read_corpus, write_corpus
from .tasks import TaskSpec, build_template, gen_corpus, gen_monolingual, gen_splits
from .vocab import BOS, EOS, PAD, SEP, SEP1, SEP2, Vocab

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "ParallelCorpus",
    "SEP",
    "SEP1",
    "SEP2",
    "TaskSpec",
    "Vocab",
    "build_template",
    "gen_corpus",
    "gen_monolingual",
    "gen_splits",
    "read_corpus",
    "write_corpus",
]
