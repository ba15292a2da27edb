"""
Shared fixtures: a tiny frozen LM and prompt bundles in float64
"""

import logging
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.autodiff.tensor import precision
from src.core.config import deep_merge
from src.lm.config import LmConfig
from src.lm.model import LanguageModel, LmParams
from src.prompting.prompts import STAGES, PromptParams, StagePrompts, reparameterize

# Content ids for the tiny vocabulary; 0..5 are specials.
TINY_TOKENS = (6, 7, 8, 9, 10, 11)


@pytest.fixture
def float64():
    """Run the test with float64 tensor storage."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_config() -> LmConfig:
    return LmConfig(
        n_layers=2,
        d_model=8,
        n_heads=2,
        vocab_size=12,
        max_positions=40,
        prompt_length=3,
        init_std=0.3,
    )


def make_lm(config: LmConfig, seed: int = 0) -> LanguageModel:
    params = LmParams.init(config, np.random.default_rng(seed), trainable=False)
    return LanguageModel(config, params)


@pytest.fixture
def tiny_lm(float64, tiny_config) -> LanguageModel:
    return make_lm(tiny_config)


@pytest.fixture
def prompt_params(float64, tiny_config) -> PromptParams:
    return PromptParams.init(STAGES, 3, tiny_config, np.random.default_rng(1), std=0.5)


@pytest.fixture
def stage_prompts(prompt_params) -> StagePrompts:
    return reparameterize(prompt_params)


def random_ids(rng: np.random.Generator, length: int) -> list:
    return [int(t) for t in rng.choice(TINY_TOKENS, size=length)]


# Desk-run settings shrunk so every CLI command finishes in seconds.
TINY_RUN = {
    "lm": {
        "n_layers": 1,
        "d_model": 8,
        "n_heads": 2,
        "max_positions": 40,
        "prompt_length": 2,
        "init_std": 0.1,
    },
    "task": {"kind": "reverse", "alphabet_size": 4, "min_len": 2, "max_len": 4},
    "data": {
        "train_size": 20,
        "dev_size": 5,
        "test_size": 5,
        "monolingual_size": 30,
        "lexicon_size": 10,
    },
    "pretrain": {
        "steps": 3,
        "tokens_per_batch": 64,
        "warmup_steps": 1,
        "held_out": 0,
        "log_interval": 1,
    },
    "train": {
        "prompt_length": 2,
        "steps": 4,
        "tokens_per_batch": 32,
        "warmup_steps": 1,
        "log_interval": 2,
        "checkpoint_interval": 2,
        "learning_rate": 0.01,
    },
    "decoding": {"beam": 2},
    "ablation": {"seeds": [1, 2], "steps": 2},
    "gradcheck": {
        "n_layers": 3,
        "d_model": 8,
        "n_heads": 2,
        "vocab_size": 12,
        "prompt_length": 2,
        "source_length": 3,
        "target_length": 3,
    },
}


def write_tiny_config(directory: Path, **sections) -> Path:
    document = deep_merge(TINY_RUN, sections)
    path = directory / "tiny.yaml"
    path.write_text(yaml.safe_dump(document))
    return path


@pytest.fixture
def tiny_run_config(tmp_path) -> Path:
    return write_tiny_config(tmp_path)


@pytest.fixture
def cli_env(tmp_path, monkeypatch):
    """Log into tmp_path and drop the handlers main() installs."""
    monkeypatch.setenv("MSP_LOG_FILE", str(tmp_path / "logs" / "msprompt.log"))
    monkeypatch.delenv("MSP_LOG", raising=False)
    root = logging.getLogger()
    level = root.level
    yield tmp_path
    for handler in list(root.handlers):
        if getattr(handler, "_msprompt", False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)
