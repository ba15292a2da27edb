"""
Desk-scale acceptance runs
Slow: deselected by default, run with ``pytest -m slow tests/stability``
"""

import time

import numpy as np
import pytest

from src.core.config import deep_merge, get_default_config
from src.core.controller import ExperimentController
from src.data.corpus import read_corpus
from src.decoding.search import LmDecodeSession, translate_greedy
from src.lm.cache import PastSequence
from src.prompting.methods import create_method
from src.prompting.msp import msp_encode, msp_reencode
from src.prompting.prompts import STAGES, PromptParams, reparameterize
from src.training.optim import AdamState
from src.training.trainer import train_step
from tests.conftest import make_lm, random_ids

pytestmark = pytest.mark.slow

METHODS = ["msp", "msp-shared", "prefix", "prefix-double", "prompt"]

DESK_RUN = {
    "task": {"kind": "reverse", "alphabet_size": 12, "min_len": 3, "max_len": 10},
    "data": {"train_size": 10000, "dev_size": 200, "test_size": 200},
    "train": {"method": "msp", "prompt_length": 16, "steps": 4000},
}

CIPHER_RUN = {
    "task": {"kind": "cipher", "alphabet_size": 8, "min_len": 3, "max_len": 8},
    "data": {"train_size": 2000, "dev_size": 200, "test_size": 200},
    "ablation": {"seeds": [1, 2, 3], "steps": 1500},
}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Pretrained backbone and MSP prompts on the reverse task."""
    root = tmp_path_factory.mktemp("desk")
    controller = ExperimentController(deep_merge(get_default_config(), DESK_RUN))
    started = time.perf_counter()
    controller.cmd_generate(root / "data")
    lm_path = controller.cmd_pretrain(root / "data" / "mono.txt", root / "lm")
    controller.cmd_train(lm_path, root / "data" / "train.tsv", root / "msp")
    elapsed = time.perf_counter() - started
    model = controller.load_translation_model(root / "msp" / "model.mspc")
    test = read_corpus(root / "data" / "test.tsv", controller.vocab)
    return {"controller": controller, "root": root, "model": model, "test": test, "time": elapsed}


class TestGradientFidelity:
    """Finite differences on the default gradcheck instance."""

    def test_default_gradcheck(self):
        """Test that every prompt group passes within a minute."""
        controller = ExperimentController(get_default_config())
        started = time.perf_counter()
        report = controller.cmd_gradcheck()
        assert time.perf_counter() - started < 60.0
        assert report["passed"]
        assert max(report["groups"].values()) <= 1e-2
        assert report["degenerate"] == []
        assert report["dtype"] == "float32"


class TestFrozenBackbone:
    """Long training runs leave theta bitwise unchanged."""

    @pytest.mark.parametrize("name", METHODS)
    def test_five_hundred_steps(self, tiny_lm, name):
        """Test the backbone fingerprint and arrays after 500 steps."""
        before = {k: v.copy() for k, v in tiny_lm.params.to_arrays().items()}
        method = create_method(name, tiny_lm, 3, np.random.default_rng(0), std=0.5)
        pairs = [([6, 7, 8], [8, 7, 6]), ([9, 10], [10, 9]), ([11, 6, 9, 7], [7, 9, 6, 11])]
        state = AdamState()
        for _ in range(500):
            train_step(method, pairs, state, 1e-2)
        for key, value in tiny_lm.params.to_arrays().items():
            assert np.array_equal(value, before[key]), key


class TestCacheEquivalence:
    """Incremental decoding and stage properties over many seeds."""

    @pytest.mark.parametrize("seed", range(100))
    def test_incremental_matches_full(self, tiny_config, float64, seed):
        """Test token-by-token outputs against the full-sequence forward."""
        lm = make_lm(tiny_config, seed)
        tokens = random_ids(np.random.default_rng(seed), 10)
        past, rows = PastSequence(), []
        for i, token in enumerate(tokens):
            out = lm.forward([token], past, position_offset=i)
            rows.append(out.hidden.data[0])
            past = past.then(out.segment)
        np.testing.assert_allclose(np.stack(rows), lm.forward(tokens).hidden.data, atol=1e-5)

    @pytest.mark.parametrize("seed", range(100))
    def test_reencoding_sees_whole_source(self, tiny_config, float64, seed):
        """Test that the last source token reaches H^r[0] and not H^e[0]."""
        lm = make_lm(tiny_config, seed)
        params = PromptParams.init(STAGES, 3, tiny_config, np.random.default_rng(seed), 0.5)
        prompts = reparameterize(params)
        x = random_ids(np.random.default_rng(seed + 1000), 6)
        changed = x[:-1] + [11 if x[-1] != 11 else 6]

        enc_a, enc_b = msp_encode(lm, x, prompts), msp_encode(lm, changed, prompts)
        assert np.array_equal(enc_a.activations()[0].vector(), enc_b.activations()[0].vector())
        re_a = msp_reencode(lm, x, prompts, enc_a)
        re_b = msp_reencode(lm, changed, prompts, enc_b)
        assert np.abs(re_a.activations()[0].vector() - re_b.activations()[0].vector()).max() > 1e-8


class TestDeskLearning:
    """MSP on a pretrained toy backbone learns the reverse task."""

    def test_sequence_accuracy(self, desk_run):
        """Test held-out exact match and the wall-clock budget."""
        controller, root = desk_run["controller"], desk_run["root"]
        report = controller.cmd_evaluate(
            root / "msp" / "model.mspc", root / "data" / "test.tsv", root / "eval.json"
        )
        assert report.seq_accuracy >= 0.90
        assert desk_run["time"] <= 15 * 60

    def test_reverses_abc(self, desk_run):
        """Test a hand-picked input."""
        assert desk_run["model"].translate_text("abc", k=1) == "cba"

    def test_baked_matches_trainable_path(self, desk_run):
        """Test that prompts re-baked from the trainable checkpoint translate identically."""
        controller, root = desk_run["controller"], desk_run["root"]
        model = desk_run["model"]
        baked = controller.load_translation_model(
            root / "msp" / "prompts.baked.mspc", root / "lm" / "lm.mspc"
        )
        for src, _ in list(desk_run["test"])[:20]:
            assert baked.translate(src, k=4).tokens == model.translate(src, k=4).tokens


class TestDecoding:
    """Beam search against greedy on the trained model."""

    def test_beam_one_is_greedy(self, desk_run):
        """Test k=1 against an explicit greedy decode on the test set."""
        model = desk_run["model"]
        for src, _ in desk_run["test"]:
            greedy = translate_greedy(LmDecodeSession(model.lm, model.start(src)), 2 * len(src) + 8)
            assert model.translate(src, k=1).tokens == greedy.tokens

    def test_wider_beam_scores_higher(self, desk_run):
        """Test that k=4 does not lower the mean normalized score."""
        model = desk_run["model"]
        sources = [src for src, _ in desk_run["test"]]
        narrow = np.mean([model.translate(src, k=1).score for src in sources])
        wide = np.mean([model.translate(src, k=4).score for src in sources])
        assert wide >= narrow


class TestAblation:
    """Method comparison on the cipher task."""

    def test_msp_leads(self, tmp_path):
        """Test MSP against the shared prompt and single-template prefix-tuning."""
        controller = ExperimentController(deep_merge(get_default_config(), CIPHER_RUN))
        controller.cmd_generate(tmp_path / "data")
        lm_path = controller.cmd_pretrain(tmp_path / "data" / "mono.txt", tmp_path / "lm")
        result = controller.cmd_ablate(
            lm_path, tmp_path / "data" / "train.tsv", tmp_path / "data" / "dev.tsv", tmp_path / "ab"
        )
        means = result["means"]
        assert means["msp"]["bleu"] >= means["msp-shared"]["bleu"] + 1.0
        assert means["msp"]["bleu"] >= means["prefix"]["bleu"] + 1.0
