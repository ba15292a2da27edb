"""
Integration tests for the msprompt command line
Runs every command end to end on a tiny configuration
"""

import json

import pytest

from src.core.controller import EXIT_OK, main

METHODS = ["msp", "msp-shared", "prefix", "prefix-double", "prompt"]


def _run(config, *argv) -> int:
    return main(["--config", str(config), *argv])


@pytest.fixture
def pipeline(cli_env, tiny_run_config):
    """Generated data and a pretrained LM under cli_env."""
    data, lm = cli_env / "data", cli_env / "lm"
    assert _run(tiny_run_config, "generate", "--out", str(data)) == EXIT_OK
    code = _run(tiny_run_config, "pretrain", "--data", str(data / "mono.txt"), "--out", str(lm))
    assert code == EXIT_OK
    return {"config": tiny_run_config, "data": data, "lm": lm / "lm.mspc", "root": cli_env}


class TestPipeline:
    """generate, pretrain, train, translate, evaluate, ablate, gradcheck."""

    @pytest.mark.parametrize("method", METHODS)
    def test_train_translate_evaluate(self, pipeline, method):
        """Test one prompting method through every downstream command."""
        root, data = pipeline["root"], pipeline["data"]
        run = root / method
        code = _run(
            pipeline["config"],
            "train",
            "--lm",
            str(pipeline["lm"]),
            "--data",
            str(data / "train.tsv"),
            "--out",
            str(run),
            "--method",
            method,
        )
        assert code == EXIT_OK
        assert json.loads((run / "model.json").read_text())["method"] == method

        source = root / "input.txt"
        source.write_text("abc\n\ndcba\n")
        full, split = root / f"{method}.full.txt", root / f"{method}.split.txt"
        assert (
            _run(
                pipeline["config"],
                "translate",
                "--checkpoint",
                str(run / "model.mspc"),
                "--input",
                str(source),
                "--out",
                str(full),
            )
            == EXIT_OK
        )
        assert (
            _run(
                pipeline["config"],
                "translate",
                "--checkpoint",
                str(run / "prompts.baked.mspc"),
                "--lm",
                str(pipeline["lm"]),
                "--input",
                str(source),
                "--out",
                str(split),
            )
            == EXIT_OK
        )
        assert full.read_text() == split.read_text()
        assert full.read_text().split("\n")[1] == ""

        report_path = run / "eval.json"
        code = _run(
            pipeline["config"],
            "evaluate",
            "--checkpoint",
            str(run / "model.mspc"),
            "--data",
            str(data / "test.tsv"),
            "--out",
            str(report_path),
        )
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["n_examples"] == 5
        assert 0.0 <= report["bleu"] <= 100.0
        assert 0.0 <= report["seq_accuracy"] <= 1.0

    def test_ablate(self, pipeline):
        """Test that ablation trains every method per seed and reports means."""
        out = pipeline["root"] / "ablation"
        code = _run(
            pipeline["config"],
            "ablate",
            "--lm",
            str(pipeline["lm"]),
            "--data",
            str(pipeline["data"] / "train.tsv"),
            "--dev",
            str(pipeline["data"] / "dev.tsv"),
            "--out",
            str(out),
        )
        assert code == EXIT_OK
        result = json.loads((out / "ablation.json").read_text())
        assert result["steps"] == 2
        assert len(result["rows"]) == 4 * 2
        assert set(result["means"]) == {"msp", "msp-shared", "prefix-double", "prefix"}
        assert (out / "msp" / "seed1" / "prompts.baked.mspc").exists()

    def test_overrides_from_flags(self, pipeline):
        """Test that --steps and --prompt-length reach the resolved config."""
        run = pipeline["root"] / "override"
        code = _run(
            pipeline["config"],
            "train",
            "--lm",
            str(pipeline["lm"]),
            "--data",
            str(pipeline["data"] / "train.tsv"),
            "--out",
            str(run),
            "--steps",
            "1",
            "--prompt-length",
            "3",
        )
        assert code == EXIT_OK
        meta = json.loads((run / "prompts.baked.json").read_text())
        assert meta["prompt_length"] == 3
        assert meta["step"] == 1

    def test_log_file_written(self, pipeline):
        """Test that commands log into MSP_LOG_FILE."""
        log = pipeline["root"] / "logs" / "msprompt.log"
        assert log.exists()
        assert "Generated reverse task data" in log.read_text()

    def test_gradcheck(self, pipeline):
        """Test the gradient check command alongside the pipeline."""
        out = pipeline["root"] / "gc"
        assert _run(pipeline["config"], "gradcheck", "--out", str(out)) == EXIT_OK
        assert json.loads((out / "gradcheck.json").read_text())["passed"]
