"""
msprompt Main Controller
Command-line entry point: data generation, pretraining, prompt training,
translation, evaluation, ablation and gradient checks
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from ..autodiff.gradcheck import GroupCheck, check_gradients, corrupt_backward
from ..autodiff.ops import OPS
from ..autodiff.tensor import precision
from ..data.corpus import ParallelCorpus, read_corpus, read_lines, write_corpus, write_lines
from ..data.tasks import gen_monolingual, gen_splits
from ..data.vocab import Vocab
from ..decoding.evaluate import TranslationModel, evaluate, translate_all
from ..decoding.metrics import EvalReport
from ..lm.checkpoint import (
    check_config_hash,
    lm_metadata,
    load_checkpoint,
    read_sidecar,
    save_checkpoint,
)
from ..lm.config import LmConfig
from ..lm.model import LanguageModel, LmParams
from ..prompting.methods import (
    PromptMethod,
    baked_names,
    baked_tensors,
    create_method,
)
from ..training.pretrain import pretrain_lm
from ..training.trainer import PromptTrainer, TrainConfig, nll_loss
from .config import (
    DEFAULT_LOG_FILE,
    RunConfig,
    configure_logging,
    load_config,
    save_resolved_config,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GradientError,
    MSPError,
    NumericError,
    ShapeError,
)

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def positions_needed(method: str, source_len: int, target_len: int, prompt_length: int) -> int:
    """Longest position range one training pair occupies under a method."""
    if method in ("msp", "msp-shared"):
        return max(source_len, target_len + 1)
    if method == "prefix":
        return source_len + target_len + 2
    if method == "prefix-double":
        return 2 * source_len + target_len + 3
    return prompt_length + source_len + target_len + 2


class ExperimentController:
    """
    Runs msprompt commands against one resolved configuration.

    Every command writes config.resolved.yaml into its output directory.
    """

    def __init__(self, config: Mapping[str, Any]):
        """
        Initialize the controller.

        Args:
            config: Resolved configuration (defaults merged with YAML)
        """
        self.config = dict(config)
        self.run = RunConfig.from_dict(self.config)
        self.vocab = self.run.vocab()
        logger.info(
            f"ExperimentController initialized (vocab {len(self.vocab)}, "
            f"precision {self.run.precision})"
        )

    # checkpoints

    def load_lm(self, path: Path) -> LanguageModel:
        """Frozen backbone from an MSPC checkpoint with its sidecar."""
        arrays = load_checkpoint(path)
        meta = read_sidecar(path)
        config = LmConfig.from_dict(meta["lm"])
        check_config_hash(meta, config, path)
        if config.vocab_size != len(self.vocab):
            raise CheckpointError(
                f"{path}: LM vocabulary {config.vocab_size} vs configured {len(self.vocab)}"
            )
        return LanguageModel(config, LmParams.from_arrays(config, arrays))

    def _decoding_overrides(
        self, beam: Optional[int], threads: Optional[int]
    ) -> Tuple[int, int]:
        k = beam if beam is not None else self.run.decoding.beam
        workers = threads if threads is not None else self.run.decoding.threads
        if k < 1:
            raise ConfigError(f"--beam must be >= 1, got {k}")
        if workers < 1:
            raise ConfigError(f"--threads must be >= 1, got {workers}")
        return k, workers

    def load_translation_model(
        self, checkpoint: Path, lm_path: Optional[Path] = None
    ) -> TranslationModel:
        """
        Inference bundle from a model checkpoint, or from baked prompts plus
        a separate LM checkpoint.
        """
        arrays = load_checkpoint(checkpoint)
        meta = read_sidecar(checkpoint)
        method = meta.get("method")
        if method is None:
            raise CheckpointError(f"{checkpoint}: sidecar names no prompting method")
        if any(name.startswith("lm.") for name in arrays):
            config = LmConfig.from_dict(meta["lm"])
            lm = LanguageModel(config, LmParams.from_arrays(config, arrays))
        elif lm_path is not None:
            lm = self.load_lm(lm_path)
        else:
            raise CheckpointError(f"{checkpoint}: holds prompts only; pass --lm")
        check_config_hash(meta, lm.config, checkpoint)

        prompts = baked_tensors(arrays)
        missing = [n for n in baked_names(method) if n not in prompts]
        if missing:
            raise CheckpointError(f"{checkpoint}: missing baked prompts {missing}")
        vocab = Vocab(meta.get("charset", self.run.charset), strict=self.run.strict_vocab)
        return TranslationModel(lm, method, prompts, vocab)

    def _write_prompt_checkpoints(
        self, method: PromptMethod, out_dir: Path, config: TrainConfig, step: int, final: bool
    ) -> Dict[str, Path]:
        lm = method.lm
        meta = lm_metadata(
            lm.config,
            method=config.method,
            prompt_length=config.prompt_length,
            charset=self.run.charset,
            step=step,
        )
        if not final:
            path = out_dir / f"prompts.step{step}.mspc"
            return {"trainable": save_checkpoint(path, method.trainable_arrays(), meta)}

        trainable = method.trainable_arrays()
        baked = method.bake()
        model_arrays: Dict[str, np.ndarray] = dict(lm.params.to_arrays())
        model_arrays.update(baked)
        model_arrays.update(trainable)
        return {
            "trainable": save_checkpoint(
                out_dir / "prompts.trainable.mspc", trainable, dict(meta, kind="trainable")
            ),
            "baked": save_checkpoint(
                out_dir / "prompts.baked.mspc", baked, dict(meta, kind="baked")
            ),
            "model": save_checkpoint(
                out_dir / "model.mspc", model_arrays, dict(meta, kind="model")
            ),
        }

    # commands

    def cmd_generate(self, out_dir: Path) -> Dict[str, Path]:
        """Write train/dev/test TSV splits, monolingual text and the task spec."""
        data = self.config["data"]
        task = self.run.task
        splits = gen_splits(
            task,
            {"train": data["train_size"], "dev": data["dev_size"], "test": data["test_size"]},
            self.vocab,
        )
        paths = {
            name: write_corpus(out_dir / f"{name}.tsv", corpus) for name, corpus in splits.items()
        }
        mono = gen_monolingual(task, data["monolingual_size"], data["lexicon_size"])
        paths["mono"] = write_lines(out_dir / "mono.txt", mono)
        task_path = out_dir / "task.json"
        with open(task_path, "w", encoding="utf-8") as fh:
            json.dump(task.to_dict(), fh, indent=2, sort_keys=True)
        paths["task"] = task_path
        save_resolved_config(self.config, out_dir)
        logger.info(f"Generated {task.kind} task data in {out_dir}")
        return paths

    def cmd_pretrain(
        self,
        data_path: Path,
        out_dir: Path,
        steps: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> Path:
        """Pretrain the toy backbone on monolingual text; writes lm.mspc."""
        config = self.run.pretrain
        if steps is not None:
            config = replace(config, steps=steps)
        if seed is not None:
            config = replace(config, seed=seed)
        lines = [line for line in read_lines(data_path) if line]
        sentences = []
        for lineno, line in enumerate(lines, start=1):
            try:
                sentences.append(self.vocab.tokenize(line))
            except DataError as e:
                raise DataError(f"{data_path}: line {lineno}: {e}") from e

        with precision(self.run.precision):
            params, stats = pretrain_lm(sentences, self.run.lm, config)
        path = save_checkpoint(
            out_dir / "lm.mspc",
            params.to_arrays(),
            lm_metadata(self.run.lm, kind="lm", charset=self.run.charset, pretrain=stats),
        )
        save_resolved_config(self.config, out_dir)
        return path

    def _train_method(
        self,
        lm: LanguageModel,
        corpus: ParallelCorpus,
        config: TrainConfig,
        out_dir: Path,
    ) -> Tuple[PromptMethod, Dict[str, Path]]:
        limit = lm.config.max_positions
        for n, (src, tgt) in enumerate(corpus, start=1):
            need = positions_needed(config.method, len(src), len(tgt), config.prompt_length)
            if need > limit:
                raise DataError(
                    f"pair {n} needs {need} positions under {config.method}; "
                    f"max_positions is {limit}"
                )

        out_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([config.seed, 3])
        method = create_method(config.method, lm, config.prompt_length, rng, config.init_std)
        written: Dict[str, Path] = {}

        def checkpoint(step: int) -> None:
            final = step == config.steps
            written.update(self._write_prompt_checkpoints(method, out_dir, config, step, final))

        trainer = PromptTrainer(method, config, out_dir / "metrics.jsonl", checkpoint)
        trainer.train(corpus.pairs)
        written["metrics"] = out_dir / "metrics.jsonl"
        return method, written

    def cmd_train(
        self,
        lm_path: Path,
        data_path: Path,
        out_dir: Path,
        method: Optional[str] = None,
        steps: Optional[int] = None,
        seed: Optional[int] = None,
        prompt_length: Optional[int] = None,
    ) -> Dict[str, Path]:
        """Train prompts for one method on a frozen backbone."""
        overrides = {
            k: v
            for k, v in {
                "method": method,
                "steps": steps,
                "seed": seed,
                "prompt_length": prompt_length,
            }.items()
            if v is not None
        }
        config = replace(self.run.train, **overrides)
        with precision(self.run.precision):
            lm = self.load_lm(lm_path)
            corpus = read_corpus(data_path, self.vocab)
            _, written = self._train_method(lm, corpus, config, out_dir)
        resolved = dict(self.config, train=config.to_dict())
        save_resolved_config(resolved, out_dir)
        return written

    def cmd_translate(
        self,
        checkpoint: Path,
        input_path: Path,
        output_path: Path,
        beam: Optional[int] = None,
        threads: Optional[int] = None,
        lm_path: Optional[Path] = None,
    ) -> Path:
        """Translate one sentence per line; blank lines stay blank."""
        k, workers = self._decoding_overrides(beam, threads)
        with precision(self.run.precision):
            model = self.load_translation_model(checkpoint, lm_path)
            lines = read_lines(input_path)
            sources = []
            for lineno, line in enumerate(lines, start=1):
                try:
                    sources.append(model.vocab.tokenize(line))
                except DataError as e:
                    raise DataError(f"{input_path}: line {lineno}: {e}") from e
            todo = [s for s in sources if s]
            results = iter(translate_all(model, todo, k, workers, self.run.decoding.max_len))
        outputs = [
            model.vocab.detokenize(next(results).tokens, strip_specials=True) if s else ""
            for s in sources
        ]
        write_lines(output_path, outputs)
        save_resolved_config(self.config, output_path.parent)
        logger.info(f"Translated {len(todo)} sentences into {output_path}")
        return output_path

    def cmd_evaluate(
        self,
        checkpoint: Path,
        data_path: Path,
        out_path: Path,
        beam: Optional[int] = None,
        threads: Optional[int] = None,
        lm_path: Optional[Path] = None,
    ) -> EvalReport:
        """Decode a test corpus and write the EvalReport JSON."""
        k, workers = self._decoding_overrides(beam, threads)
        with precision(self.run.precision):
            model = self.load_translation_model(checkpoint, lm_path)
            corpus = read_corpus(data_path, model.vocab)
            report = evaluate(model, corpus, k, workers)
        report.save(out_path)
        save_resolved_config(self.config, out_path.parent)
        return report

    def cmd_ablate(
        self,
        lm_path: Path,
        train_path: Path,
        dev_path: Path,
        out_dir: Path,
        seeds: Optional[Sequence[int]] = None,
        steps: Optional[int] = None,
    ) -> Dict[str, Any]:
        """
        Train every ablation method with identical budgets and seeds and
        compare them on the dev corpus.
        """
        ablation = self.config["ablation"]
        seeds = list(seeds or ablation["seeds"])
        budget = steps or ablation.get("steps") or self.run.train.steps
        k = self.run.decoding.beam
        rows: List[Dict[str, Any]] = []
        with precision(self.run.precision):
            lm = self.load_lm(lm_path)
            train = read_corpus(train_path, self.vocab)
            dev = read_corpus(dev_path, self.vocab)
            for name in ablation["methods"]:
                for seed in seeds:
                    config = replace(self.run.train, method=name, seed=seed, steps=budget)
                    run_dir = out_dir / name / f"seed{seed}"
                    method, _ = self._train_method(lm, train, config, run_dir)
                    model = TranslationModel(
                        lm, name, baked_tensors(method.bake()), self.vocab
                    )
                    report = evaluate(model, dev, k, self.run.decoding.threads)
                    rows.append(
                        {
                            "method": name,
                            "seed": seed,
                            "bleu": report.bleu,
                            "seq_accuracy": report.seq_accuracy,
                        }
                    )

        means = {}
        for name in ablation["methods"]:
            mine = [r for r in rows if r["method"] == name]
            means[name] = {
                "bleu": float(np.mean([r["bleu"] for r in mine])),
                "seq_accuracy": float(np.mean([r["seq_accuracy"] for r in mine])),
            }
        result = {"steps": budget, "seeds": seeds, "rows": rows, "means": means}
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        save_resolved_config(self.config, out_dir)

        logger.info(f"{'method':<16}{'BLEU':>10}{'seq-acc':>10}")
        for name, mean in means.items():
            logger.info(f"{name:<16}{mean['bleu']:>10.2f}{mean['seq_accuracy']:>10.3f}")
        return result

    def cmd_gradcheck(
        self, out_dir: Optional[Path] = None, corrupt: Optional[str] = None
    ) -> Dict[str, Any]:
        """
        Finite-difference check of prompt gradients through the full pipeline
        on a tiny random instance. ``corrupt`` names an op whose backward is
        deliberately scaled (the check must then fail).
        """
        gc = self.config["gradcheck"]
        if corrupt is not None and corrupt not in OPS:
            raise ConfigError(f"--corrupt must name an op kind, one of {sorted(OPS)}")
        checks: Dict[str, GroupCheck] = {}
        with precision(gc["dtype"]):
            config = LmConfig(
                n_layers=gc["n_layers"],
                d_model=gc["d_model"],
                n_heads=gc["n_heads"],
                vocab_size=gc["vocab_size"],
                max_positions=max(32, 2 * gc["source_length"] + gc["target_length"] + 3),
                prompt_length=gc["prompt_length"],
                init_std=gc["init_std"],
            )
            rng = np.random.default_rng(gc["seed"])
            lm = LanguageModel(config, LmParams.init(config, rng, trainable=False))
            low = 6
            x = [int(t) for t in rng.integers(low, config.vocab_size, gc["source_length"])]
            y = [int(t) for t in rng.integers(low, config.vocab_size, gc["target_length"])]
            for name in gc["methods"]:
                method = create_method(name, lm, gc["prompt_length"], rng, gc["init_std"])
                params = method.parameters()
                hook = corrupt_backward(corrupt) if corrupt is not None else nullcontext()
                with hook:
                    found = check_gradients(
                        lambda: nll_loss(method, [(x, y)]), params, gc["eps"], gc["atol"]
                    )
                checks.update({f"{name}:{group}": check for group, check in found.items()})

        tolerance = gc["tolerance"]
        degenerate = sorted(group for group, check in checks.items() if check.degenerate)
        passed = not degenerate and all(c.max_rel_err <= tolerance for c in checks.values())
        report = {
            "passed": passed,
            "tolerance": tolerance,
            "corrupt": corrupt,
            "dtype": gc["dtype"],
            "eps": gc["eps"],
            "groups": {group: check.max_rel_err for group, check in checks.items()},
            "degenerate": degenerate,
        }
        for group, check in checks.items():
            if check.degenerate:
                status = "FAIL (zero gradient)"
            else:
                status = "ok" if check.max_rel_err <= tolerance else "FAIL"
            logger.info(f"  {group:<28} max rel err {check.max_rel_err:.3e}  {status}")
        logger.info(f"Gradient check {'passed' if passed else 'failed'}")
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "gradcheck.json", "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2, sort_keys=True)
            save_resolved_config(self.config, out_dir)
        return report


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msprompt", description="Multi-stage prompting on a frozen LM")
    parser.add_argument("--config", default=None, help="YAML config (default config/default.yaml)")
    parser.add_argument("--log-level", default=None, help="Overrides MSP_LOG")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="Write synthetic task splits and monolingual text")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("pretrain", help="Pretrain the toy backbone")
    p.add_argument("--data", required=True, type=Path, help="Monolingual text file")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="Train prompts on a frozen backbone")
    p.add_argument("--lm", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--method", choices=["msp", "msp-shared", "prefix", "prefix-double", "prompt"])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--prompt-length", type=int)

    p = sub.add_parser("translate", help="Translate one sentence per line")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lm", type=Path, help="Backbone for prompt-only checkpoints")
    p.add_argument("--beam", type=int)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("evaluate", help="Score a checkpoint on a TSV corpus")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lm", type=Path)
    p.add_argument("--beam", type=int)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("ablate", help="Compare prompting methods over several seeds")
    p.add_argument("--lm", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--dev", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("gradcheck", help="Finite-difference check of prompt gradients")
    p.add_argument("--out", type=Path)
    p.add_argument("--corrupt", help="Op kind whose backward is deliberately scaled")
    return parser


def _dispatch(controller: ExperimentController, args: argparse.Namespace) -> int:
    if args.command == "generate":
        controller.cmd_generate(args.out)
    elif args.command == "pretrain":
        controller.cmd_pretrain(args.data, args.out, args.steps, args.seed)
    elif args.command == "train":
        controller.cmd_train(
            args.lm, args.data, args.out, args.method, args.steps, args.seed, args.prompt_length
        )
    elif args.command == "translate":
        controller.cmd_translate(
            args.checkpoint, args.input, args.out, args.beam, args.threads, args.lm
        )
    elif args.command == "evaluate":
        controller.cmd_evaluate(
            args.checkpoint, args.data, args.out, args.beam, args.threads, args.lm
        )
    elif args.command == "ablate":
        controller.cmd_ablate(args.lm, args.data, args.dev, args.out, args.seeds, args.steps)
    elif args.command == "gradcheck":
        report = controller.cmd_gradcheck(args.out, args.corrupt)
        return EXIT_OK if report["passed"] else EXIT_NUMERIC
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the msprompt command line."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = args.log_level or os.getenv("MSP_LOG", "INFO")
    configure_logging(level, os.getenv("MSP_LOG_FILE", DEFAULT_LOG_FILE))
    debug = logging.getLogger().isEnabledFor(logging.DEBUG)

    try:
        config = load_config(args.config)
        if args.log_level is None and os.getenv("MSP_LOG") is None:
            logging.getLogger().setLevel(config["monitoring"].get("log_level", "INFO"))
        controller = ExperimentController(config)
        return _dispatch(controller, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}", exc_info=debug)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}", exc_info=debug)
        return EXIT_DATA
    except (NumericError, GradientError) as e:
        diagnostics = getattr(e, "diagnostics", {})
        logger.critical(f"Numeric failure: {e} {diagnostics or ''}", exc_info=debug)
        return EXIT_NUMERIC
    except MSPError as e:
        logger.error(f"Error: {e}", exc_info=debug)
        return EXIT_DATA
    except KeyboardInterrupt:
        logger.info("Shutdown requested by user")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
