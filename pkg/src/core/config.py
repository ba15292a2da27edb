"""
Configuration loading for msprompt
YAML on disk, deep-merged over built-in defaults, plus typed views
"""

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import colorlog
import yaml

from ..data.tasks import TaskSpec
from ..data.vocab import DEFAULT_CHARSET, Vocab
from ..lm.config import LmConfig
from ..training.pretrain import PretrainConfig
from ..training.trainer import TrainConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/default.yaml"
DEFAULT_LOG_FILE = "data/logs/msprompt.log"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str = "INFO", log_file: Optional[str] = DEFAULT_LOG_FILE) -> None:
    """
    Console handler coloured by level, plus a plain file handler.

    Safe to call repeatedly; earlier handlers installed here are replaced.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_msprompt", False):
            root.removeHandler(handler)
            handler.close()

    console = colorlog.StreamHandler()
    console.setFormatter(
        colorlog.ColoredFormatter(
            "%(log_color)s%(asctime)s - %(name)s - %(levelname)s%(reset)s - %(message)s",
            log_colors={
                "DEBUG": "cyan",
                "INFO": "green",
                "WARNING": "yellow",
                "ERROR": "red",
                "CRITICAL": "bold_red",
            },
        )
    )
    handlers: List[logging.Handler] = [console]
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)

    for handler in handlers:
        handler._msprompt = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def get_default_config() -> Dict[str, Any]:
    """Built-in defaults; config/default.yaml mirrors these."""
    return {
        "system": {"name": "msprompt", "seed": 1, "precision": "float32"},
        "lm": LmConfig().to_dict(),
        "vocab": {"charset": DEFAULT_CHARSET, "strict": True},
        "task": TaskSpec().to_dict(),
        "data": {
            "train_size": 2000,
            "dev_size": 200,
            "test_size": 200,
            "monolingual_size": 5000,
            "lexicon_size": 200,
        },
        "pretrain": PretrainConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "decoding": {"beam": 4, "max_len": None, "threads": 1},
        "ablation": {
            "methods": ["msp", "msp-shared", "prefix-double", "prefix"],
            "seeds": [1, 2, 3],
            "steps": None,
        },
        "gradcheck": {
            "methods": ["msp"],
            "n_layers": 3,
            "d_model": 16,
            "n_heads": 2,
            "vocab_size": 20,
            "prompt_length": 4,
            "source_length": 5,
            "target_length": 5,
            "init_std": 0.5,
            "dtype": "float32",
            "eps": 1e-3,
            "atol": 1e-5,
            "tolerance": 1e-2,
            "seed": 0,
        },
        "paths": {
            "data_dir": "data/task",
            "lm_dir": "runs/lm",
            "prompt_dir": "runs/prompts",
            "output_dir": "runs",
        },
        "monitoring": {"log_level": "INFO", "log_file": DEFAULT_LOG_FILE},
    }


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively overlay ``override`` on a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Load a YAML config over the defaults.

    Args:
        path: Explicit config file; None means config/default.yaml

    Raises:
        ConfigError: Explicit path missing, YAML parse error, non-mapping
            document or unknown section
    """
    explicit = path is not None
    config_path = Path(path if explicit else DEFAULT_CONFIG_PATH)
    defaults = get_default_config()
    try:
        with open(config_path, "r") as f:
            document = yaml.safe_load(f)
        logger.info(f"Configuration loaded from {config_path}")
    except FileNotFoundError:
        if explicit:
            raise ConfigError(f"Config file {config_path} not found") from None
        logger.warning(f"Config file {config_path} not found, using defaults")
        return defaults
    except yaml.YAMLError as e:
        raise ConfigError(f"Error parsing config file {config_path}: {e}") from e

    document = document or {}
    if not isinstance(document, Mapping):
        raise ConfigError(f"{config_path}: top level must be a mapping")
    unknown = set(document) - set(defaults)
    if unknown:
        raise ConfigError(f"{config_path}: unknown sections {sorted(unknown)}")
    return deep_merge(defaults, document)


def save_resolved_config(config: Mapping[str, Any], out_dir: Union[str, Path]) -> Path:
    """Echo the fully resolved configuration next to a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(dict(config), f, sort_keys=True, default_flow_style=False)
    return path


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 4
    max_len: Optional[int] = None
    threads: int = 1

    def __post_init__(self) -> None:
        if self.beam < 1:
            raise ConfigError(f"decoding.beam must be >= 1, got {self.beam}")
        if self.threads < 1:
            raise ConfigError(f"decoding.threads must be >= 1, got {self.threads}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigError(f"decoding.max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class RunConfig:
    """Typed view over the resolved configuration."""

    lm: LmConfig
    task: TaskSpec
    pretrain: PretrainConfig
    train: TrainConfig
    decoding: DecodeConfig
    charset: str
    strict_vocab: bool
    seed: int
    precision: str
    raw: Mapping[str, Any]

    @classmethod
    def from_dict(cls, config: Mapping[str, Any]) -> "RunConfig":
        try:
            decoding = DecodeConfig(**config["decoding"])
        except TypeError as e:
            raise ConfigError(f"decoding: {e}") from e
        run = cls(
            lm=LmConfig.from_dict(config["lm"]),
            task=TaskSpec.from_dict(config["task"]),
            pretrain=PretrainConfig.from_dict(config["pretrain"]),
            train=TrainConfig.from_dict(config["train"]),
            decoding=decoding,
            charset=str(config["vocab"]["charset"]),
            strict_vocab=bool(config["vocab"].get("strict", True)),
            seed=int(config["system"].get("seed", 1)),
            precision=str(config["system"].get("precision", "float32")),
            raw=config,
        )
        run.validate()
        return run

    def vocab(self) -> Vocab:
        return Vocab(self.charset, strict=self.strict_vocab)

    def validate(self, required_files: Optional[List[Union[str, Path]]] = None) -> None:
        """Cross-section checks, plus existence of files a command needs."""
        size = len(self.vocab())
        if self.lm.vocab_size != size:
            raise ConfigError(
                f"lm.vocab_size ({self.lm.vocab_size}) must equal the vocabulary size ({size})"
            )
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"system.precision must be float32 or float64, got {self.precision}")
        for path in required_files or []:
            if not Path(path).exists():
                raise FileNotFoundError(f"required file not found: {path}")
