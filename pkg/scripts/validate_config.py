#!/usr/bin/env python3
"""
Configuration Validation Script
Loads a YAML config over the msprompt defaults and runs the cross-section checks
"""

import sys

from src.core.config import RunConfig, load_config
from src.core.errors import ConfigError


def main(argv: list) -> int:
    path = argv[1] if len(argv) > 1 else None
    try:
        run = RunConfig.from_dict(load_config(path))
    except ConfigError as e:
        print(f"Configuration validation failed: {e}")
        return 1
    print(
        f"Configuration is valid: {run.lm.n_layers} layers, d_model {run.lm.d_model}, "
        f"vocab {run.lm.vocab_size}, method {run.train.method}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
