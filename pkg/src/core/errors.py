"""
Error types for msprompt
Every failure the package raises on purpose derives from MSPError
"""

from typing import Any, Dict, Optional


class MSPError(Exception):
    """Base class for all msprompt errors."""


class ShapeError(MSPError, ValueError):
    """Tensor shapes do not conform to an operation's signature."""


class NumericError(MSPError, ArithmeticError):
    """
    A non-finite value appeared where a finite one is required.

    Args:
        message: Human readable description
        diagnostics: Optional context (step, loss, gradient norms, ...)
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class GradientError(MSPError, RuntimeError):
    """Backward pass misuse (non-scalar loss, consumed graph)."""


class DataError(MSPError, ValueError):
    """Corpus, vocabulary or template problems."""


class ConfigError(MSPError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(MSPError, ValueError):
    """Malformed checkpoint container or mismatched configuration."""
