"""
Training guard for msprompt
Keeps the backbone frozen and stops runs that go non-finite
"""

import logging
import math
from typing import Any, Dict, List, Optional, TYPE_CHECKING

from .errors import GradientError, NumericError

if TYPE_CHECKING:
    from ..lm.model import LmParams

logger = logging.getLogger(__name__)


class TrainingGuard:
    """
    Safety checks around prompt training.

    Implements several layers of protection:
    - Backbone fingerprint taken before training, re-checked at checkpoints
    - Non-finite loss detection
    - Non-finite gradient norm detection
    """

    def __init__(self, lm_params: "LmParams") -> None:
        """
        Initialize the guard.

        Args:
            lm_params: Backbone parameters that must stay bit-identical
        """
        if not lm_params.frozen:
            raise GradientError("backbone must be frozen before prompt training")
        self.lm_params = lm_params
        self.baseline = lm_params.fingerprint()
        self.violations: List[str] = []
        self.checks = 0

        logger.info(f"TrainingGuard armed (backbone {self.baseline[:12]})")

    def check_backbone(self, step: Optional[int] = None) -> None:
        """Abort when theta differs from the fingerprint taken at start."""
        self.checks += 1
        current = self.lm_params.fingerprint()
        if current != self.baseline:
            message = f"Backbone changed during training (step {step})"
            self.violations.append(message)
            logger.critical(f"SAFETY: {message}")
            raise NumericError(
                message,
                {"step": step, "expected": self.baseline, "found": current},
            )
        logger.debug(f"Backbone fingerprint unchanged at step {step}")

    def check_step(
        self,
        step: int,
        lr: float,
        loss: float,
        grad_norms: Dict[str, float],
    ) -> None:
        """
        Abort on a non-finite loss or gradient norm.

        Raises:
            NumericError: diagnostics carry step, lr, loss and per-group norms
        """
        total = math.sqrt(sum(n * n for n in grad_norms.values())) if grad_norms else 0.0
        if math.isfinite(loss) and math.isfinite(total):
            return
        what = "loss" if not math.isfinite(loss) else "gradient norm"
        message = f"Non-finite {what} at step {step}"
        self.violations.append(message)
        logger.critical(f"SAFETY: {message} (lr={lr:.3e}, loss={loss})")
        raise NumericError(
            message,
            {"step": step, "lr": lr, "loss": loss, "grad_norms": dict(grad_norms)},
        )

    def get_status(self) -> Dict[str, Any]:
        """Current guard state."""
        return {
            "baseline": self.baseline,
            "checks": self.checks,
            "violations": list(self.violations),
        }
