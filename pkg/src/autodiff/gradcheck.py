"""
Finite-difference gradient oracle
Central differences against the analytic backward, plus a corruption hook
used as a negative control
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from ..core.errors import NumericError
from .ops import OPS, register_op
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class GroupCheck:
    """Finite-difference outcome for one named parameter group."""

    max_rel_err: float
    analytic_max: float
    numeric_max: float

    @property
    def degenerate(self) -> bool:
        """Both gradients exactly zero: the group never reaches the loss."""
        return self.analytic_max == 0.0 and self.numeric_max == 0.0


def _scalar_value(out: Tensor) -> float:
    value = out.item()
    if not np.isfinite(value):
        raise NumericError("finite-difference evaluation produced a non-finite value")
    return value


def _gradients(f: ScalarFn, x: Tensor, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic and central-difference gradients of f at x, both flat float64."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")

    was_tracking = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        _scalar_value(loss)
        backward(loss)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).ravel()

        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                # float32 buffers round x +- eps; divide by the step actually taken
                flat[i] = original + eps
                high = float(flat[i])
                upper = _scalar_value(f(x))
                flat[i] = original - eps
                low = float(flat[i])
                lower = _scalar_value(f(x))
                flat[i] = original
                numeric[i] = (upper - lower) / (high - low)
    finally:
        x.requires_grad = was_tracking
        x.grad = None
    return analytic, numeric


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray, atol: float) -> float:
    diff = np.abs(analytic - numeric)
    rel = np.where(diff <= atol, 0.0, diff / (np.abs(analytic) + 1e-8))
    return float(rel.max()) if rel.size else 0.0


def finite_difference_check(
    f: ScalarFn, x: Tensor, eps: float = 1e-3, atol: float = 0.0
) -> float:
    """
    Compare dF/dx from backward with central differences.

    Args:
        f: Deterministic function of x returning a scalar tensor
        x: Point of evaluation; its buffer is perturbed in place and restored
        eps: Perturbation size (> 0)
        atol: Coordinates whose absolute discrepancy is <= atol count as exact

    Returns:
        max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8)

    Raises:
        ValueError: eps <= 0
        NumericError: f produced a non-finite value
    """
    analytic, numeric = _gradients(f, x, eps)
    return _max_rel_err(analytic, numeric, atol)


def check_gradients(
    f: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-3,
    atol: float = 0.0,
) -> Dict[str, GroupCheck]:
    """
    Run the finite-difference comparison for every named parameter group.

    ``f`` closes over the parameters; each group is perturbed while the other
    groups stay fixed. Groups whose analytic and numeric gradients are both
    exactly zero are reported as degenerate: agreement there checks nothing.
    """
    results: Dict[str, GroupCheck] = {}
    for name, tensor in params.items():
        frozen = {other: p.requires_grad for other, p in params.items()}
        for other, p in params.items():
            if other != name:
                p.requires_grad = False
        try:
            analytic, numeric = _gradients(lambda _: f(), tensor, eps)
        finally:
            for other, p in params.items():
                p.requires_grad = frozen[other]
        check = GroupCheck(
            max_rel_err=_max_rel_err(analytic, numeric, atol),
            analytic_max=float(np.abs(analytic).max()) if analytic.size else 0.0,
            numeric_max=float(np.abs(numeric).max()) if numeric.size else 0.0,
        )
        results[name] = check
        if check.degenerate:
            logger.warning(f"gradcheck {name}: gradient is exactly zero, group is not exercised")
        else:
            logger.debug(f"gradcheck {name}: max rel err {check.max_rel_err:.3e}")
    return results


@contextmanager
def corrupt_backward(kind: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the backward rule of one op kind while the context is active."""
    original = OPS[kind]

    def scaled(g, saved):  # type: ignore[no-untyped-def]
        return tuple(
            None if grad is None else grad * factor
            for grad in original.backward(g, saved)
        )

    register_op(kind, original.forward, scaled)
    logger.warning(f"Backward of {kind} scaled by {factor} (negative control)")
    try:
        yield
    finally:
        OPS[kind] = original
