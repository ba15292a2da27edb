"""
Adam with bias correction, warmup/inverse-sqrt schedule and global-norm clipping
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from ..autodiff.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moment estimates and the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_moments(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One bias-corrected Adam update in float64.

    Args:
        step: 1-based step number after incrementing

    Returns:
        (new_param, new_m, new_v)
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one Adam step to every named parameter; buffers are updated in place."""
    state.step += 1
    for name, tensor in params.items():
        if tensor.shape != grads[name].shape:
            raise ValueError(f"{name}: grad {grads[name].shape} vs param {tensor.shape}")
        param = tensor.data.astype(np.float64)
        m = state.m.get(name, np.zeros(tensor.shape))
        v = state.v.get(name, np.zeros(tensor.shape))
        new, state.m[name], state.v[name] = adam_moments(
            param,
            grads[name].astype(np.float64),
            m,
            v,
            state.step,
            lr,
            state.beta1,
            state.beta2,
            state.eps,
        )
        tensor.data[...] = new
    return state


def lr_schedule(step: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to base_lr at ``warmup`` steps, then base_lr * sqrt(warmup / step)."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup <= 0:
        return base_lr
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global norm is at most max_norm."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm or not math.isfinite(norm):
        return dict(grads), norm
    factor = max_norm / (norm + 1e-12)
    return {name: g * factor for name, g in grads.items()}, norm
