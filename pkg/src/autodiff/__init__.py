"""
Minimal dense-tensor engine with reverse-mode autodiff
"""

from .gradcheck import GroupCheck, check_gradients, corrupt_backward, finite_difference_check
from .tensor import (
    OpNode,
    Tensor,
    apply,
    backward,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
)

__all__ = [
    "GroupCheck",
    "OpNode",
    "Tensor",
    "apply",
    "backward",
    "check_gradients",
    "corrupt_backward",
    "default_dtype",
    "finite_difference_check",
    "is_grad_enabled",
    "no_grad",
    "precision",
]
