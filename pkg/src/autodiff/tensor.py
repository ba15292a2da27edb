"""
Dense tensor with reverse-mode automatic differentiation
Leaf storage is float32 by default; op results are computed and kept in float64
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.errors import GradientError, NumericError
from .ops import OPS

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[Any], float, int]

# Grad mode and storage dtype are per thread so evaluation workers can run
# under no_grad() while a trainer records graphs elsewhere.
_state = threading.local()


def default_dtype() -> np.dtype:
    """Storage dtype for leaf tensors created in this thread."""
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    """Whether ops record a graph in this thread."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def precision(dtype: Union[str, np.dtype]) -> Iterator[None]:
    """Temporarily switch leaf storage dtype ("float32" or "float64")."""
    new = np.dtype(dtype)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported storage dtype: {new}")
    previous = default_dtype()
    _state.dtype = new
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class OpNode:
    """Record of one op application: kind, parents and values saved for backward."""

    kind: str
    inputs: Tuple["Tensor", ...]
    saved: Optional[Dict[str, Any]] = field(default=None, repr=False)

    @property
    def consumed(self) -> bool:
        return self.saved is None


class Tensor:
    """
    Dense n-d array with an optional gradient accumulator.

    Tensors that do not require grad are treated as immutable; frozen
    parameters additionally have their buffer marked read-only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[OpNode] = None

    @classmethod
    def _wrap(
        cls, array: np.ndarray, requires_grad: bool, node: Optional[OpNode]
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._node = node
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no graph, no grad."""
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self) -> None:
        self.grad = None

    def freeze(self) -> None:
        """Stop tracking gradients and make the buffer read-only."""
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply("add", (self, other))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return apply("mul", (self, other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply("matmul", (self, other))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def apply(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """
    Run a registered op forward and record it when any input requires grad.

    Args:
        kind: Registered op kind (see ops.OPS)
        inputs: Parent tensors
        **attrs: Non-differentiable op arguments (axes, ids, masks, ...)

    Returns:
        Result tensor in float64; only leaves use the storage dtype

    Raises:
        KeyError: Unknown op kind
        ShapeError: Inputs do not conform to the op signature
        NumericError: The op produced NaN or Inf
    """
    op = OPS[kind]
    arrays = [np.asarray(t.data, dtype=np.float64) for t in inputs]
    out, saved = op.forward(*arrays, **attrs)
    if not np.isfinite(out).all():
        raise NumericError(f"Non-finite output from {kind}", {"kind": kind})
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    node = OpNode(kind, tuple(inputs), saved) if track else None
    return Tensor._wrap(out.astype(np.float64), track, node)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, finished = stack.pop()
        if finished:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Every requires_grad leaf reached from the loss gets dLoss/dLeaf added to
    its ``grad``; a tensor used several times receives the sum of all paths.
    The graph's saved values are released afterwards.

    Returns:
        Mapping of each reached leaf to the gradient added in this sweep

    Raises:
        GradientError: Non-scalar loss, loss outside any graph, or a graph
            that was already consumed by an earlier backward
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is not part of a recorded graph")
    if loss._node is not None and loss._node.consumed:
        raise GradientError("graph already consumed; rebuild it before backward")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    leaf_grads: Dict[int, np.ndarray] = {}
    leaves: Dict[int, Tensor] = {}

    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        node = tensor._node
        if node is None:
            leaf_grads[id(tensor)] = leaf_grads.get(id(tensor), 0.0) + g
            leaves[id(tensor)] = tensor
            continue
        if node.consumed:
            raise GradientError(f"graph already consumed at op {node.kind}")
        parent_grads = OPS[node.kind].backward(g, node.saved)
        node.saved = None
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    result: Dict[Tensor, np.ndarray] = {}
    for key, g in leaf_grads.items():
        leaf = leaves[key]
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.astype(leaf.data.dtype) if leaf.grad is None else (
            leaf.grad + g
        ).astype(leaf.data.dtype)
        result[leaf] = g
    logger.debug(f"backward: {len(order)} nodes, {len(result)} leaves")
    return result


# Thin functional wrappers; the model code reads better with these than with
# apply("kind", ...) everywhere.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", (a, b))


def tanh(a: Tensor) -> Tensor:
    return apply("tanh", (a,))


def gelu(a: Tensor) -> Tensor:
    return apply("gelu", (a,))


def scale(a: Tensor, factor: float) -> Tensor:
    return apply("scale", (a,), factor=float(factor))


def softmax_lastdim(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    return apply("softmax_lastdim", (a,), mask=mask)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layernorm", (x, gamma, beta), eps=eps)


def embedding_lookup(table: Tensor, ids: ArrayLike) -> Tensor:
    return apply("embedding_lookup", (table,), ids=np.asarray(ids, dtype=np.int64))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply("slice", (a,), axis=axis, start=start, stop=stop)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return apply("concat_axis", tuple(tensors), axis=axis)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return apply("transpose", (a,), axes=tuple(axes))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", (a,), shape=tuple(shape))


def tensor_sum(a: Tensor) -> Tensor:
    return apply("sum", (a,))


def cross_entropy_logits(
    logits: Tensor, targets: ArrayLike, weights: Optional[np.ndarray] = None
) -> Tensor:
    """Summed negative log-likelihood of targets under softmax(logits)."""
    return apply(
        "cross_entropy_logits",
        (logits,),
        targets=np.asarray(targets, dtype=np.int64),
        weights=weights,
    )
