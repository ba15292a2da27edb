"""
Operation registry for the autodiff engine
Forward and backward rules for every op kind the LM and prompt networks use
"""

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ShapeError

Array = np.ndarray
Saved = Dict[str, Any]
ForwardFn = Callable[..., Tuple[Array, Saved]]
BackwardFn = Callable[..., Tuple[Optional[Array], ...]]

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class OpDef:
    """Forward/backward pair registered under an op kind."""

    kind: str
    forward: ForwardFn
    backward: BackwardFn


OPS: Dict[str, OpDef] = {}


def register_op(kind: str, forward: ForwardFn, backward: BackwardFn) -> None:
    """Register (or replace) the rules for an op kind."""
    OPS[kind] = OpDef(kind, forward, backward)


def unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_bias(a: Array, b: Array, kind: str) -> bool:
    """Return True when b is a last-axis bias for a; raise on any other mismatch."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _sum_to_bias(grad: Array) -> Array:
    return grad.reshape(-1, grad.shape[-1]).sum(axis=0)


# matmul


def _matmul_fwd(a: Array, b: Array) -> Tuple[Array, Saved]:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dims: {a.shape} @ {b.shape}") from e
    return np.matmul(a, b), {"a": a, "b": b}


def _matmul_bwd(g: Array, saved: Saved) -> Tuple[Array, Array]:
    a, b = saved["a"], saved["b"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


# elementwise


def _add_fwd(a: Array, b: Array) -> Tuple[Array, Saved]:
    bias = _check_bias(a, b, "add")
    return a + b, {"bias": bias}


def _add_bwd(g: Array, saved: Saved) -> Tuple[Array, Array]:
    return g, (_sum_to_bias(g) if saved["bias"] else g)


def _mul_fwd(a: Array, b: Array) -> Tuple[Array, Saved]:
    bias = _check_bias(a, b, "mul")
    return a * b, {"a": a, "b": b, "bias": bias}


def _mul_bwd(g: Array, saved: Saved) -> Tuple[Array, Array]:
    a, b = saved["a"], saved["b"]
    gb = g * a
    return g * b, (_sum_to_bias(gb) if saved["bias"] else gb)


def _tanh_fwd(a: Array) -> Tuple[Array, Saved]:
    out = np.tanh(a)
    return out, {"out": out}


def _tanh_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    out = saved["out"]
    return (g * (1.0 - out * out),)


def _gelu_fwd(a: Array) -> Tuple[Array, Saved]:
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    return 0.5 * a * (1.0 + t), {"a": a, "t": t}


def _gelu_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    a, t = saved["a"], saved["t"]
    d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * a * a)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)


def _scale_fwd(a: Array, factor: float) -> Tuple[Array, Saved]:
    return a * factor, {"factor": factor}


def _scale_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    return (g * saved["factor"],)


# reductions


def _softmax_fwd(a: Array, mask: Optional[Array] = None) -> Tuple[Array, Saved]:
    if a.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_lastdim on empty last axis: {a.shape}")
    if mask is not None:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        except ValueError as e:
            raise ShapeError(f"softmax mask {np.shape(mask)} vs {a.shape}") from e
        if not keep.any(axis=-1).all():
            raise ShapeError("softmax_lastdim: a row is fully masked")
        a = np.where(keep, a, -np.inf)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return out, {"out": out}


def _softmax_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    out = saved["out"]
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layernorm_fwd(
    x: Array, gamma: Array, beta: Array, eps: float = 1e-5
) -> Tuple[Array, Saved]:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} for width {d}")
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv, "gamma": gamma}


def _layernorm_bwd(g: Array, saved: Saved) -> Tuple[Array, Array, Array]:
    xhat, inv, gamma = saved["xhat"], saved["inv"], saved["gamma"]
    gxhat = g * gamma
    gx = inv * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, _sum_to_bias(g * xhat), _sum_to_bias(g)


def _sum_fwd(a: Array) -> Tuple[Array, Saved]:
    return np.asarray(a.sum(dtype=np.float64)), {"shape": a.shape}


def _sum_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    return (np.full(saved["shape"], float(g)),)


def _cross_entropy_fwd(
    logits: Array, targets: Array, weights: Optional[Array] = None
) -> Tuple[Array, Saved]:
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim < 1 or targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_logits: logits {logits.shape} vs targets {targets.shape}"
        )
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"cross_entropy_logits: target id outside [0, {vocab})")
    if weights is None:
        w = np.ones(targets.shape, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != targets.shape:
            raise ShapeError(f"cross_entropy_logits: weights {w.shape} vs {targets.shape}")
    top = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - top)
    total = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    lse = (top + np.log(total))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    probs = e / total
    return np.asarray((w * nll).sum()), {"probs": probs, "targets": targets, "w": w}


def _cross_entropy_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    grad = saved["probs"].copy()
    targets = saved["targets"]
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    grad -= onehot
    return (float(g) * saved["w"][..., None] * grad,)


# indexing and layout


def _embedding_fwd(table: Array, ids: Array) -> Tuple[Array, Saved]:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id outside [0, {table.shape[0]})")
    return table[ids], {"ids": ids, "shape": table.shape}


def _embedding_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    grad = np.zeros(saved["shape"], dtype=g.dtype)
    np.add.at(grad, saved["ids"].reshape(-1), g.reshape(-1, saved["shape"][1]))
    return (grad,)


def _axis_index(ndim: int, axis: int, sl: slice) -> Tuple[slice, ...]:
    axis = axis % ndim
    return (slice(None),) * axis + (sl,)


def _slice_fwd(a: Array, axis: int, start: int, stop: int) -> Tuple[Array, Saved]:
    if a.ndim == 0:
        raise ShapeError("slice on a scalar")
    size = a.shape[axis]
    if not 0 <= start <= stop <= size:
        raise ShapeError(f"slice [{start}:{stop}] outside axis of size {size}")
    index = _axis_index(a.ndim, axis, slice(start, stop))
    return a[index], {"index": index, "shape": a.shape}


def _slice_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    grad = np.zeros(saved["shape"], dtype=g.dtype)
    grad[saved["index"]] = g
    return (grad,)


def _concat_fwd(*arrays: Array, axis: int) -> Tuple[Array, Saved]:
    if not arrays:
        raise ShapeError("concat_axis needs at least one input")
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat_axis: {[x.shape for x in arrays]} on axis {axis}") from e
    sizes = [x.shape[axis] for x in arrays]
    return out, {"sizes": sizes, "axis": axis}


def _concat_bwd(g: Array, saved: Saved) -> Tuple[Array, ...]:
    bounds = np.cumsum(saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=saved["axis"]))


def _transpose_fwd(a: Array, axes: Sequence[int]) -> Tuple[Array, Saved]:
    axes = tuple(axes)
    if sorted(ax % max(a.ndim, 1) for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    axes = tuple(ax % a.ndim for ax in axes)
    return np.transpose(a, axes), {"inverse": tuple(np.argsort(axes))}


def _transpose_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    return (np.transpose(g, saved["inverse"]),)


def _reshape_fwd(a: Array, shape: Sequence[int]) -> Tuple[Array, Saved]:
    try:
        out = a.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    return out, {"shape": a.shape}


def _reshape_bwd(g: Array, saved: Saved) -> Tuple[Array]:
    return (g.reshape(saved["shape"]),)


for _kind, _fwd, _bwd in (
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("add", _add_fwd, _add_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("tanh", _tanh_fwd, _tanh_bwd),
    ("gelu", _gelu_fwd, _gelu_bwd),
    ("scale", _scale_fwd, _scale_bwd),
    ("softmax_lastdim", _softmax_fwd, _softmax_bwd),
    ("layernorm", _layernorm_fwd, _layernorm_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("cross_entropy_logits", _cross_entropy_fwd, _cross_entropy_bwd),
    ("embedding_lookup", _embedding_fwd, _embedding_bwd),
    ("slice", _slice_fwd, _slice_bwd),
    ("concat_axis", _concat_fwd, _concat_bwd),
    ("transpose", _transpose_fwd, _transpose_bwd),
    ("reshape", _reshape_fwd, _reshape_bwd),
):
    register_op(_kind, _fwd, _bwd)
