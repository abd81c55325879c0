"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed. Gradients are recorded on an explicit Tape: ops
append (output, inputs, backward_fn) nodes in execution order, so walking
the node list in reverse is already a reverse topological traversal.
Float32 is the training default; build tensors from float64 arrays for
gradient-check work.

Every forward op validates that its output is finite; NaN/Inf raises
NumericError instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "embedding_lookup",
    "layer_norm",
    "gelu",
    "softmax",
    "dropout",
    "tsum",
    "cross_entropy",
    "backward",
]

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """Raised when an op produces a non-finite value."""


class Tensor:
    """A dense n-dimensional array, optionally participating in autodiff.

    ``requires_grad`` marks trainable leaves. Intermediate results get
    tracked automatically while a Tape is active and some input
    participates; their gradients live only in the Tape's accumulation
    buffers, never on the Tensor itself.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def participates(self) -> bool:
        return self.requires_grad or self._tracked

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of ops for one forward/backward cycle.

    Nodes are appended in execution order; backward() consumes the tape
    exactly once. A fresh Tape is expected per training step.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_tape_stack: list[Optional[Tape]] = []


def _push_tape(t: Optional[Tape]):
    _tape_stack.append(t)


def _pop_tape(t: Optional[Tape]):
    popped = _tape_stack.pop()
    assert popped is t


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def tape() -> Tape:
    """Open a new gradient tape: ``with tape() as tp: ... backward(loss, tp)``."""
    return Tape()


class no_grad:
    """Context manager suspending gradient recording."""

    def __enter__(self):
        _push_tape(None)
        return self

    def __exit__(self, *exc):
        _pop_tape(None)
        return False


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
    tp = _active_tape()
    if tp is not None and any(t.participates() for t in inputs):
        out._tracked = True
        tp.nodes.append((out, tuple(inputs), backward_fn))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    _check_finite(out_data, "add")
    out = Tensor(out_data)

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    _record(out, (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    _check_finite(out_data, "mul")
    out = Tensor(out_data)

    def bwd(g, accum):
        accum(a, _unbroadcast(g * b.data, a.shape))
        accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, (a, b), bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    _check_finite(out.data, "scale")

    def bwd(g, accum):
        accum(a, g * c)

    _record(out, (a,), bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when either operand carries leading dims.

    Inner extents must match: a[..., m, k] @ b[..., k, p] -> [..., m, p].
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)
    _check_finite(out_data, "matmul")
    out = Tensor(out_data)

    def bwd(g, accum):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        accum(a, _unbroadcast(ga, a.shape))
        accum(b, _unbroadcast(gb, b.shape))

    _record(out, (a, b), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g, accum):
        accum(a, g.reshape(a.shape))

    _record(out, (a,), bwd)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g, accum):
        accum(a, np.transpose(g, inv))

    _record(out, (a,), bwd)
    return out


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along the last axis."""
    if start < 0 or start + length > a.shape[-1]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for last axis {a.shape[-1]}")
    out = Tensor(a.data[..., start:start + length])

    def bwd(g, accum):
        full = np.zeros_like(a.data)
        full[..., start:start + length] = g
        accum(a, full)

    _record(out, (a,), bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, accum):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accum(t, g[tuple(idx)])

    _record(out, tuple(tensors), bwd)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; ids shape is preserved."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}), got "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g, accum):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        accum(table, gt)

    _record(out, (table,), bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine params must have shape ({x.shape[-1]},), got {gain.shape}, {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = xhat * gain.data + bias.data
    _check_finite(out_data, "layer_norm")
    out = Tensor(out_data)
    d = x.shape[-1]

    def bwd(g, accum):
        accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        accum(bias, g.reshape(-1, d).sum(axis=0))
        gx_hat = g * gain.data
        # d xhat / dx folded analytically
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        accum(x, gx)

    _record(out, (x, gain, bias), bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf
    _check_finite(out_data, "gelu")
    out = Tensor(out_data.astype(x.dtype))

    def bwd(g, accum):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        accum(x, g * (cdf + x.data * pdf))

    _record(out, (x,), bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows sum to 1 within 1e-6."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    _check_finite(s, "softmax")
    out = Tensor(s)

    def bwd(g, accum):
        dot = (g * s).sum(axis=axis, keepdims=True)
        accum(x, s * (g - dot))

    _record(out, (x,), bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; train-time only (callers skip it in eval mode)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    inv = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * inv)

    def bwd(g, accum):
        accum(x, g * keep * inv)

    _record(out, (x,), bwd)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    _check_finite(out.data, "tsum")

    def bwd(g, accum):
        accum(x, np.full(x.shape, g, dtype=x.dtype))

    _record(out, (x,), bwd)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, position_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over selected positions.

    logits: [..., V]; targets: integer ids with logits' leading shape;
    position_mask: boolean, same leading shape. Gradient flows only
    through selected positions. Raises if the selection is empty.
    """
    targets = np.asarray(targets)
    position_mask = np.asarray(position_mask, dtype=bool)
    lead = logits.shape[:-1]
    v = logits.shape[-1]
    if targets.shape != lead or position_mask.shape != lead:
        raise ShapeError(
            f"cross_entropy: targets/mask must have shape {lead}, got {targets.shape}, {position_mask.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target id out of [0, {v})")
    count = int(position_mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty position selection")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    tgt_logit = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = lse - tgt_logit
    loss_val = nll[position_mask].mean()
    _check_finite(np.asarray(loss_val), "cross_entropy")
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype))

    def bwd(g, accum):
        probs = np.exp(shifted - lse[..., None])
        grad = probs.copy()
        flat = grad.reshape(-1, v)
        np.subtract.at(flat, (np.arange(flat.shape[0]), targets.reshape(-1)), 1.0)
        grad *= position_mask[..., None] / count
        accum(logits, (g * grad).astype(logits.dtype))

    _record(out, (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tp: Tape):
    """Populate .grad on every participating leaf reachable from ``loss``.

    The tape is consumed; calling backward twice on the same tape raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {loss.shape}")
    if tp.consumed:
        raise RuntimeError("backward: tape already consumed; build a fresh tape per step")
    tp.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accum_into(t: Tensor, g: np.ndarray):
        if not t.participates():
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for out, _, bwd_fn in reversed(tp.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            # intermediate node explicitly flagged for gradient inspection
            out.grad = g if out.grad is None else out.grad + g
        bwd_fn(g, accum_into)

    for _, inputs, _ in tp.nodes:
        for t in inputs:
            if t.requires_grad and id(t) in grads:
                g = grads.pop(id(t))
                t.grad = g if t.grad is None else t.grad + g
