"""Differentiable operators: forward semantics plus exact backward rules.

Every op validates shapes, runs the forward computation, and registers a
backward closure on the active Graph. Inputs of rank 2 to conv/pool ops
are treated as a single sample (C, T). No broadcasting is supported
beyond the bias additions built into conv1d and dense.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateBatch, InvalidRate, ShapeMismatch
from . import kernels
from .tensor import Tensor, record_op


def _as3d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 2:
        return x.data[None], True
    if x.data.ndim == 3:
        return x.data, False
    raise ShapeMismatch(f"expected (C, T) or (N, C, T), got shape {x.shape}")


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; bias added per output channel."""
    data, squeeze = _as3d(x)
    n, c_in, t = data.shape
    if w.data.ndim != 3 or w.data.shape[1] != c_in:
        raise ShapeMismatch(f"weights {w.shape} incompatible with input {x.shape}")
    c_out, _, k = w.data.shape
    if b.data.shape != (c_out,):
        raise ShapeMismatch(f"bias {b.shape} does not match {c_out} output channels")
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    if k > t + 2 * pad:
        raise ShapeMismatch(f"kernel {k} larger than padded input {t + 2 * pad}")
    y = kernels.conv1d_forward(data, w.data, stride, pad)
    y += b.data[None, :, None]

    def backward(dy):
        dy3 = dy[None] if squeeze else dy
        dx, dw = kernels.conv1d_backward(
            data, w.data, np.ascontiguousarray(dy3), stride, pad,
            x.requires_grad, w.requires_grad,
        )
        db = dy3.sum(axis=(0, 2)) if b.requires_grad else None
        if dx is not None and squeeze:
            dx = dx[0]
        return dx, dw, db

    return record_op(Tensor(y[0] if squeeze else y), (x, w, b), backward)


def maxpool1d(x: Tensor, k: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Window maximum; ties go to the earliest position."""
    data, squeeze = _as3d(x)
    t = data.shape[2]
    if not 1 <= k <= t:
        raise ShapeMismatch(f"pool window {k} invalid for length {t}")
    if stride < 1 or (ceil_mode and stride > k):
        raise ShapeMismatch(f"pool stride {stride} invalid (window {k}, ceil={ceil_mode})")
    y, idx = kernels.maxpool1d_forward(data, k, stride, ceil_mode)

    def backward(dy):
        dy3 = dy[None] if squeeze else dy
        dx = kernels.maxpool1d_backward(idx, np.ascontiguousarray(dy3), t)
        return (dx[0] if squeeze else dx,)

    return record_op(Tensor(y[0] if squeeze else y), (x,), backward)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, T) with affine scale and shift.

    Train mode normalizes with batch statistics (population variance) and
    updates the running stats in place; eval mode uses the running stats.
    """
    data, squeeze = _as3d(x)
    n, c, t = data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")
    if train:
        if n * t < 2:
            raise DegenerateBatch(f"need at least 2 values per channel, got {n * t}")
        mean = data.mean(axis=(0, 2))
        var = data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(data.dtype)
        var = running_var.astype(data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(dy):
        dy3 = dy[None] if squeeze else dy
        dgamma = (dy3 * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        dbeta = dy3.sum(axis=(0, 2)) if beta.requires_grad else None
        if not x.requires_grad:
            return None, dgamma, dbeta
        dxhat = dy3 * gamma.data[None, :, None]
        if not train:
            return dxhat * inv_std[None, :, None], dgamma, dbeta
        m = n * t
        centered = data - mean[None, :, None]
        dvar = (dxhat * centered).sum(axis=(0, 2)) * (-0.5) * inv_std**3
        dmean = (
            -(dxhat.sum(axis=(0, 2))) * inv_std
            + dvar * (-2.0 / m) * centered.sum(axis=(0, 2))
        )
        dx = (
            dxhat * inv_std[None, :, None]
            + (2.0 / m) * dvar[None, :, None] * centered
            + dmean[None, :, None] / m
        )
        return dx.astype(data.dtype, copy=False), dgamma, dbeta

    return record_op(Tensor(y[0] if squeeze else y), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(dy):
        return (dy * (x.data > 0),)

    return record_op(Tensor(y), (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(dy):
        return (dy * y * (1.0 - y),)

    return record_op(Tensor(y), (x,), backward)


def dropout_mask(shape, rate: float, seed: int, layer_id: int, step: int) -> np.ndarray:
    """Keep-mask from a counter-based RNG keyed by (seed, layer_id, step).

    The key fully determines the mask, so parallel data loading or
    re-execution cannot perturb it.
    """
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
         np.uint64(((layer_id & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF))],
        dtype=np.uint64,
    )
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.random(size=shape) >= rate


def dropout(
    x: Tensor, rate: float, train: bool, seed: int = 0, layer_id: int = 0, step: int = 0
) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    scale = 1.0 / (1.0 - rate)
    mask = dropout_mask(x.shape, rate, seed, layer_id, step)
    factor = (mask * scale).astype(x.dtype)
    y = x.data * factor

    def backward(dy):
        return (dy * factor,)

    return record_op(Tensor(y), (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b for x of shape (N, F_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"dense shapes incompatible: {x.shape} @ {w.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} does not match width {w.data.shape[1]}")
    y = x.data @ w.data + b.data

    def backward(dy):
        dx = dy @ w.data.T if x.requires_grad else None
        dw = x.data.T @ dy if w.requires_grad else None
        db = dy.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return record_op(Tensor(y), (x, w, b), backward)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeMismatch("concat inputs must share rank")
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(dy):
        slices = []
        for i in range(len(parts)):
            index = [slice(None)] * ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            slices.append(np.ascontiguousarray(dy[tuple(index)]))
        return slices

    return record_op(Tensor(y), tuple(parts), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first: (N, ...) -> (N, F)."""
    if x.data.ndim < 2:
        raise ShapeMismatch(f"flatten expects rank >= 2, got {x.shape}")
    shape = x.data.shape
    y = x.data.reshape(shape[0], -1)

    def backward(dy):
        return (dy.reshape(shape),)

    return record_op(Tensor(y), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def backward(dy):
        return dy, dy

    return record_op(Tensor(y), (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul shapes differ: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def backward(dy):
        return dy * b.data, dy * a.data

    return record_op(Tensor(y), (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(dy):
        return (np.broadcast_to(dy, x.data.shape).astype(x.dtype),)

    return record_op(Tensor(y), (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all elements, computed from logits.

    Stable form max(z,0) - z*y + log(1 + exp(-|z|)); the gradient is
    (sigmoid(z) - y) / count.
    """
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.data.shape:
        raise ShapeMismatch(f"targets {y.shape} do not match logits {logits.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ShapeMismatch("targets must be binary 0/1")
    z = logits.data
    yt = y.astype(z.dtype)
    per_elem = np.maximum(z, 0) - z * yt + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per_elem.mean(), dtype=z.dtype)

    def backward(dy):
        return (dy * (_sigmoid(z) - yt) / z.size,)

    return record_op(Tensor(loss), (logits,), backward)
