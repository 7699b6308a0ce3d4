"""NumPy implementations of the hot kernels (conv1d, maxpool1d).

The convolution is an im2col + BLAS matmul, chunked over the batch axis
to bound the size of the column buffer. Semantics are cross-correlation
(no kernel flip) with zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# cap on column-buffer elements per chunk (~64 MB at float32)
_CHUNK_ELEMS = 16_000_000


def conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    return (t + 2 * pad - k) // stride + 1


def _batch_chunks(n: int, per_sample_elems: int):
    step = max(1, _CHUNK_ELEMS // max(per_sample_elems, 1))
    for start in range(0, n, step):
        yield start, min(start + step, n)


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c_in, t = x.shape
    c_out, _, k = w.shape
    t_out = conv_out_len(t, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    y = np.empty((n, c_out, t_out), dtype=x.dtype)
    for lo, hi in _batch_chunks(n, c_in * k * t_out):
        win = sliding_window_view(xp[lo:hi], k, axis=2)[:, :, ::stride, :]
        # (chunk, t_out, c_out) <- sum over (c_in, k)
        y[lo:hi] = np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    return y


def conv1d_backward(
    x: np.ndarray,
    w: np.ndarray,
    dy: np.ndarray,
    stride: int,
    pad: int,
    need_dx: bool = True,
    need_dw: bool = True,
):
    n, c_in, t = x.shape
    c_out, _, k = w.shape
    t_out = dy.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    dw = np.zeros_like(w) if need_dw else None
    dxp = np.zeros((n, c_in, t + 2 * pad), dtype=x.dtype) if need_dx else None
    for lo, hi in _batch_chunks(n, c_in * k * t_out):
        if need_dw:
            win = sliding_window_view(xp[lo:hi], k, axis=2)[:, :, ::stride, :]
            dw += np.tensordot(dy[lo:hi], win, axes=([0, 2], [0, 2]))
        if need_dx:
            # dcol[n, t_out, c_in, k] = sum_o dy[n, o, t_out] * w[o, c_in, k]
            dcol = np.tensordot(dy[lo:hi], w, axes=([1], [0]))
            view = dcol.transpose(0, 2, 3, 1)  # (chunk, c_in, k, t_out)
            for kk in range(k):
                dxp[lo:hi, :, kk : kk + stride * t_out : stride] += view[:, :, kk, :]
    dx = None
    if need_dx:
        dx = dxp[:, :, pad : pad + t] if pad else dxp
    return dx, dw


def maxpool1d_forward(x: np.ndarray, k: int, stride: int, ceil_mode: bool):
    n, c, t = x.shape
    if ceil_mode:
        t_out = -(-(t - k) // stride) + 1
        padded_len = (t_out - 1) * stride + k
        if padded_len > t:
            xp = np.concatenate(
                [x, np.full((n, c, padded_len - t), -np.inf, dtype=x.dtype)], axis=2
            )
        else:
            xp = x
    else:
        t_out = (t - k) // stride + 1
        xp = x
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=3)
    idx = (np.arange(t_out) * stride)[None, None, :] + arg
    y = np.take_along_axis(xp, idx, axis=2)
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool1d_backward(idx: np.ndarray, dy: np.ndarray, t: int) -> np.ndarray:
    n, c, t_out = dy.shape
    dx = np.zeros((n * c, t), dtype=dy.dtype)
    rows = np.repeat(np.arange(n * c), t_out)
    np.add.at(dx, (rows, idx.reshape(-1)), dy.reshape(-1))
    return dx.reshape(n, c, t)
