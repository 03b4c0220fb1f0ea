"""Pure-numpy 3-D convolution kernels (fallback backend).

Implements exactly the same contracts as the compiled extension: direct
cross-correlation with zero padding over (C, X, Y, Z) tensors. The forward
and weight-gradient paths ride on sliding windows + einsum (BLAS); the
input gradient uses the transposed-kernel trick with zero-stuffing for
stride > 1.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    y = np.einsum("cxyzijk,ocijk->oxyz", win, w, optimize=True)
    return y + b[:, None, None, None]


def conv3d_backward_weight(x: np.ndarray, gy: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    return np.einsum("cxyzijk,oxyz->ocijk", win, gy, optimize=True)


def conv3d_backward_input(gy: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    if stride > 1:
        # zero-stuff onto the stride-1 output lattice, then reuse the
        # stride-1 adjoint (transposed-kernel full correlation)
        stuffed_shape = (gy.shape[0],) + tuple(s + 2 * pad - k + 1 for s in x_shape[1:])
        stuffed = np.zeros(stuffed_shape, dtype=gy.dtype)
        stuffed[:, ::stride, ::stride, ::stride] = gy
        gy = stuffed
    w_t = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    return conv3d_forward(gy, np.ascontiguousarray(w_t),
                          np.zeros(w_t.shape[0], dtype=gy.dtype), 1, k - 1 - pad)
