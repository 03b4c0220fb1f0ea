"""Convolution backend selection.

The compiled extension is preferred when importable; the numpy reference
implementation is the fallback. ``CFXQ_BACKEND`` overrides the choice:
``auto`` (default), ``compiled`` (error if unavailable), or ``numpy``.
Both backends implement identical semantics; results differ only by
floating-point summation order.
"""

from __future__ import annotations

import os

import numpy as np

from . import reference

_choice = os.environ.get("CFXQ_BACKEND", "auto")
if _choice not in ("auto", "compiled", "numpy"):
    raise RuntimeError(f"CFXQ_BACKEND must be auto|compiled|numpy, got {_choice!r}")

try:
    from . import _convolve as _cy
except ImportError:
    _cy = None

if _choice == "compiled" and _cy is None:
    raise ImportError("CFXQ_BACKEND=compiled but the extension is not built")

USE_COMPILED = _cy is not None and _choice != "numpy"
BACKEND = "compiled" if USE_COMPILED else "numpy"


def _pad4(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


# Empirical crossover (see benchmarks/bench_conv.py): the direct compiled
# loops win on large volumes with few input channels; the im2col + BLAS
# fallback wins on small volumes with many channels.
_BIG = 16384


def _compiled_ok(dtype) -> bool:
    return USE_COMPILED and dtype in (np.float32, np.float64)


def conv3d_forward(x, w, b, stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Cross-correlation of (Ci,X,Y,Z) with (Co,Ci,k,k,k) kernels plus bias."""
    k = w.shape[2]
    if pad is None:
        pad = k // 2
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s in x.shape[1:])
    vol_out = out_sp[0] * out_sp[1] * out_sp[2]
    if _compiled_ok(x.dtype) and (vol_out >= _BIG or x.shape[0] == 1):
        xp = _pad4(x, pad)
        out = np.empty((w.shape[0],) + out_sp, dtype=x.dtype)
        _cy.conv3d_forward_padded(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, out)
        return out
    return reference.conv3d_forward(x, w, b, stride, pad)


def conv3d_backward_weight(x, gy, k: int, stride: int = 1, pad: int | None = None) -> np.ndarray:
    if pad is None:
        pad = k // 2
    vol_out = gy.shape[1] * gy.shape[2] * gy.shape[3]
    if _compiled_ok(x.dtype) and vol_out >= _BIG and x.shape[0] > 1:
        xp = _pad4(x, pad)
        gw = np.empty((gy.shape[0], x.shape[0], k, k, k), dtype=x.dtype)
        _cy.conv3d_backward_weight_padded(xp, np.ascontiguousarray(gy), stride, gw)
        return gw
    return reference.conv3d_backward_weight(x, gy, k, stride, pad)


def conv3d_backward_input(gy, w, x_shape, stride: int = 1, pad: int | None = None) -> np.ndarray:
    k = w.shape[2]
    if pad is None:
        pad = k // 2
    vol_x = x_shape[1] * x_shape[2] * x_shape[3]
    ci = x_shape[0]
    if _compiled_ok(gy.dtype) and (ci == 1 or (vol_x >= _BIG and ci <= 8)):
        padded_shape = (x_shape[0],) + tuple(s + 2 * pad for s in x_shape[1:])
        gxp = np.zeros(padded_shape, dtype=gy.dtype)
        _cy.conv3d_backward_input_padded(np.ascontiguousarray(gy), np.ascontiguousarray(w), stride, gxp)
        if pad == 0:
            return gxp
        return np.ascontiguousarray(gxp[:, pad:-pad, pad:-pad, pad:-pad])
    return reference.conv3d_backward_input(gy, w, x_shape, stride, pad)
