"""Minimal differentiable operators with hand-wired exact backward passes.

There is no computation graph: each forward returns (output, cache) and the
matching backward consumes the cache. Models compose these explicitly.
Tensors follow the (channels, dx, dy, dz) convention. Training runs in
float32; gradient verification switches everything to float64.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import core
from .errors import ShapeMismatch


class ParamStore:
    """Named parameter arrays with gradient accumulators and frozen flags.

    Frozen parameters accumulate gradients like any other (gradient flow
    through them is often needed) but are never updated by step().
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()
        self._velocity: dict[str, np.ndarray] = {}
        self._adam: dict = {"t": 0, "m": {}, "v": {}}

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        arr = np.array(value)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        if frozen:
            self._frozen.add(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def add_grad(self, name: str, g: np.ndarray) -> None:
        if g.shape != self._params[name].shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param {name} shape")
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def clip_grads(self, max_norm: float) -> float:
        """Scale all gradients so their global l2 norm is <= max_norm."""
        total = 0.0
        for name, g in self._grads.items():
            if name in self._frozen:
                continue
            total += float(np.sum(g.astype(np.float64) ** 2))
        norm = float(np.sqrt(total))
        if norm > max_norm > 0:
            scale = max_norm / norm
            for name, g in self._grads.items():
                if name not in self._frozen:
                    g *= scale
        return norm

    def step(self, lr: float, momentum: float = 0.0) -> None:
        """SGD with momentum; frozen parameters are untouched."""
        for name, p in self._params.items():
            if name in self._frozen:
                continue
            g = self._grads[name]
            if momentum:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p)
                    self._velocity[name] = v
                v *= momentum
                v += g
                p -= lr * v
            else:
                p -= lr * g

    def step_adam(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """Adam update; frozen parameters are untouched."""
        state = self._adam
        state["t"] += 1
        t = state["t"]
        for name, p in self._params.items():
            if name in self._frozen:
                continue
            g = self._grads[name]
            m = state["m"].get(name)
            if m is None:
                m = state["m"][name] = np.zeros_like(p)
                state["v"][name] = np.zeros_like(p)
            v = state["v"][name]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def optimize(self, optimizer: str, lr: float, momentum: float = 0.9) -> None:
        if optimizer == "adam":
            self.step_adam(lr)
        elif optimizer == "sgd":
            self.step(lr, momentum)
        else:
            raise ValueError(f"unknown optimizer {optimizer}")

    def param_count(self, trainable_only: bool = True) -> int:
        return sum(p.size for n, p in self._params.items()
                   if not (trainable_only and n in self._frozen))

    def checksum(self, names=None) -> str:
        """Hash of parameter bytes, for frozen-weight assertions."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name]).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.astype(dtype), frozen=name in self._frozen)
        return out

    def load(self, values: dict) -> None:
        for name, arr in values.items():
            p = self._params[name]
            if p.shape != arr.shape:
                raise ShapeMismatch(f"checkpoint shape mismatch for {name}")
            p[...] = arr

    def as_dict(self) -> dict:
        return dict(self._params)


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0) -> None:
    params.step(lr, momentum)


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------- conv3d

def conv3d(x, w, b, stride: int = 1, pad: int | None = None):
    """Zero-padded cross-correlation. Returns (y, cache)."""
    if x.ndim != 4 or w.ndim != 5 or x.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv3d got x {x.shape}, w {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ShapeMismatch("kernel spatial dims must be odd")
    y = core.conv3d_forward(x, w, b, stride, pad)
    return y, (x, w, stride, pad)


def conv3d_backward(cache, gy, want_input: bool = True, want_weights: bool = True):
    """Gradients for conv3d; either side can be skipped to save work."""
    x, w, stride, pad = cache
    k = w.shape[2]
    gx = core.conv3d_backward_input(gy, w, x.shape, stride, pad) if want_input else None
    if want_weights:
        gw = core.conv3d_backward_weight(x, gy, k, stride, pad)
        gb = gy.sum(axis=(1, 2, 3))
    else:
        gw = gb = None
    return gx, gw, gb


# ------------------------------------------------------------ pointwise

def leaky_relu(x, slope: float = 0.2):
    if not (0.0 < slope < 1.0):
        raise ValueError("slope must be in (0, 1)")
    y = np.where(x >= 0, x, slope * x)
    return y, (x, slope)

def leaky_relu_backward(cache, gy):
    x, slope = cache
    return np.where(x >= 0, gy, slope * gy)


# ------------------------------------------------------------- pooling

def downsample_max2(x):
    """Factor-2 max pooling; requires even spatial dims."""
    c, dx, dy, dz = x.shape
    if dx % 2 or dy % 2 or dz % 2:
        raise ShapeMismatch(f"max-pool needs even dims, got {x.shape}")
    blocks = x.reshape(c, dx // 2, 2, dy // 2, 2, dz // 2, 2)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, dx // 2, dy // 2, dz // 2, 8)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)

def downsample_max2_backward(cache, gy):
    (c, dx, dy, dz), arg = cache
    flat = np.zeros((c, dx // 2, dy // 2, dz // 2, 8), dtype=gy.dtype)
    np.put_along_axis(flat, arg[..., None], gy[..., None], axis=-1)
    flat = flat.reshape(c, dx // 2, dy // 2, dz // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
    return flat.reshape(c, dx, dy, dz)


def downsample_avg2(x):
    """Factor-2 average pooling; requires even spatial dims."""
    c, dx, dy, dz = x.shape
    if dx % 2 or dy % 2 or dz % 2:
        raise ShapeMismatch(f"avg-pool needs even dims, got {x.shape}")
    blocks = x.reshape(c, dx // 2, 2, dy // 2, 2, dz // 2, 2)
    return blocks.mean(axis=(2, 4, 6)), x.shape

def downsample_avg2_backward(cache, gy):
    c, dx, dy, dz = cache
    g = gy[:, :, None, :, None, :, None] / 8.0
    return np.broadcast_to(g, (c, dx // 2, 2, dy // 2, 2, dz // 2, 2)).reshape(
        c, dx, dy, dz).astype(gy.dtype, copy=True)


def _resize_plan(old_n: int, new_n: int):
    """Corner-aligned linear interpolation indices/weights for one axis."""
    if old_n == 1:
        return np.zeros(new_n, dtype=np.int64), np.zeros(new_n, dtype=np.int64), np.ones(new_n), np.zeros(new_n)
    pos = np.arange(new_n) * ((old_n - 1) / (new_n - 1))
    i0 = np.minimum(pos.astype(np.int64), old_n - 2)
    w1 = pos - i0
    return i0, i0 + 1, 1.0 - w1, w1

def _resize_axis_fwd(x, new_n: int, axis: int):
    old_n = x.shape[axis]
    if old_n == new_n:
        return x
    i0, i1, w0, w1 = _resize_plan(old_n, new_n)
    shape = [1] * x.ndim
    shape[axis] = new_n
    return (np.take(x, i0, axis=axis) * w0.reshape(shape).astype(x.dtype)
            + np.take(x, i1, axis=axis) * w1.reshape(shape).astype(x.dtype))

def _resize_axis_bwd(gy, old_n: int, axis: int):
    new_n = gy.shape[axis]
    if old_n == new_n:
        return gy
    i0, i1, w0, w1 = _resize_plan(old_n, new_n)
    shape = [1] * gy.ndim
    shape[axis] = new_n
    gx_shape = list(gy.shape)
    gx_shape[axis] = old_n
    gx = np.zeros(gx_shape, dtype=gy.dtype)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, i0, np.moveaxis(gy * w0.reshape(shape).astype(gy.dtype), axis, 0))
    np.add.at(moved, i1, np.moveaxis(gy * w1.reshape(shape).astype(gy.dtype), axis, 0))
    return gx

def upsample_trilinear2(x):
    """Corner-aligned trilinear upsampling by a factor of two."""
    y = x
    for axis in (1, 2, 3):
        y = _resize_axis_fwd(y, 2 * x.shape[axis], axis)
    return y, x.shape

def upsample_trilinear2_backward(cache, gy):
    x_shape = cache
    gx = gy
    for axis in (3, 2, 1):
        gx = _resize_axis_bwd(gx, x_shape[axis], axis)
    return gx


# ------------------------------------------------------ heads and losses

def global_avg_pool(x):
    c = x.shape[0]
    return x.reshape(c, -1).mean(axis=1), x.shape

def global_avg_pool_backward(cache, gy):
    x_shape = cache
    n = int(np.prod(x_shape[1:]))
    return np.broadcast_to((gy / n)[:, None, None, None], x_shape).astype(gy.dtype, copy=True)


def smoothing_kernel(sigma_vox: float) -> np.ndarray:
    """1-D Gaussian taps truncated at 3 sigma, normalized to sum 1."""
    if sigma_vox <= 0:
        return np.ones(1)
    radius = int(np.ceil(3.0 * sigma_vox))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    return kern / kern.sum()


def fixed_smooth3(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Separable zero-padded smoothing of (C, X, Y, Z) with a symmetric kernel.

    The operator is self-adjoint, so the backward pass is the same call on
    the output gradient.
    """
    radius = len(kern) // 2
    if radius == 0:
        return x
    taps = kern.astype(x.dtype)
    out = x
    for axis in (1, 2, 3):
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad)
        acc = np.zeros_like(out)
        n = out.shape[axis]
        index = [slice(None)] * 4
        for j, kv in enumerate(taps):
            index[axis] = slice(j, j + n)
            acc += kv * padded[tuple(index)]
        out = acc
    return out


def octant_split(dim: int) -> int:
    """Cells per axis for octant pooling: halves when possible."""
    return 2 if dim >= 2 and dim % 2 == 0 else 1


def octant_avg_pool(x):
    """Spatial mean over half-axis octant cells -> (C * n_cells,) vector.

    Keeps coarse localization that a global mean would average away;
    degrades to fewer cells (down to a global mean) on tiny maps.
    """
    c, dx, dy, dz = x.shape
    sx, sy, sz = octant_split(dx), octant_split(dy), octant_split(dz)
    blocks = x.reshape(c, sx, dx // sx, sy, dy // sy, sz, dz // sz)
    pooled = blocks.mean(axis=(2, 4, 6))
    return pooled.reshape(-1), x.shape

def octant_avg_pool_backward(cache, gy):
    c, dx, dy, dz = cache
    sx, sy, sz = octant_split(dx), octant_split(dy), octant_split(dz)
    n = (dx // sx) * (dy // sy) * (dz // sz)
    g = gy.reshape(c, sx, 1, sy, 1, sz, 1) / n
    return np.broadcast_to(g, (c, sx, dx // sx, sy, dy // sy, sz, dz // sz)).reshape(
        c, dx, dy, dz).astype(gy.dtype, copy=True)


def octant_cells(spatial_dims) -> int:
    out = 1
    for d in spatial_dims:
        out *= octant_split(d)
    return out


def linear(x, w, b):
    return w @ x + b, (x, w)

def linear_backward(cache, gy):
    x, w = cache
    return w.T @ gy, np.outer(gy, x), gy


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probability simplex point for any finite logits (max-shift stabilized)."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    p = float(np.dot(probs, onehot))
    return -float(np.log(max(p, 1e-300)))


def softmax_ce(logits: np.ndarray, onehot: np.ndarray):
    """Combined softmax + cross-entropy. Returns (loss, probs, cache)."""
    if logits.shape != onehot.shape or logits.size < 2:
        raise ShapeMismatch("softmax_ce needs matching >=2-class vectors")
    z = logits - np.max(logits)
    lse = float(np.log(np.sum(np.exp(z))))
    loss = lse - float(np.dot(z, onehot))
    probs = np.exp(z - lse)
    return loss, probs, (probs, onehot)

def softmax_ce_backward(cache, gscale=1.0):
    probs, onehot = cache
    return (probs - onehot) * gscale


# --------------------------------------------------------- verification

def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-3, sample: int | None = None,
                     rng: np.random.Generator | None = None):
    """Central finite differences of scalar f at x.

    Returns (indices, numeric gradients). When ``sample`` is given, only
    that many coordinates (chosen by rng) are probed.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(flat.size, size=sample, replace=False)
    grads = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        grads[j] = (f_plus - f_minus) / (2 * eps)
    return idx, grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f, arrays: dict, analytic: dict, eps: float = 1e-3,
               sample: int | None = None, seed: int = 0) -> float:
    """Compare analytic gradients against central differences of f.

    ``f`` is a closure returning the scalar loss from the live ``arrays``;
    ``analytic`` maps the same names to precomputed gradients. Returns the
    max relative error across all checked coordinates.
    """
    worst = 0.0
    rng = np.random.default_rng(seed)
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 arrays ({name} is {arr.dtype})")
        idx, numeric = finite_diff_grad(f, arr, eps=eps, sample=sample, rng=rng)
        ana = np.asarray(analytic[name]).reshape(-1)[idx]
        worst = max(worst, max_rel_err(ana, numeric))
    return worst


def grad_check_piecewise(f, arrays: dict, analytic: dict, eps: float = 1e-6,
                         sample: int | None = None, seed: int = 0,
                         min_valid_fraction: float = 0.8):
    """grad_check for piecewise-smooth objectives (relu/abs/max-pool nets).

    ``f`` returns (value, piece_signature); a probe is a valid derivative
    measurement only when both +eps and -eps evaluations stay on the same
    smooth piece (identical signatures). Invalid probes are skipped; if
    fewer than ``min_valid_fraction`` of probes are valid the measurement
    itself is rejected. Returns (max relative error, valid fraction).
    """
    worst = 0.0
    n_probes = 0
    n_valid = 0
    rng = np.random.default_rng(seed)
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 arrays ({name} is {arr.dtype})")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = rng.choice(flat.size, size=sample, replace=False)
        ana_flat = np.asarray(analytic[name]).reshape(-1)
        for i in idx:
            n_probes += 1
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, sig_plus = f()
            flat[i] = orig - eps
            f_minus, sig_minus = f()
            flat[i] = orig
            if sig_plus != sig_minus:
                continue
            n_valid += 1
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, max_rel_err(ana_flat[i], numeric))
    fraction = n_valid / n_probes if n_probes else 0.0
    if fraction < min_valid_fraction:
        raise FloatingPointError(
            f"only {fraction:.1%} of finite-difference probes avoided kink crossings")
    return worst, fraction
