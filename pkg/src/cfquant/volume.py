"""Dense 3-D volume container and the intensity/geometry transforms.

All operations are pure: they never mutate their inputs and return new
volumes, so they are safe to evaluate in parallel across subjects. Voxel
data is carried as a (dx, dy, dz)-indexed array; the flat serialization
order (x fastest) only appears in ``Volume3D.flat`` and the file format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConstantReference,
    ConstantVolume,
    DegenerateRange,
    MissingStats,
    ShapeMismatch,
)


@dataclass(frozen=True)
class Volume3D:
    """A dense 3-D scalar field with voxel spacing metadata.

    Parameters
    ----------
    data : np.ndarray
        Shape (dx, dy, dz), finite floating-point values.
    spacing_mm : tuple of float
        Positive voxel edge lengths in millimetres.
    """

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatch(f"volume data must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing_mm}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        """Voxels flattened x-fastest (the serialization order)."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, flat, dims, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume3D":
        flat = np.asarray(flat, dtype=np.float64)
        dx, dy, dz = dims
        if flat.size != dx * dy * dz:
            raise ShapeMismatch(f"flat length {flat.size} != {dx}*{dy}*{dz}")
        return cls(flat.reshape((dx, dy, dz), order="F"), spacing_mm)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume with the same spacing and replaced voxels."""
        return Volume3D(data, self.spacing_mm)


@dataclass(frozen=True)
class NormStats:
    """Per-subject normalization state stored by the forward preprocessing.

    ``mean``/``std`` come from the Gaussian step, ``q_low``/``q_high`` from
    the quantile step. Fields are None until the matching step has run.
    """

    mean: float | None = None
    std: float | None = None
    q_low: float | None = None
    q_high: float | None = None

    def __post_init__(self):
        if self.std is not None and self.std < 0:
            raise ValueError("std must be >= 0")
        if self.q_low is not None and self.q_high is not None and self.q_high < self.q_low:
            raise ValueError("q_high must be >= q_low")

    def merged(self, other: "NormStats") -> "NormStats":
        return NormStats(
            mean=self.mean if other.mean is None else other.mean,
            std=self.std if other.std is None else other.std,
            q_low=self.q_low if other.q_low is None else other.q_low,
            q_high=self.q_high if other.q_high is None else other.q_high,
        )


def gaussian_normalize(vol: Volume3D) -> tuple[Volume3D, NormStats]:
    """Z-score the volume; the (mean, std) pair is recorded for reversal.

    Raises ConstantVolume when the volume has zero standard deviation.
    """
    mean = float(np.mean(vol.data))
    std = float(np.std(vol.data))
    if std == 0.0:
        raise ConstantVolume("cannot z-score a constant volume")
    return vol.with_data((vol.data - mean) / std), NormStats(mean=mean, std=std)


def reverse_gaussian_normalize(vol: Volume3D, stats: NormStats) -> Volume3D:
    """Exact affine inverse of gaussian_normalize using the stored stats."""
    if stats.mean is None or stats.std is None:
        raise MissingStats("gaussian stats (mean, std) are required")
    return vol.with_data(vol.data * stats.std + stats.mean)


def quantile_normalize(vol: Volume3D, p_low: float = 0.01, p_high: float = 0.99) -> tuple[Volume3D, NormStats]:
    """Clip at the (p_low, p_high) sample quantiles, then rescale to [0, 1].

    The clip bounds are recorded so real-labeled volumes can be mapped back
    exactly on the unclipped range.
    """
    if not (0.0 <= p_low < p_high <= 1.0):
        raise ValueError(f"need 0 <= p_low < p_high <= 1, got ({p_low}, {p_high})")
    q_low, q_high = (float(q) for q in np.quantile(vol.data, [p_low, p_high]))
    if q_low == q_high:
        raise DegenerateRange(f"quantiles coincide at {q_low}")
    clipped = np.clip(vol.data, q_low, q_high)
    out = (clipped - q_low) / (q_high - q_low)
    return vol.with_data(out), NormStats(q_low=q_low, q_high=q_high)


def reverse_quantile_normalize(vol: Volume3D, stats: NormStats) -> Volume3D:
    """Affine map from [0, 1] back to the stored [q_low, q_high] range.

    Voxels that were clipped by the forward pass stay at the bounds; their
    original values are not recoverable.
    """
    if stats.q_low is None or stats.q_high is None:
        raise MissingStats("quantile stats (q_low, q_high) are required")
    return vol.with_data(vol.data * (stats.q_high - stats.q_low) + stats.q_low)


def histogram_match(source: Volume3D, reference: Volume3D) -> Volume3D:
    """Monotone rank-preserving remap of source onto reference's empirical distribution.

    Every output value is an actual reference sample: voxel v maps to the
    smallest reference order statistic whose empirical CDF reaches the
    source CDF at v (inverse-CDF matching, so matching a volume to itself
    is the identity).
    """
    ref = reference.data.ravel()
    if np.min(ref) == np.max(ref):
        raise ConstantReference("histogram-matching reference is constant")
    src = source.data.ravel()
    src_sorted = np.sort(src)
    ref_sorted = np.sort(ref)
    n, m = src.size, ref.size
    # empirical CDF rank of each source voxel (ties share the upper rank);
    # integer arithmetic keeps ceil(rank * m / n) exact
    rank = np.searchsorted(src_sorted, src, side="right")
    idx = (rank * m + n - 1) // n - 1
    out = ref_sorted[np.clip(idx, 0, m - 1)]
    return source.with_data(out.reshape(source.dims))


def _resize_axis(arr: np.ndarray, new_n: int, axis: int) -> np.ndarray:
    """Linear corner-aligned resize of one axis."""
    old_n = arr.shape[axis]
    if new_n == old_n:
        return arr
    if old_n == 1:
        reps = [1, 1, 1]
        reps[axis] = new_n
        return np.tile(arr, reps)
    pos = np.arange(new_n) * ((old_n - 1) / (new_n - 1))
    i0 = np.minimum(pos.astype(np.int64), old_n - 2)
    w = pos - i0
    shape = [1, 1, 1]
    shape[axis] = new_n
    w = w.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i0 + 1, axis=axis)
    return lo * (1.0 - w) + hi * w


def resample_trilinear(vol: Volume3D, new_dims) -> Volume3D:
    """Trilinear resample on the corner-aligned unit grid.

    Output values are convex combinations of input voxels, so constants map
    to constants and the value range never widens.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 2 for d in new_dims):
        raise ValueError(f"new dims must be >= 2 per axis, got {new_dims}")
    out = vol.data
    for axis in range(3):
        out = _resize_axis(out, new_dims[axis], axis)
    old = vol.dims
    spacing = tuple(
        vol.spacing_mm[a] * ((old[a] - 1) / (new_dims[a] - 1)) if new_dims[a] != old[a] else vol.spacing_mm[a]
        for a in range(3)
    )
    return Volume3D(out, spacing)


def gaussian_kernel_1d(sigma_vox: float) -> np.ndarray:
    """Discrete Gaussian taps truncated at 3 sigma, normalized to sum 1."""
    if sigma_vox <= 0:
        return np.ones(1)
    radius = int(np.ceil(3.0 * sigma_vox))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    return kern / kern.sum()


def _smooth_axis(arr: np.ndarray, kern: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kern) // 2
    if radius == 0:
        return arr
    pad = [(0, 0)] * 3
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad)
    out = np.zeros_like(arr)
    n = arr.shape[axis]
    index = [slice(None)] * 3
    for j, kv in enumerate(kern):
        index[axis] = slice(j, j + n)
        out += kv * padded[tuple(index)]
    return out


def gaussian_smooth(vol: Volume3D, sigma_mm: float) -> Volume3D:
    """Separable Gaussian smoothing with edge renormalization.

    The kernel is truncated at 3 sigma per axis and the result is divided by
    the smoothed domain indicator, so the effective kernel sums to one even
    at the boundary (no zero-inflation of edge voxels).
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    if sigma_mm == 0:
        return vol
    out = vol.data
    mass = np.ones_like(out)
    for axis in range(3):
        kern = gaussian_kernel_1d(sigma_mm / vol.spacing_mm[axis])
        out = _smooth_axis(out, kern, axis)
        mass = _smooth_axis(mass, kern, axis)
    return vol.with_data(out / mass)
