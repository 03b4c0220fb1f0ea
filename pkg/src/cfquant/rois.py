"""Atlas-driven ROI aggregation and the discrepant-ROI set algebra.

The effect-ROI aggregation keeps a fixed accumulation order (ascending
voxel index, sequential float64 adds, one final division), so it is
bitwise-reproducible and bitwise-equal to the naive double-loop oracle in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import EffectMap, DensityMap, StatMap
from .errors import ShapeMismatch
from .phantom import Atlas


@dataclass(frozen=True)
class RoiVector:
    """Region-aggregated feature vector; zero entries are regions that
    failed the minimum-highlight-count indicator."""

    values: np.ndarray            # length R, float64
    region_ids: tuple             # 1..R
    source: str                   # "effect" | "statistical" | "patient"
    scenario: str = ""

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.shape != (len(self.region_ids),):
            raise ShapeMismatch("values length must match region ids")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def active_ids(self) -> tuple:
        return tuple(int(r) for r, v in zip(self.region_ids, self.values) if v != 0.0)


@dataclass(frozen=True)
class RoiSet:
    """A set of region ids with its provenance."""

    ids: frozenset
    provenance: str               # "effect" | "statistical" | "derived"

    def __post_init__(self):
        object.__setattr__(self, "ids", frozenset(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)


def default_alpha(atlas: Atlas) -> int:
    """Minimum highlighted-voxel count: max(4, 1% of the median region size)."""
    sizes = [len(v) for v in atlas.voxel_index_sets]
    return max(4, int(round(0.01 * float(np.median(sizes)))))


def _region_mean_sequential(flat_values: np.ndarray, indices) -> float:
    """Sequential sum in ascending index order, one division (order-fixed)."""
    total = 0.0
    for idx in indices:
        total += float(flat_values[idx])
    return total / len(indices)


def ad_effect_rois(effect: EffectMap, atlas: Atlas, alpha: int,
                   scenario: str = "", full_region_norm: bool = False) -> RoiVector:
    """Aggregate the masked effect map per region.

    A region with at least ``alpha`` highlighted voxels gets the mean effect
    value over those voxels (or, behind the flag, the highlighted sum
    normalized by the full region size); other regions get zero.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if effect.volume.dims != atlas.dims:
        raise ShapeMismatch("effect map and atlas dims differ")
    eff_flat = effect.volume.flat
    mask_flat = effect.mask.ravel(order="F")
    values = np.zeros(atlas.n_regions, dtype=np.float64)
    for r, region_idx in enumerate(atlas.voxel_index_sets):
        highlighted = region_idx[mask_flat[region_idx]]
        if highlighted.size >= alpha:
            if full_region_norm:
                total = 0.0
                for idx in highlighted:
                    total += float(eff_flat[idx])
                values[r] = total / len(region_idx)
            else:
                values[r] = _region_mean_sequential(eff_flat, highlighted)
    return RoiVector(values=values, region_ids=tuple(range(1, atlas.n_regions + 1)),
                     source="effect", scenario=scenario)


def statistical_rois(stat: StatMap, atlas: Atlas, alpha: int, p_thresh: float = 0.01,
                     scenario: str = "") -> tuple:
    """ROI aggregation of the significance map.

    Highlight mask is p < p_thresh; the aggregated value is mean(1 - p)
    over highlighted voxels so that larger means more significant. Returns
    (RoiVector, raw mean-p vector) — the raw means are kept for audit.
    """
    if stat.volume.dims != atlas.dims:
        raise ShapeMismatch("stat map and atlas dims differ")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    p_flat = stat.volume.flat
    one_minus_p = 1.0 - p_flat
    sig_flat = (stat.volume.data < p_thresh).ravel(order="F")
    values = np.zeros(atlas.n_regions, dtype=np.float64)
    mean_p = np.ones(atlas.n_regions, dtype=np.float64)
    for r, region_idx in enumerate(atlas.voxel_index_sets):
        highlighted = region_idx[sig_flat[region_idx]]
        if highlighted.size >= alpha:
            values[r] = _region_mean_sequential(one_minus_p, highlighted)
            mean_p[r] = _region_mean_sequential(p_flat, highlighted)
    vec = RoiVector(values=values, region_ids=tuple(range(1, atlas.n_regions + 1)),
                    source="statistical", scenario=scenario)
    return vec, mean_p


def patient_rois(density: DensityMap, atlas: Atlas, active: RoiSet,
                 scenario: str = "") -> RoiVector:
    """Per-subject mean density over the full voxel set of each active region."""
    if density.volume.dims != atlas.dims:
        raise ShapeMismatch("density map and atlas dims differ")
    flat = density.volume.flat
    values = np.zeros(atlas.n_regions, dtype=np.float64)
    for r, region_idx in enumerate(atlas.voxel_index_sets):
        if (r + 1) in active.ids:
            values[r] = float(np.mean(flat[region_idx]))
    return RoiVector(values=values, region_ids=tuple(range(1, atlas.n_regions + 1)),
                     source="patient", scenario=scenario)


def roi_set_from_vector(vec: RoiVector) -> RoiSet:
    return RoiSet(ids=frozenset(vec.active_ids()),
                  provenance="effect" if vec.source == "effect" else "statistical")


def roi_set_algebra(a: RoiSet, b: RoiSet, op: str) -> RoiSet:
    """Standard finite-set semantics; the result is provenance 'derived'."""
    if op == "intersection":
        ids = a.ids & b.ids
    elif op == "union":
        ids = a.ids | b.ids
    elif op == "difference":
        ids = a.ids - b.ids
    else:
        raise ValueError(f"unknown set op {op}")
    return RoiSet(ids=ids, provenance="derived")
