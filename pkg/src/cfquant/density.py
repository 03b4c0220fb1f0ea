"""Image-manipulation chain to density maps, plus effect and statistical maps.

The forward preprocessing (raw scan -> model input) is: down-scale to the
model grid, quantile-normalize to [0, 1], then z-score; the reversal runs
the exact inverse chain. Counterfactual volumes cannot invert the quantile
step from stored state (their pre-clip values never existed), so they are
histogram-matched against the reversed paired real input instead.

In this synthetic setting the phantom intensity is the density surrogate:
segmentation, nonlinear registration, and Jacobian modulation of the real
tooling are identity steps, which is stamped into every map's provenance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroup, EmptyPairs, MissingStats, ShapeMismatch
from .phantom import Atlas
from .stats import anova_p, welch_t_p
from .volume import (
    NormStats,
    Volume3D,
    gaussian_normalize,
    gaussian_smooth,
    histogram_match,
    quantile_normalize,
    resample_trilinear,
    reverse_gaussian_normalize,
    reverse_quantile_normalize,
)

DENSITY_SURROGATE_NOTE = "segmentation=identity;registration=identity;jacobian=identity"


def preprocess(raw: Volume3D, input_dims, p_low: float = 0.01, p_high: float = 0.99):
    """Raw scan -> model input. Returns (volume, stats for the reversal)."""
    small = resample_trilinear(raw, input_dims)
    quantiled, q_stats = quantile_normalize(small, p_low, p_high)
    normalized, g_stats = gaussian_normalize(quantiled)
    return normalized, q_stats.merged(g_stats)


def reverse_preprocess(x: Volume3D, stats: NormStats | None, raw_dims,
                       paired_input: Volume3D | None = None,
                       is_counterfactual: bool = False) -> Volume3D:
    """Model-space volume -> raw-space volume via the stored per-subject state.

    Real volumes reverse the quantile step with the stored bounds;
    counterfactual volumes histogram-match against the reversed paired real
    input. Up-scaling to ``raw_dims`` comes last.
    """
    if stats is None or stats.mean is None or stats.std is None:
        raise MissingStats("per-subject normalization stats are required")
    de_gauss = reverse_gaussian_normalize(x, stats)
    if is_counterfactual:
        if paired_input is None:
            raise MissingStats("counterfactual reversal needs the paired real input")
        ref = reverse_quantile_normalize(reverse_gaussian_normalize(paired_input, stats), stats)
        raw_scale = histogram_match(de_gauss, ref)
    else:
        raw_scale = reverse_quantile_normalize(de_gauss, stats)
    return resample_trilinear(raw_scale, raw_dims)


@dataclass(frozen=True)
class DensityMap:
    """Raw-dims density volume with provenance for train/test filtering."""

    volume: Volume3D
    provenance: str               # "real" | "counterfactual"
    subject_id: str
    stage: str                    # clinical stage label of the map

    def __post_init__(self):
        if self.provenance not in ("real", "counterfactual"):
            raise ValueError(f"bad provenance {self.provenance}")


def to_gm_density(b_prime: Volume3D, mask: np.ndarray, sigma_mm: float = 2.0,
                  provenance: str = "real", subject_id: str = "", stage: str = "") -> DensityMap:
    """Masked intensity treated as density, then Gaussian-smoothed (sigma 2 mm)."""
    if mask.shape != b_prime.dims:
        raise ShapeMismatch(f"mask {mask.shape} vs volume {b_prime.dims}")
    masked = b_prime.with_data(np.where(mask, b_prime.data, 0.0))
    smoothed = gaussian_smooth(masked, sigma_mm)
    return DensityMap(volume=smoothed, provenance=provenance, subject_id=subject_id, stage=stage)


@dataclass(frozen=True)
class EffectMap:
    """Mean absolute rGM/cGM difference with its percentile mask."""

    volume: Volume3D
    percentile: float
    mask: np.ndarray              # boolean, same dims

    def __post_init__(self):
        if np.any(self.volume.data < 0):
            raise ValueError("effect map values must be >= 0")


def ad_effect_map_volume(pairs) -> Volume3D:
    """Voxelwise mean of |real - counterfactual| over all pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyPairs("effect map needs at least one (rGM, cGM) pair")
    dims = pairs[0][0].dims
    acc = np.zeros(dims, dtype=np.float64)
    for real, cf in pairs:
        if real.dims != dims or cf.dims != dims:
            raise ShapeMismatch("all pairs must share dims")
        acc += np.abs(real.data - cf.data)
    return Volume3D(acc / len(pairs), pairs[0][0].spacing_mm)


def percentile_mask(volume: Volume3D, p: float = 0.99, domain: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of voxels at or above the p-quantile of the domain voxels.

    ``domain`` defaults to the nonzero voxels of the map; ties at the
    threshold are included, which makes the mask monotone in p.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"percentile must be in (0, 1), got {p}")
    if domain is None:
        domain = volume.data != 0
    if domain.shape != volume.dims:
        raise ShapeMismatch("domain mask dims mismatch")
    values = volume.data[domain]
    if values.size == 0:
        raise EmptyPairs("empty percentile domain")
    threshold = float(np.quantile(values, p))
    return (volume.data >= threshold) & domain


def ad_effect_map(pairs, p: float = 0.99, domain: np.ndarray | None = None) -> EffectMap:
    vol = ad_effect_map_volume(pairs)
    return EffectMap(volume=vol, percentile=p, mask=percentile_mask(vol, p, domain))


def multi_class_effect_map(density_maps, p: float = 0.99, domain: np.ndarray | None = None,
                           seed: int = 0) -> EffectMap:
    """Normal-vs-patient effect map for the multi-class scenario.

    Density maps (real and counterfactual, any stage) are partitioned into
    normal (CN) and patient (MCI/AD) groups; equal-sized subsamples are
    randomly matched into pairs and fed through the mean-|difference| map.
    """
    normal = [d for d in density_maps if d.stage == "CN"]
    patient = [d for d in density_maps if d.stage in ("MCI", "AD")]
    if not normal or not patient:
        raise EmptyGroup("both normal and patient groups must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1313)))
    n = min(len(normal), len(patient))
    normal_pick = [normal[i] for i in rng.permutation(len(normal))[:n]]
    patient_pick = [patient[i] for i in rng.permutation(len(patient))[:n]]
    pairs = [(a.volume, b.volume) for a, b in zip(normal_pick, patient_pick)]
    return ad_effect_map(pairs, p, domain)


@dataclass(frozen=True)
class StatMap:
    """Voxelwise p-value map from a two-sample t-test or one-way ANOVA."""

    volume: Volume3D              # p-values in [0, 1]
    test_kind: str                # "two-sample-t" | "anova"
    threshold: float

    def __post_init__(self):
        if np.any(self.volume.data < 0) or np.any(self.volume.data > 1):
            raise ValueError("p-values must lie in [0, 1]")

    @property
    def significant(self) -> np.ndarray:
        return self.volume.data < self.threshold


def stat_map_ttest(group_a, group_b, threshold: float = 0.01) -> StatMap:
    """Voxelwise Welch two-sample t-test between two density-map groups.

    Voxels with zero variance in both groups get p = 1.
    """
    a = np.stack([d.volume.data for d in group_a])
    b = np.stack([d.volume.data for d in group_b])
    if a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch("group dims differ")
    p = welch_t_p(a, b, axis=0)
    vol = Volume3D(p, group_a[0].volume.spacing_mm)
    return StatMap(volume=vol, test_kind="two-sample-t", threshold=threshold)


def stat_map_anova(groups, threshold: float = 0.01) -> StatMap:
    """Voxelwise one-way ANOVA across three or more density-map groups."""
    if len(groups) < 3:
        raise ValueError("anova needs >= 3 groups")
    stacks = [np.stack([d.volume.data for d in g]) for g in groups]
    p = anova_p(stacks, axis=0)
    vol = Volume3D(p, groups[0][0].volume.spacing_mm)
    return StatMap(volume=vol, test_kind="anova", threshold=threshold)


def validate_cgm_groups(rgms, cgms, atlas: Atlas, p_threshold: float = 0.05):
    """Per-region t-test between same-stage real and counterfactual densities.

    Non-rejection (p >= threshold) means the counterfactual group is
    distributionally compatible with the real one. Returns
    (rows, compatible_fraction) with one row (region_id, name, p) per region.
    """
    if not rgms or not cgms:
        raise EmptyGroup("both density groups must be non-empty")

    def region_means(maps):
        flats = [d.volume.flat for d in maps]
        return np.array([[flat[idx].mean() for idx in atlas.voxel_index_sets] for flat in flats])

    real_feats = region_means(rgms)      # (n_real, R)
    cf_feats = region_means(cgms)        # (n_cf, R)
    ps = welch_t_p(real_feats, cf_feats, axis=0)
    rows = [(r + 1, atlas.region_names[r], float(ps[r])) for r in range(atlas.n_regions)]
    compatible = float(np.mean([p >= p_threshold for _, _, p in rows]))
    return rows, compatible
