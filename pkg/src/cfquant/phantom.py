"""Deterministic phantom brains, synthetic parcellation, and planted ground truth.

Every downstream stage is validated against phantoms whose class effects are
known by construction: atrophy regions lose density with disease stage,
one growth region gains it, and an optional aging term couples density to
age for the confound experiments. All randomness is keyed by (spec seed,
subject seed), so generation is bitwise reproducible and a subject's noise
field does not depend on its label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, ShapeMismatch, TooManyRegions
from .volume import NormStats, Volume3D

LABELS = ("CN", "MCI", "AD")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

AGE_RANGES = {"CN": (55.0, 80.0), "MCI": (60.0, 85.0), "AD": (65.0, 90.0)}
AGE_MIN, AGE_MAX = 50.0, 95.0


def _default_effect_regions(n_regions: int) -> tuple:
    # three atrophy regions spread across the id range
    return tuple(sorted({max(1, round(n_regions * k / 5)) for k in (1, 3, 4)}))


def _default_growth_regions(n_regions: int) -> tuple:
    return (max(1, round(n_regions * 2 / 5)),)


@dataclass(frozen=True)
class PhantomSpec:
    """Configuration of the synthetic cohort."""

    raw_dims: tuple = (48, 48, 48)
    input_dims: tuple = (32, 32, 32)
    n_regions: int = 24
    effect_regions: tuple = ()
    growth_regions: tuple = ()
    delta: float = 0.3
    noise_std: float = 0.05
    aging_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.n_regions < 2:
            raise ValueError("need at least two regions")
        if not self.effect_regions:
            object.__setattr__(self, "effect_regions", _default_effect_regions(self.n_regions))
        if not self.growth_regions:
            object.__setattr__(self, "growth_regions", _default_growth_regions(self.n_regions))
        all_ids = set(self.effect_regions) | set(self.growth_regions)
        if not all_ids <= set(range(1, self.n_regions + 1)):
            raise ValueError("effect/growth region ids must lie in 1..n_regions")

    @property
    def planted_regions(self) -> tuple:
        return tuple(sorted(set(self.effect_regions) | set(self.growth_regions)))


@dataclass(frozen=True)
class Atlas:
    """Synthetic parcellation: region ids 1..R inside an ellipsoidal mask."""

    labels: np.ndarray              # int32, raw dims, 0 = background
    spacing_mm: tuple
    region_names: tuple
    voxel_index_sets: tuple         # per region: ascending x-fastest flat indices

    def __post_init__(self):
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def n_regions(self) -> int:
        return len(self.region_names)

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    def region_mask(self, region_id: int) -> np.ndarray:
        return self.labels == region_id


@dataclass
class LabeledScan:
    """A volume plus identity, class label, age, and stored normalization state."""

    volume: Volume3D
    subject_id: str
    label: str
    age: float
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label}")
        if not (AGE_MIN <= self.age <= AGE_MAX):
            raise ValueError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")


def _split_by_quantiles(coords: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each coordinate to one of n_bins value-aligned slabs of ~equal count."""
    edges = np.quantile(coords, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, coords, side="right")


def _grid_factors(n: int) -> tuple:
    """Factor n into three near-equal factors (gx * gy * gz = n)."""
    best = (n, 1, 1)
    best_score = n
    for a in range(1, n + 1):
        if n % a:
            continue
        rest = n // a
        for b in range(1, rest + 1):
            if rest % b:
                continue
            c = rest // b
            score = max(a, b, c) - min(a, b, c)
            if score < best_score:
                best_score = score
                best = (a, b, c)
    return tuple(sorted(best, reverse=True))


def make_atlas(spec: PhantomSpec) -> Atlas:
    """Ellipsoidal brain mask subdivided into R contiguous lattice cells.

    Cells are axis-aligned boxes bounded by coordinate quantiles of the mask
    voxels, so regions are near-equal in size and every region is connected.
    Deterministic for a fixed spec. Raises TooManyRegions when any region
    would fall below 8 voxels.
    """
    dx, dy, dz = spec.raw_dims
    gx, gy, gz = _grid_factors(spec.n_regions)
    xs, ys, zs = np.meshgrid(np.arange(dx), np.arange(dy), np.arange(dz), indexing="ij")
    center = ((dx - 1) / 2, (dy - 1) / 2, (dz - 1) / 2)
    radii = (0.44 * dx, 0.44 * dy, 0.44 * dz)
    mask = (
        ((xs - center[0]) / radii[0]) ** 2
        + ((ys - center[1]) / radii[1]) ** 2
        + ((zs - center[2]) / radii[2]) ** 2
    ) <= 1.0
    n_mask = int(mask.sum())
    if n_mask < 8 * spec.n_regions:
        raise TooManyRegions(f"{spec.n_regions} regions cannot all get >= 8 of {n_mask} voxels")

    labels = np.zeros((dx, dy, dz), dtype=np.int32)
    mx, my, mz = xs[mask], ys[mask], zs[mask]
    x_bin = _split_by_quantiles(mx, gx)
    cell = np.full(n_mask, -1, dtype=np.int64)
    for bx in range(gx):
        in_x = x_bin == bx
        if not in_x.any():
            raise TooManyRegions("empty x slab")
        y_bin = _split_by_quantiles(my[in_x], gy)
        for by in range(gy):
            sel_xy = np.where(in_x)[0][y_bin == by]
            if sel_xy.size == 0:
                raise TooManyRegions("empty y slab")
            z_bin = _split_by_quantiles(mz[sel_xy], gz)
            for bz in range(gz):
                sel = sel_xy[z_bin == bz]
                region = (bx * gy + by) * gz + bz + 1
                cell[sel] = region
    labels[mask] = cell
    sizes = np.bincount(cell, minlength=spec.n_regions + 1)[1:]
    if sizes.min() < 8:
        raise TooManyRegions(f"smallest region has {sizes.min()} voxels (< 8)")

    flat = labels.ravel(order="F")
    index_sets = tuple(np.flatnonzero(flat == r) for r in range(1, spec.n_regions + 1))
    names = tuple(f"region_{r:02d}" for r in range(1, spec.n_regions + 1))
    return Atlas(labels=labels, spacing_mm=(1.0, 1.0, 1.0), region_names=names, voxel_index_sets=index_sets)


def resample_labels_nearest(labels: np.ndarray, new_dims) -> np.ndarray:
    """Nearest-neighbor resampling of an integer label volume."""
    idx = [np.clip(np.round(np.arange(n) * ((labels.shape[a] - 1) / max(n - 1, 1))).astype(np.int64),
                   0, labels.shape[a] - 1)
           for a, n in enumerate(new_dims)]
    return labels[np.ix_(idx[0], idx[1], idx[2])]


def class_offset(label: str, delta: float) -> float:
    """Planted atrophy-region density offset: CN 0, MCI -delta/2, AD -delta."""
    return -delta * LABEL_INDEX[label] / 2.0


def _subject_rng(spec: PhantomSpec, subject_seed: int, stream: str) -> np.random.Generator:
    tag = sum(ord(c) for c in stream)
    return np.random.default_rng(np.random.SeedSequence((spec.seed, int(subject_seed), tag)))


def _base_scan(spec: PhantomSpec, atlas: Atlas, subject_seed: int, label: str, age: float) -> Volume3D:
    data = np.zeros(spec.raw_dims, dtype=np.float64)
    mask = atlas.mask
    data[mask] = 1.0
    offset = class_offset(label, spec.delta)
    for region in spec.effect_regions:
        data[atlas.region_mask(region)] += offset
    for region in spec.growth_regions:
        data[atlas.region_mask(region)] -= offset  # growth region gains with stage
    if spec.aging_rate:
        data[mask] -= spec.aging_rate * (age - AGE_MIN) / (AGE_MAX - AGE_MIN)
    if spec.noise_std > 0:
        rng = _subject_rng(spec, subject_seed, "noise")
        data[mask] += rng.normal(0.0, spec.noise_std, size=int(mask.sum()))
    return Volume3D(data, atlas.spacing_mm)


def draw_age(spec: PhantomSpec, subject_seed: int, label: str) -> float:
    lo, hi = AGE_RANGES[label]
    rng = _subject_rng(spec, subject_seed, "age")
    return float(rng.uniform(lo, hi))


def make_subject(spec: PhantomSpec, atlas: Atlas, subject_seed: int, label: str,
                 age: float | None = None) -> LabeledScan:
    """Deterministic phantom scan for one subject.

    The noise field and age stream depend only on (spec, subject_seed), so
    scans of the same subject under different labels share their anatomy.
    """
    if label not in LABELS:
        raise ValueError(f"unknown label {label}")
    if age is None:
        age = draw_age(spec, subject_seed, label)
    vol = _base_scan(spec, atlas, subject_seed, label, age)
    return LabeledScan(volume=vol, subject_id=f"s{subject_seed:04d}", label=label, age=age)


def make_longitudinal_pair(spec: PhantomSpec, atlas: Atlas, subject_seed: int,
                           label_from: str, label_to: str) -> tuple[LabeledScan, LabeledScan]:
    """Two scans of the same subject at two clinical stages.

    Anatomy, age, and the noise field are shared; only the planted class
    offsets differ.
    """
    if label_from == label_to:
        raise ValueError("longitudinal pair needs two different stages")
    age = draw_age(spec, subject_seed, label_from)
    baseline = make_subject(spec, atlas, subject_seed, label_from, age)
    target = make_subject(spec, atlas, subject_seed, label_to, age)
    return baseline, target


def pseudo_ground_truth_map(pair: tuple[LabeledScan, LabeledScan]) -> Volume3D:
    """Observed progression map: target scan minus baseline scan."""
    baseline, target = pair
    if baseline.volume.dims != target.volume.dims:
        raise ShapeMismatch("longitudinal scans have different dims")
    return baseline.volume.with_data(target.volume.data - baseline.volume.data)


def scenario_labels(scenario: str) -> tuple:
    table = {
        "cn-mci": ("CN", "MCI"),
        "mci-ad": ("MCI", "AD"),
        "cn-ad": ("CN", "AD"),
        "cn-mci-ad": ("CN", "MCI", "AD"),
    }
    if scenario not in table:
        raise ValueError(f"unknown scenario {scenario}")
    return table[scenario]


def build_cohort(spec: PhantomSpec, atlas: Atlas, labels: tuple, n_per_class: int,
                 splits=(0.6, 0.2, 0.2), confound: dict | None = None) -> list:
    """Generate a labelled cohort with stratified train/val/test splits.

    ``confound`` optionally under-samples one (label, age band) stratum:
    {"label": "CN", "band": (80, 95), "keep": 0.2}. Kept subjects are chosen
    deterministically; dropped ones are replaced by re-drawing the subject
    at an age outside the starved band so class counts stay balanced.
    """
    if n_per_class < 3:
        raise EmptyClass("need at least 3 subjects per class for train/val/test")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 977)))
    scans = []
    seed_counter = 0
    for label in labels:
        for _ in range(n_per_class):
            scan = make_subject(spec, atlas, seed_counter, label)
            if confound and label == confound["label"]:
                lo, hi = confound["band"]
                if lo <= scan.age < hi and rng.random() > confound["keep"]:
                    # resample age outside the starved band, same anatomy
                    a_lo, a_hi = AGE_RANGES[label]
                    new_age = float(rng.uniform(a_lo, min(lo, a_hi)))
                    scan = make_subject(spec, atlas, seed_counter, label, age=new_age)
            scans.append(scan)
            seed_counter += 1
    # stratified splits, deterministic per spec seed
    split_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1901)))
    assignments = {}
    for label in labels:
        ids = [s.subject_id for s in scans if s.label == label]
        order = split_rng.permutation(len(ids))
        n_train = max(1, int(round(splits[0] * len(ids))))
        n_val = max(1, int(round(splits[1] * len(ids))))
        n_val = min(n_val, len(ids) - n_train - 1)
        for rank, idx in enumerate(order):
            if rank < n_train:
                part = "train"
            elif rank < n_train + n_val:
                part = "val"
            else:
                part = "test"
            assignments[ids[idx]] = part
    return [(scan, assignments[scan.subject_id]) for scan in scans]
