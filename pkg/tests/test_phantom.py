import numpy as np
import pytest

from cfquant.errors import TooManyRegions
from cfquant.phantom import (
    AGE_RANGES,
    Atlas,
    LABELS,
    PhantomSpec,
    build_cohort,
    class_offset,
    make_atlas,
    make_longitudinal_pair,
    make_subject,
    pseudo_ground_truth_map,
    resample_labels_nearest,
    scenario_labels,
)

SMALL = PhantomSpec(raw_dims=(20, 20, 20), input_dims=(16, 16, 16), n_regions=8,
                    noise_std=0.0, seed=3)


@pytest.fixture(scope="module")
def atlas():
    return make_atlas(SMALL)


class TestAtlas:
    def test_partition_covers_mask(self, atlas):
        mask = atlas.mask
        union = np.zeros(mask.sum(), dtype=bool)
        flat_mask = mask.ravel(order="F")
        mask_idx = np.flatnonzero(flat_mask)
        seen = np.zeros(mask_idx.size, dtype=int)
        for idx_set in atlas.voxel_index_sets:
            assert np.all(flat_mask[idx_set])
            positions = np.searchsorted(mask_idx, idx_set)
            seen[positions] += 1
        assert np.all(seen == 1)  # disjoint and covering

    def test_two_regions(self):
        spec = PhantomSpec(raw_dims=(16, 16, 16), n_regions=2, seed=0)
        atl = make_atlas(spec)
        assert atl.n_regions == 2
        assert all(len(v) >= 8 for v in atl.voxel_index_sets)

    def test_deterministic(self):
        a1 = make_atlas(SMALL)
        a2 = make_atlas(SMALL)
        assert np.array_equal(a1.labels, a2.labels)

    def test_too_many_regions(self):
        spec = PhantomSpec(raw_dims=(12, 12, 12), n_regions=1000, seed=0)
        with pytest.raises(TooManyRegions):
            make_atlas(spec)

    def test_index_sets_ascending(self, atlas):
        for idx_set in atlas.voxel_index_sets:
            assert np.all(np.diff(idx_set) > 0)

    def test_nearest_resampling_keeps_ids(self, atlas):
        small = resample_labels_nearest(atlas.labels, (10, 10, 10))
        assert small.shape == (10, 10, 10)
        assert set(np.unique(small)) <= set(np.unique(atlas.labels))


class TestSubjects:
    def test_noise_free_cn_means(self, atlas):
        scan = make_subject(SMALL, atlas, 0, "CN", age=70.0)
        for region in SMALL.effect_regions:
            values = scan.volume.data[atlas.region_mask(region)]
            assert np.all(values == 1.0)

    def test_noise_free_ad_offsets(self, atlas):
        spec = SMALL
        scan = make_subject(spec, atlas, 0, "AD", age=70.0)
        for region in spec.effect_regions:
            values = scan.volume.data[atlas.region_mask(region)]
            assert np.allclose(values, 1.0 - spec.delta)
        for region in spec.growth_regions:
            values = scan.volume.data[atlas.region_mask(region)]
            assert np.allclose(values, 1.0 + spec.delta)

    def test_noise_shared_across_labels(self, atlas):
        spec = PhantomSpec(raw_dims=(20, 20, 20), n_regions=8, noise_std=0.05, seed=3)
        cn = make_subject(spec, atlas, 5, "CN", age=70.0)
        ad = make_subject(spec, atlas, 5, "AD", age=70.0)
        diff = ad.volume.data - cn.volume.data
        planted = np.zeros_like(diff, dtype=bool)
        for region in spec.planted_regions:
            planted |= atlas.region_mask(region)
        assert np.allclose(diff[~planted], 0.0)

    def test_different_seeds_differ_but_means_concentrate(self, atlas):
        spec = PhantomSpec(raw_dims=(20, 20, 20), n_regions=8, noise_std=0.05, seed=3)
        s1 = make_subject(spec, atlas, 1, "CN", age=70.0)
        s2 = make_subject(spec, atlas, 2, "CN", age=70.0)
        assert not np.array_equal(s1.volume.data, s2.volume.data)
        for region in spec.effect_regions:
            mask = atlas.region_mask(region)
            n = int(mask.sum())
            bound = 3 * spec.noise_std / np.sqrt(n)
            assert abs(s1.volume.data[mask].mean() - 1.0) < bound * 2
            assert abs(s1.volume.data[mask].mean() - s2.volume.data[mask].mean()) < 2 * bound * 2

    def test_deterministic_per_seed(self, atlas):
        spec = PhantomSpec(raw_dims=(20, 20, 20), n_regions=8, noise_std=0.05, seed=3)
        a = make_subject(spec, atlas, 7, "MCI")
        b = make_subject(spec, atlas, 7, "MCI")
        assert np.array_equal(a.volume.data, b.volume.data)
        assert a.age == b.age

    def test_aging_lowers_density(self, atlas):
        spec = PhantomSpec(raw_dims=(20, 20, 20), n_regions=8, noise_std=0.0,
                           aging_rate=0.2, seed=3)
        young = make_subject(spec, atlas, 0, "CN", age=55.0)
        old = make_subject(spec, atlas, 0, "CN", age=90.0)
        assert old.volume.data[atlas.mask].mean() < young.volume.data[atlas.mask].mean()

    def test_age_bounds_respected(self, atlas):
        for label in LABELS:
            scan = make_subject(SMALL, atlas, 11, label)
            lo, hi = AGE_RANGES[label]
            assert lo <= scan.age <= hi


class TestLongitudinal:
    def test_difference_on_planted_regions_only(self, atlas):
        pair = make_longitudinal_pair(SMALL, atlas, 3, "CN", "AD")
        gt = pseudo_ground_truth_map(pair)
        planted = np.zeros(SMALL.raw_dims, dtype=bool)
        for region in SMALL.planted_regions:
            planted |= atlas.region_mask(region)
        assert np.allclose(gt.data[~planted], 0.0)
        assert np.any(gt.data[planted] != 0.0)

    def test_same_stage_rejected(self, atlas):
        with pytest.raises(ValueError):
            make_longitudinal_pair(SMALL, atlas, 0, "CN", "CN")

    def test_half_step_arithmetic(self, atlas):
        to_ad = pseudo_ground_truth_map(make_longitudinal_pair(SMALL, atlas, 4, "CN", "AD"))
        to_mci = pseudo_ground_truth_map(make_longitudinal_pair(SMALL, atlas, 4, "CN", "MCI"))
        for region in SMALL.effect_regions:
            mask = atlas.region_mask(region)
            assert np.allclose(to_mci.data[mask], to_ad.data[mask] / 2.0)

    def test_antisymmetry(self, atlas):
        fwd = pseudo_ground_truth_map(make_longitudinal_pair(SMALL, atlas, 5, "CN", "AD"))
        rev = pseudo_ground_truth_map(make_longitudinal_pair(SMALL, atlas, 5, "AD", "CN"))
        assert np.allclose(fwd.data, -rev.data)

    def test_baseline_matches_subject(self, atlas):
        spec = PhantomSpec(raw_dims=(20, 20, 20), n_regions=8, noise_std=0.05, seed=3)
        baseline, _ = make_longitudinal_pair(spec, atlas, 9, "CN", "AD")
        scan = make_subject(spec, atlas, 9, "CN", age=baseline.age)
        assert np.array_equal(baseline.volume.data, scan.volume.data)


class TestCohort:
    def test_reproducible(self, atlas):
        a = build_cohort(SMALL, atlas, ("CN", "AD"), 6)
        b = build_cohort(SMALL, atlas, ("CN", "AD"), 6)
        assert [(s.subject_id, s.label, s.age, split) for s, split in a] == \
               [(s.subject_id, s.label, s.age, split) for s, split in b]
        assert all(np.array_equal(x[0].volume.data, y[0].volume.data) for x, y in zip(a, b))

    def test_splits_stratified(self, atlas):
        cohort = build_cohort(SMALL, atlas, ("CN", "MCI", "AD"), 8)
        for label in ("CN", "MCI", "AD"):
            splits = [split for scan, split in cohort if scan.label == label]
            assert splits.count("train") >= 1
            assert splits.count("val") >= 1
            assert splits.count("test") >= 1

    def test_confound_starves_band(self, atlas):
        confound = {"label": "CN", "band": (70.0, 80.0), "keep": 0.0}
        cohort = build_cohort(SMALL, atlas, ("CN", "AD"), 20, confound=confound)
        cn_ages = [scan.age for scan, _ in cohort if scan.label == "CN"]
        assert not any(70.0 <= age < 80.0 for age in cn_ages)
        assert len(cn_ages) == 20

    def test_scenario_labels(self):
        assert scenario_labels("cn-ad") == ("CN", "AD")
        assert scenario_labels("cn-mci-ad") == ("CN", "MCI", "AD")
        with pytest.raises(ValueError):
            scenario_labels("bogus")


def test_class_offsets():
    assert class_offset("CN", 0.3) == 0.0
    assert class_offset("MCI", 0.3) == pytest.approx(-0.15)
    assert class_offset("AD", 0.3) == pytest.approx(-0.3)
