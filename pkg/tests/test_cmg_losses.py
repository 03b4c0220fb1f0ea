import numpy as np
import pytest

from cfquant import nn
from cfquant.classifier import Classifier
from cfquant.cmg import (
    CmgModel,
    CounterfactualRecord,
    LossWeights,
    fuse_target_tile,
    gen_counterfactual_record,
    loss_adv_d,
    loss_adv_g,
    loss_cyc,
    loss_map,
    loss_tv,
    map_grad,
    synthesize,
    tv_grad,
)
from cfquant.errors import NotPretrained, ShapeMismatch


class TestAdversarialClosedForms:
    def test_perfect_discriminator(self):
        assert loss_adv_d([1.0], [0.0], [0.0]) == 0.0

    def test_all_zero_outputs(self):
        assert loss_adv_d([0.0], [0.0], [0.0]) == pytest.approx(1.0, abs=1e-12)

    def test_all_one_outputs(self):
        assert loss_adv_d([1.0], [1.0], [1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_generator_fooled(self):
        assert loss_adv_g([1.0], [1.0]) == 0.0

    def test_generator_rejected(self):
        assert loss_adv_g([0.0], [0.0]) == pytest.approx(1.0, abs=1e-12)

    def test_generator_half(self):
        assert loss_adv_g([1.0], [0.0]) == pytest.approx(0.5, abs=1e-12)

    def test_batch_expectation(self):
        # E over the batch, not a sum
        assert loss_adv_d([1.0, 0.0], [0.0, 0.0], [0.0, 0.0]) == pytest.approx(0.5)


class TestCycleLoss:
    def test_exact_reconstruction(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4, 4))
        assert loss_cyc(x, x.copy()) == 0.0

    def test_constant_offset_mean_convention(self):
        x = np.zeros((1, 4, 4, 4))
        assert loss_cyc(x + 0.5, x) == pytest.approx(0.5, abs=1e-12)

    def test_sign_symmetric(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 3, 3))
        err = rng.normal(size=(1, 3, 3, 3))
        assert loss_cyc(x + err, x) == pytest.approx(loss_cyc(x - err, x), abs=1e-12)


class TestTvLoss:
    def test_constant_is_zero(self):
        assert loss_tv(np.full((1, 4, 4, 4), 3.0)) == 0.0

    def test_single_difference(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 1, 0, 0] = 1.0
        assert loss_tv(x) == pytest.approx(1.0)

    def test_checkerboard_2x2x2(self):
        x = np.zeros((1, 2, 2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    x[0, i, j, k] = (i + j + k) % 2
        # 12 adjacent pairs, each |1|
        assert loss_tv(x) == pytest.approx(12.0)

    def test_grad_matches_fd_away_from_kinks(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 3, 3))

        def f():
            return loss_tv(x)

        g = tv_grad(x)
        assert nn.grad_check(f, {"x": x}, {"x": g}, eps=1e-7) < 1e-5


class TestMapLoss:
    def test_zero_map(self):
        assert loss_map(np.zeros((1, 2, 2, 2)), 1.0, 1.0) == 0.0

    def test_single_voxel(self):
        m = np.zeros((1, 2, 2, 2))
        m[0, 0, 0, 0] = 2.0
        assert loss_map(m, 1.0, 1.0) == pytest.approx(4.0, abs=1e-12)

    def test_three_four_five(self):
        m = np.zeros((1, 2, 1, 1))
        m[0, 0, 0, 0] = 3.0
        m[0, 1, 0, 0] = 4.0
        assert loss_map(m, 1.0, 1.0) == pytest.approx(12.0, abs=1e-12)

    def test_squared_variant(self):
        m = np.zeros((1, 2, 1, 1))
        m[0, 0, 0, 0] = 3.0
        m[0, 1, 0, 0] = 4.0
        assert loss_map(m, 1.0, 1.0, squared=True) == pytest.approx(7.0 + 25.0)

    def test_grad(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(1, 3, 3, 3))

        def f():
            return loss_map(m, 0.7, 1.3)

        g = map_grad(m, 0.7, 1.3)
        assert nn.grad_check(f, {"m": m}, {"m": g}, eps=1e-7) < 1e-5


class TestSynthesize:
    def test_zero_map_identity(self):
        x = np.random.default_rng(4).normal(size=(1, 3, 3, 3))
        assert np.array_equal(synthesize(x, np.zeros_like(x)), x)

    def test_additive_inverse(self):
        x = np.random.default_rng(5).normal(size=(1, 3, 3, 3))
        assert np.all(synthesize(x, -x) == 0.0)

    def test_dims_mismatch(self):
        with pytest.raises(ShapeMismatch):
            synthesize(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 2, 2)))


class TestFusion:
    def test_tile_is_spatially_constant(self):
        tile = fuse_target_tile(np.array([0.0, 1.0]), (4, 5, 6), np.float32)
        assert tile.shape == (2, 4, 5, 6)
        assert np.all(tile[0] == 0.0) and np.all(tile[1] == 1.0)

    def test_fusion_input_channels(self):
        clf = Classifier(2, (16, 16, 16), seed=0)
        clf.trained = True
        model = CmgModel(clf, seed=1)
        for level, c_out in enumerate(model.fusion_channels, start=1):
            w = model.store[f"fus{level}_w"]
            assert w.shape[1] == clf.channels[level - 1] + 2

    def test_different_targets_change_fused_features(self):
        rng = np.random.default_rng(6)
        clf = Classifier(2, (16, 16, 16), seed=0)
        clf.trained = True
        model = CmgModel(clf, seed=1)
        feat = rng.normal(size=(8, 8, 8, 8)).astype(np.float32)
        f0, _ = model.fuse_target(feat, np.array([1.0, 0.0], dtype=np.float32), 1)
        f1, _ = model.fuse_target(feat, np.array([0.0, 1.0], dtype=np.float32), 1)
        assert np.abs(f0 - f1).max() > 0.0


class TestGeneratorContracts:
    @pytest.fixture(scope="class")
    def setup(self):
        rng = np.random.default_rng(7)
        clf = Classifier(2, (16, 16, 16), seed=0)
        # give the head some signal so predictions are not uniform
        clf.store["head_w"][...] = rng.normal(0, 0.3, clf.store["head_w"].shape).astype(np.float32)
        clf.trained = True
        model = CmgModel(clf, seed=1)
        # nonzero map head so generated maps are not all zero
        model.store["out_w"][...] = rng.normal(0, 0.05, model.store["out_w"].shape).astype(np.float32)
        x = rng.normal(size=(1, 16, 16, 16)).astype(np.float32)
        return clf, model, x

    def test_map_dims_match_input(self, setup):
        clf, model, x = setup
        m, _ = model.generate(x, np.array([0.0, 1.0], dtype=np.float32))
        assert m.shape == x.shape

    def test_deterministic(self, setup):
        clf, model, x = setup
        t = np.array([0.0, 1.0], dtype=np.float32)
        m1, _ = model.generate(x, t)
        m2, _ = model.generate(x, t)
        assert np.array_equal(m1, m2)

    def test_target_conditioning_changes_map(self, setup):
        clf, model, x = setup
        m0, _ = model.generate(x, np.array([1.0, 0.0], dtype=np.float32))
        m1, _ = model.generate(x, np.array([0.0, 1.0], dtype=np.float32))
        assert np.abs(m0 - m1).max() > 0.0

    def test_record_invariants_bitwise(self, setup):
        clf, model, x = setup
        record = gen_counterfactual_record(model, clf, x, np.array([0.0, 1.0], dtype=np.float32),
                                           subject_id="s1", source_label_index=0)
        record.check_invariants()
        assert np.array_equal(record.x_cf, record.x_real + record.cf_map)
        assert np.array_equal(record.x_recon, record.x_cf + record.override_map)
        assert record.x_recon.shape == x.shape
        assert 0.0 <= record.re_confidence <= 1.0

    def test_not_pretrained_rejected(self):
        from cfquant.cmg import CmgTrainConfig, train_cmg
        clf = Classifier(2, (16, 16, 16), seed=0)   # trained flag unset
        with pytest.raises(NotPretrained):
            train_cmg(clf, [], LossWeights(), CmgTrainConfig())


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(lam1=-0.1)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LossWeights(lam5=float("inf"))

    def test_as_dict_roundtrip(self):
        w = LossWeights(lam1=0.5)
        assert w.as_dict()["lam1"] == 0.5
        assert set(w.as_dict()) == {f"lam{i}" for i in range(1, 8)}
