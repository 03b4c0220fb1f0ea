import numpy as np
import pytest

from cfquant.errors import ClassTooSmall, ConstantInput, LeakageGuard, SingleClass
from cfquant.metrics import (
    MetricsReport,
    auc_from_scores,
    binary_metrics,
    kfold_run,
    macro_ovr_auc,
    make_fold_plan,
    ncc,
    ncc_directional,
)


def pairwise_auc_oracle(scores, labels):
    """Mann-Whitney: fraction of positive/negative pairs won, ties half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert auc_from_scores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_inverted_ranking(self):
        assert auc_from_scores([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_hand_case(self):
        # wins 3 of 4 positive-negative pairs
        assert auc_from_scores([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_single_class_raises(self):
        with pytest.raises(SingleClass):
            auc_from_scores([0.1, 0.2], [1, 1])

    def test_mann_whitney_identity(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            n = rng.integers(4, 100)
            scores = np.round(rng.random(n), 2)  # force ties
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert auc_from_scores(scores, labels) == pytest.approx(
                pairwise_auc_oracle(scores, labels), abs=1e-12)

    def test_macro_ovr(self):
        probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8],
                          [0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]])
        labels = np.array([0, 1, 2, 0, 1, 2])
        assert macro_ovr_auc(probs, labels) == 1.0


class TestBinaryMetrics:
    def test_confusion_fields(self):
        scores = np.array([0.9, 0.8, 0.3, 0.2, 0.6])
        labels = np.array([1, 1, 0, 0, 0])
        rep = binary_metrics(scores, labels)
        assert rep.sensitivity == 1.0
        assert rep.specificity == pytest.approx(2 / 3)
        assert rep.precision == pytest.approx(2 / 3)
        assert rep.recall == 1.0
        assert rep.accuracy == pytest.approx(0.8)

    def test_all_fields_in_unit_interval(self):
        rng = np.random.default_rng(1)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        rep = binary_metrics(scores, labels)
        for name in MetricsReport.FIELDS:
            assert 0.0 <= getattr(rep, name) <= 1.0


class TestNcc:
    def test_self_is_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 4, 4))
        assert ncc(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_negation_is_minus_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 4, 4))
        assert ncc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 4, 4))
        assert ncc(3.0 * x + 2.0, x) == pytest.approx(1.0, abs=1e-12)
        assert ncc(x, 0.5 * x - 7.0) == pytest.approx(1.0, abs=1e-12)

    def test_constant_raises(self):
        with pytest.raises(ConstantInput):
            ncc(np.zeros((2, 2, 2)), np.ones((2, 2, 2)) * np.arange(8).reshape(2, 2, 2))

    def test_directional_split(self):
        rng = np.random.default_rng(5)
        gt = rng.normal(size=(3, 3, 3))
        entries = [
            ("CN", "AD", gt.copy(), gt.copy()),          # forward: "-" group
            ("AD", "CN", -gt.copy(), gt.copy()),         # reverse: "+" group
        ]
        out = ncc_directional(entries)
        assert out["ncc-"][0] == pytest.approx(1.0)
        assert out["ncc+"][0] == pytest.approx(-1.0)
        assert out["ncc-"][2] == 1 and out["ncc+"][2] == 1

    def test_random_map_scores_low(self):
        rng = np.random.default_rng(6)
        structured = np.zeros((6, 6, 6))
        structured[2:4, 2:4, 2:4] = 1.0
        scores = [ncc(rng.normal(size=(6, 6, 6)), structured) for _ in range(200)]
        assert np.quantile(np.abs(scores), 0.95) < 0.2


class TestFolds:
    def test_partition_and_stratification(self):
        ids = [f"s{i}" for i in range(20)]
        labels = ["A"] * 10 + ["B"] * 10
        plan = make_fold_plan(ids, labels, k=5, seed=3)
        all_ids = [s for fold in plan.folds for s in fold]
        assert sorted(all_ids) == sorted(ids)
        for fold in plan.folds:
            fold_labels = [labels[ids.index(s)] for s in fold]
            assert fold_labels.count("A") == 2 and fold_labels.count("B") == 2

    def test_same_seed_same_folds(self):
        ids = [f"s{i}" for i in range(15)]
        labels = ["A", "B", "C"] * 5
        p1 = make_fold_plan(ids, labels, k=3, seed=9)
        p2 = make_fold_plan(ids, labels, k=3, seed=9)
        assert p1.folds == p2.folds

    def test_class_too_small(self):
        with pytest.raises(ClassTooSmall):
            make_fold_plan(["a", "b", "c"], ["A", "A", "B"], k=2, seed=0)

    def test_leakage_guard_trips(self):
        ids = [f"s{i}" for i in range(10)]
        labels = ["A"] * 5 + ["B"] * 5
        plan = make_fold_plan(ids, labels, k=2, seed=0)

        def leaky(fold, train_ids, test_ids):
            return None, {"query_ids": list(test_ids)[:1], "train_ids": train_ids}

        with pytest.raises(LeakageGuard):
            kfold_run(plan, leaky)

    def test_clean_pipeline_passes(self):
        ids = [f"s{i}" for i in range(10)]
        labels = ["A"] * 5 + ["B"] * 5
        plan = make_fold_plan(ids, labels, k=2, seed=0)

        def clean(fold, train_ids, test_ids):
            return fold, {"query_ids": train_ids, "train_ids": train_ids}

        results = kfold_run(plan, clean)
        assert [r for r, _ in results] == [0, 1]
