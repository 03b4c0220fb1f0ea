import numpy as np
import pytest

from cfquant import nn
from cfquant.classifier import Classifier, as_model_input, stratified_order, train_classifier
from cfquant.errors import EmptyClass, ShapeMismatch
from cfquant.phantom import PhantomSpec, make_atlas, make_subject, resample_labels_nearest
from cfquant.volume import resample_trilinear

SPEC = PhantomSpec(raw_dims=(20, 20, 20), input_dims=(16, 16, 16), n_regions=8,
                   noise_std=0.0, seed=11)


def build_items(spec, atlas, labels, n_per_class, start_seed=0):
    items = []
    seed = start_seed
    for label in labels:
        for _ in range(n_per_class):
            scan = make_subject(spec, atlas, seed, label)
            small = resample_trilinear(scan.volume, spec.input_dims)
            items.append((as_model_input(small.data), 0 if label == "CN" else 1))
            seed += 1
    return items


class TestClassifierContracts:
    def test_predict_probabilities(self):
        clf = Classifier(3, (16, 16, 16), seed=0)
        x = np.random.default_rng(0).standard_normal((1, 16, 16, 16)).astype(np.float32)
        probs = clf.predict(x)
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_predict_deterministic(self):
        clf = Classifier(2, (16, 16, 16), seed=0)
        x = np.random.default_rng(1).standard_normal((1, 16, 16, 16)).astype(np.float32)
        assert np.array_equal(clf.predict(x), clf.predict(x))

    def test_dims_checked(self):
        clf = Classifier(2, (16, 16, 16), seed=0)
        with pytest.raises(ShapeMismatch):
            clf.predict(np.zeros((1, 8, 8, 8), dtype=np.float32))

    def test_extract_features_shapes(self):
        clf = Classifier(2, (16, 16, 16), seed=0)
        x = np.random.default_rng(2).standard_normal((1, 16, 16, 16)).astype(np.float32)
        feats = clf.extract_features(x)
        assert len(feats) == 3
        assert feats[0].shape == (8, 16, 16, 16)
        assert feats[1].shape == (16, 8, 8, 8)
        assert feats[2].shape == (32, 4, 4, 4)
        assert np.array_equal(feats[0], clf.extract_features(x)[0])

    def test_empty_class_raises(self):
        items = [(np.zeros((1, 16, 16, 16), dtype=np.float32), 0)] * 4
        with pytest.raises(EmptyClass):
            train_classifier(items, None, 2, (16, 16, 16), epochs=1)

    def test_stratified_order_balances_batches(self):
        items = [(None, i % 3) for i in range(30)]
        order = stratified_order(items, np.random.default_rng(0))
        first_batch = [items[i][1] for i in order[:6]]
        assert sorted(first_batch) == [0, 0, 1, 1, 2, 2]


@pytest.mark.slow
class TestTraining:
    def test_separable_phantoms_reach_full_accuracy(self):
        atlas = make_atlas(SPEC)
        items = build_items(SPEC, atlas, ("CN", "AD"), 6)
        masks = resample_labels_nearest(atlas.labels, SPEC.input_dims)
        region_masks = [masks == r for r in range(1, atlas.n_regions + 1)]
        clf, log = train_classifier(items, None, 2, SPEC.input_dims, epochs=20,
                                    seed=0, region_masks=region_masks)
        acc = np.mean([np.argmax(clf.predict(x)) == y for x, y in items])
        assert acc == 1.0
        assert len(log) == 20

    def test_single_batch_overfit_descends(self):
        atlas = make_atlas(SPEC)
        items = build_items(SPEC, atlas, ("CN", "AD"), 2)
        clf = Classifier(2, SPEC.input_dims, seed=1)
        eye = np.eye(2, dtype=np.float32)
        losses = []
        for _ in range(10):
            clf.store.zero_grads()
            total = 0.0
            for x, y in items:
                logits, cache = clf.forward(x)
                loss, _, cce = nn.softmax_ce(logits.astype(np.float64), eye[y].astype(np.float64))
                clf.backward(cache, nn.softmax_ce_backward(cce, 1.0 / len(items)).astype(np.float32))
                total += loss / len(items)
            losses.append(total)
            clf.store.step_adam(0.002)
        # small steps on a smooth objective: monotone descent
        assert all(b < a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_best_val_selection_and_frozen_reload(self):
        atlas = make_atlas(SPEC)
        items = build_items(SPEC, atlas, ("CN", "AD"), 6)
        val = items[::3]
        train = [it for i, it in enumerate(items) if i % 3]
        clf, log = train_classifier(train, val, 2, SPEC.input_dims, epochs=12, seed=0)
        assert clf.trained
        checksum = clf.encoder_checksum()
        assert clf.encoder_checksum() == checksum
