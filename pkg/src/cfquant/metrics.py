"""Metrics, cross-validation, counterfactual NCC scoring, and the
age-stratified augmentation experiment.

AUC is the trapezoidal area under the ROC curve, which coincides exactly
with the Mann-Whitney pairwise win fraction (ties counted half); the test
suite asserts that identity against a brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ClassTooSmall,
    ConstantInput,
    EmptyGroup,
    EmptyStratum,
    LeakageGuard,
    SingleClass,
)
from .phantom import LABEL_INDEX

# ----------------------------------------------------------------- NCC

def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1].

    Invariant to positive affine rescaling of either argument; raises
    ConstantInput when either argument has no variation.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("ncc operands must have equal size")
    az = a - a.mean()
    bz = b - b.mean()
    na = np.linalg.norm(az)
    nb = np.linalg.norm(bz)
    if na == 0 or nb == 0:
        raise ConstantInput("ncc of a constant input is undefined")
    return float(np.dot(az, bz) / (na * nb))


def ncc_directional(entries) -> dict:
    """Split NCC scores by conversion direction.

    ``entries``: (from_label, to_label, cf_map, gt_map) tuples with maps as
    arrays. Scenarios toward a later stage form the "-" group, toward an
    earlier stage the "+" group. Returns per-group (mean, std, n) plus the
    overall mean.
    """
    if not entries:
        raise EmptyGroup("no matched counterfactual/ground-truth pairs")
    plus, minus, all_scores = [], [], []
    for from_label, to_label, cf_map, gt_map in entries:
        score = ncc(cf_map, gt_map)
        all_scores.append(score)
        if LABEL_INDEX[to_label] > LABEL_INDEX[from_label]:
            minus.append(score)
        else:
            plus.append(score)

    def summary(scores):
        if not scores:
            return (float("nan"), float("nan"), 0)
        return (float(np.mean(scores)), float(np.std(scores)), len(scores))

    return {"ncc+": summary(plus), "ncc-": summary(minus), "all": summary(all_scores)}


# ------------------------------------------------------------- ROC/AUC

def auc_from_scores(scores, labels) -> float:
    """Trapezoidal ROC AUC; labels are 0/1 with 1 the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels == 1)
    fps = np.cumsum(sorted_labels == 0)
    distinct = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    return float(np.trapezoid(tpr, fpr))


def macro_ovr_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of one-vs-rest AUCs (the multi-class convention)."""
    classes = np.unique(labels)
    aucs = [auc_from_scores(probs[:, c], (labels == c).astype(int)) for c in classes]
    return float(np.mean(aucs))


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float

    def as_row(self):
        return [self.auc, self.accuracy, self.sensitivity, self.specificity,
                self.precision, self.recall]

    FIELDS = ("auc", "accuracy", "sensitivity", "specificity", "precision", "recall")


def confusion_counts(pred: np.ndarray, labels: np.ndarray) -> tuple:
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    return tp, fp, tn, fn


def binary_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion metrics at the argmax threshold plus ROC AUC.

    ``scores`` are positive-class probabilities; the positive class is the
    later disease stage. Empty denominators yield 0.0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = (scores >= threshold).astype(int)
    tp, fp, tn, fn = confusion_counts(pred, labels)
    total = tp + fp + tn + fn

    def ratio(num, den):
        return num / den if den else 0.0

    return MetricsReport(
        auc=auc_from_scores(scores, labels),
        accuracy=ratio(tp + tn, total),
        sensitivity=ratio(tp, tp + fn),
        specificity=ratio(tn, tn + fp),
        precision=ratio(tp, tp + fp),
        recall=ratio(tp, tp + fn),
    )


def aggregate_reports(reports: list) -> dict:
    """Per-metric (mean, std) across folds."""
    out = {}
    for name in MetricsReport.FIELDS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(values.mean()), float(values.std()))
    return out


# ------------------------------------------------------ cross-validation

@dataclass(frozen=True)
class FoldPlan:
    """Stratified partition of subject ids into k folds."""

    folds: tuple          # tuple of tuples of subject ids
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> tuple:
        test = set(self.folds[i])
        train = [s for j, fold in enumerate(self.folds) if j != i for s in fold]
        return train, sorted(test)


def make_fold_plan(subject_ids, labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deal each class round-robin into k folds after a seeded shuffle."""
    if k < 2:
        raise ValueError("k must be >= 2")
    subject_ids = list(subject_ids)
    labels = list(labels)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4242)))
    folds = [[] for _ in range(k)]
    for cls in sorted(set(labels)):
        ids = [s for s, y in zip(subject_ids, labels) if y == cls]
        if len(ids) < k:
            raise ClassTooSmall(f"class {cls} has {len(ids)} subjects for {k} folds")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        for rank, sid in enumerate(ids):
            folds[rank % k].append(sid)
    return FoldPlan(folds=tuple(tuple(f) for f in folds), seed=seed)


def kfold_run(plan: FoldPlan, pipeline) -> list:
    """Run ``pipeline(fold_index, train_ids, test_ids)`` on every fold.

    The pipeline returns (report, provenance); provenance must carry the
    subject ids behind every training-side artifact (query construction and
    training samples). Any overlap with the fold's test ids raises
    LeakageGuard.
    """
    results = []
    for i in range(plan.k):
        train_ids, test_ids = plan.split(i)
        report, provenance = pipeline(i, list(train_ids), list(test_ids))
        leaked = set()
        for key in ("query_ids", "train_ids"):
            leaked |= set(provenance.get(key, ())) & set(test_ids)
        if leaked:
            raise LeakageGuard(f"fold {i}: training-side artifacts depend on test subjects {sorted(leaked)}")
        results.append((report, provenance))
    return results


# ------------------------------------------------- reference classifier

def train_logistic_regression(xs: np.ndarray, ys: np.ndarray, n_classes: int,
                              lr: float = 0.5, steps: int = 400, seed: int = 0):
    """Multinomial logistic regression by full-batch gradient descent."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 55)))
    n, d = xs.shape
    w = rng.uniform(-0.01, 0.01, size=(n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[ys]
    for _ in range(steps):
        logits = xs @ w.T + b
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        gl = (probs - onehot) / n
        w -= lr * (gl.T @ xs)
        b -= lr * gl.sum(axis=0)
    return w, b


def logistic_regression_predict(wb, xs: np.ndarray) -> np.ndarray:
    w, b = wb
    logits = xs @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    return probs / probs.sum(axis=1, keepdims=True)


# -------------------------------------- age-stratified augmentation study

@dataclass
class StudyRow:
    seed: int
    stratum: str
    n_test: int
    precision_base: float
    recall_base: float
    precision_aug: float
    recall_aug: float


def _stratum_name(band) -> str:
    return f"{int(band[0])}-{int(band[1])}"


def age_stratified_augmentation_study(real_rows, cf_rows, x_query, n_classes: int,
                                      strata, seeds, licol_fn, test_frac: float = 0.35) -> list:
    """Train the ROI classifier with and without counterfactual augmentation.

    ``real_rows``: (subject_id, age, class_index, roi_vector) per real subject;
    ``cf_rows``: same shape for counterfactual-derived vectors (class index is
    the counterfactual target). ``licol_fn(train_xs, train_ys, seed)`` returns
    a ``predict(xs) -> probs`` closure. Positive class = last class index.
    Returns one StudyRow per (seed, stratum) plus per-seed overall accuracy
    rows appended as ("overall", acc_base, acc_aug) in the row's precision
    slots with recall fields unused.
    """
    if not real_rows:
        raise EmptyGroup("no real subjects supplied")
    for band in strata:
        if not any(band[0] <= age < band[1] for _, age, _, _ in real_rows):
            raise EmptyStratum(f"no subjects in age band {band}")
    pos = n_classes - 1
    cf_by_subject = {}
    for sid, age, y, vec in cf_rows:
        cf_by_subject.setdefault(sid, []).append((sid, age, y, vec))

    out = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 9090)))
        by_class = {}
        for row in real_rows:
            by_class.setdefault(row[2], []).append(row)
        train_rows, test_rows = [], []
        for cls_rows in by_class.values():
            order = rng.permutation(len(cls_rows))
            n_test = max(1, int(round(test_frac * len(cls_rows))))
            for rank, idx in enumerate(order):
                (test_rows if rank < n_test else train_rows).append(cls_rows[idx])

        def fit(with_cf: bool):
            rows = list(train_rows)
            if with_cf:
                for sid, _, _, _ in train_rows:
                    rows.extend(cf_by_subject.get(sid, ()))
            xs = np.array([r[3] for r in rows], dtype=np.float64)
            ys = np.array([r[2] for r in rows])
            return licol_fn(xs, ys, seed)

        predict_base = fit(False)
        predict_aug = fit(True)
        test_xs = np.array([r[3] for r in test_rows], dtype=np.float64)
        test_ys = np.array([r[2] for r in test_rows])
        test_ages = np.array([r[1] for r in test_rows])
        probs_base = predict_base(test_xs)
        probs_aug = predict_aug(test_xs)
        pred_base = probs_base.argmax(axis=1)
        pred_aug = probs_aug.argmax(axis=1)

        for band in strata:
            sel = (test_ages >= band[0]) & (test_ages < band[1])
            if not sel.any():
                out.append(StudyRow(seed, _stratum_name(band), 0,
                                    float("nan"), float("nan"), float("nan"), float("nan")))
                continue

            def prec_rec(pred):
                tp = int(((pred[sel] == pos) & (test_ys[sel] == pos)).sum())
                fp = int(((pred[sel] == pos) & (test_ys[sel] != pos)).sum())
                fn = int(((pred[sel] != pos) & (test_ys[sel] == pos)).sum())
                precision = tp / (tp + fp) if tp + fp else 1.0
                recall = tp / (tp + fn) if tp + fn else 1.0
                return precision, recall

            pb, rb = prec_rec(pred_base)
            pa, ra = prec_rec(pred_aug)
            out.append(StudyRow(seed, _stratum_name(band), int(sel.sum()), pb, rb, pa, ra))
        acc_base = float((pred_base == test_ys).mean())
        acc_aug = float((pred_aug == test_ys).mean())
        out.append(StudyRow(seed, "overall", len(test_rows), acc_base, float("nan"),
                            acc_aug, float("nan")))
    return out
