"""Counterfactual-guided attention linear classifier.

The query is the fixed effect-ROI vector; key and value are each subject's
ROI vector. Because Q, K, V are rank-one embeddings of those vectors, the
whole attention block collapses algebraically to an R x R matrix acting on
the subject vector (the linear rewriting): with row-softmax weights
W(x_q, x_s) and the channel mean of the value embedding mv,

    channel_mean(attention(Q, K, V)) == mv * W @ x_s  ==  CA @ x_s.

``forward`` evaluates the full R x D route; ``linear_form`` exports the
input-conditioned CA with the head constants, and training uses the
collapsed route (same function, exact gradients). The per-ROI vector
CA @ x_s is the relatedness index reported per subject or group.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import LeakageGuard, ShapeMismatch

DEF_EMBED_DIM = 512


@dataclass
class LiCoLParams:
    """Three 1 x D embeddings plus the class head."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    head_w: np.ndarray            # (n_classes, R)
    head_b: np.ndarray            # (n_classes,)

    @property
    def embed_dim(self) -> int:
        return self.w_q.size

    @property
    def n_regions(self) -> int:
        return self.head_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    def attention_core_param_count(self) -> int:
        """Trainable size of the attention core: the three embeddings."""
        return self.w_q.size + self.w_k.size + self.w_v.size

    def copy(self) -> "LiCoLParams":
        return LiCoLParams(self.w_q.copy(), self.w_k.copy(), self.w_v.copy(),
                           self.head_w.copy(), self.head_b.copy())


def init_params(n_regions: int, n_classes: int, embed_dim: int = DEF_EMBED_DIM,
                seed: int = 0) -> LiCoLParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 606)))
    bound = 1.0 / np.sqrt(embed_dim)
    return LiCoLParams(
        w_q=rng.uniform(-bound, bound, embed_dim),
        w_k=rng.uniform(-bound, bound, embed_dim),
        w_v=rng.uniform(-bound, bound, embed_dim),
        head_w=np.zeros((n_classes, n_regions)),
        head_b=np.zeros(n_classes),
    )


def embed(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Rank-one embedding: outer product of the ROI vector with a 1 x D weight."""
    return np.outer(np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64))


def _row_softmax(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-softmax(Q K^T / sqrt(R)) V with R the key's ROI count."""
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeMismatch("attention operands must share shape")
    r = k.shape[0]
    weights = _row_softmax(q @ k.T / np.sqrt(r))
    return weights @ v


def forward(params: LiCoLParams, x_q: np.ndarray, x_s: np.ndarray) -> np.ndarray:
    """Class probabilities via the full R x D attention route."""
    x_q = np.asarray(x_q, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    if x_q.shape != x_s.shape or x_q.ndim != 1:
        raise ShapeMismatch("query and subject vectors must be equal-length 1-D")
    a = attention(embed(x_q, params.w_q), embed(x_s, params.w_k), embed(x_s, params.w_v))
    z = a.mean(axis=1) + x_q
    logits = params.head_w @ z + params.head_b
    return _row_softmax(logits[None, :])[0]


def attention_weights(params: LiCoLParams, x_q: np.ndarray, x_s: np.ndarray) -> np.ndarray:
    """Collapsed R x R attention weights for one subject vector."""
    r = x_q.size
    c = float(np.dot(params.w_q, params.w_k))
    s = (c / np.sqrt(r)) * np.outer(x_q, x_s)
    return _row_softmax(s)


def linear_form(params: LiCoLParams, x_q: np.ndarray, x_s: np.ndarray):
    """Exact linear rewriting for one input: (CA, c1, c2).

    CA is input-conditioned (the attention weights depend on x_s via the
    key); c2/c1 are the head constants. Satisfies
    forward(params, x_q, x_s) == softmax(c2 @ (CA @ x_s + x_q) + c1).
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    mv = float(np.mean(params.w_v))
    ca = mv * attention_weights(params, x_q, x_s)
    return ca, params.head_b.copy(), params.head_w.copy()


def linear_form_predict(ca: np.ndarray, c1: np.ndarray, c2: np.ndarray,
                        x_q: np.ndarray, x_s: np.ndarray) -> np.ndarray:
    z = ca @ np.asarray(x_s, dtype=np.float64) + np.asarray(x_q, dtype=np.float64)
    logits = c2 @ z + c1
    return _row_softmax(logits[None, :])[0]


def batch_forward(params: LiCoLParams, x_q: np.ndarray, xs: np.ndarray):
    """Collapsed-route forward for a batch. Returns (probs, cache)."""
    n, r = xs.shape
    c = float(np.dot(params.w_q, params.w_k))
    mv = float(np.mean(params.w_v))
    s = (c / np.sqrt(r)) * x_q[None, :, None] * xs[:, None, :]
    w = _row_softmax(s)
    s_vec = np.einsum("nij,nj->ni", w, xs)
    z = mv * s_vec + x_q[None, :]
    logits = z @ params.head_w.T + params.head_b[None, :]
    probs = _row_softmax(logits)
    return probs, (x_q, xs, c, mv, w, s_vec, z, probs)


def batch_backward(params: LiCoLParams, cache, onehot: np.ndarray):
    """Mean cross-entropy gradients for all trainable arrays (exact)."""
    x_q, xs, c, mv, w, s_vec, z, probs = cache
    n, r = xs.shape
    dlogits = (probs - onehot) / n
    g_head_w = dlogits.T @ z
    g_head_b = dlogits.sum(axis=0)
    dz = dlogits @ params.head_w
    dmv = float(np.sum(dz * s_vec))
    ds_vec = mv * dz
    dw = ds_vec[:, :, None] * xs[:, None, :]
    row_dot = np.sum(dw * w, axis=2, keepdims=True)
    dS = (dw - row_dot) * w
    dc = float(np.sum(dS * (x_q[None, :, None] * xs[:, None, :]))) / np.sqrt(r)
    g_w_q = dc * params.w_k
    g_w_k = dc * params.w_q
    g_w_v = np.full(params.w_v.shape, dmv / params.w_v.size)
    return {"w_q": g_w_q, "w_k": g_w_k, "w_v": g_w_v,
            "head_w": g_head_w, "head_b": g_head_b}


def mean_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    picked = np.sum(probs * onehot, axis=1)
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


@dataclass
class LiCoLTrainConfig:
    lr: float = 0.5
    momentum: float = 0.9
    steps: int = 400
    seed: int = 0
    val_frac: float = 0.25
    embed_dim: int = DEF_EMBED_DIM
    eval_every: int = 10


def train_licol(x_q: np.ndarray, rows, n_classes: int, cfg: LiCoLTrainConfig,
                val_rows=None, query_provenance=(), test_ids=()):
    """Gradient-descent training with best-validation-AUC selection.

    ``rows``: (subject_id, class_index, roi_vector) training samples (real
    and counterfactual-derived). The query provenance must not intersect
    the held-out test subjects; that is the leakage guard.
    Returns (params, log_rows).
    """
    from .metrics import auc_from_scores, macro_ovr_auc

    leaked = set(query_provenance) & set(test_ids)
    if leaked:
        raise LeakageGuard(f"effect-ROI query built from test subjects {sorted(leaked)}")
    rows = list(rows)
    if not rows:
        raise ValueError("no training rows")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 505)))
    if val_rows is None:
        by_class = {}
        for row in rows:
            by_class.setdefault(row[1], []).append(row)
        train_rows, val_rows = [], []
        for cls_rows in by_class.values():
            order = rng.permutation(len(cls_rows))
            n_val = max(1, int(round(cfg.val_frac * len(cls_rows))))
            n_val = min(n_val, len(cls_rows) - 1)
            for rank, idx in enumerate(order):
                (val_rows if rank < n_val else train_rows).append(cls_rows[idx])
    else:
        train_rows = rows

    x_q = np.asarray(x_q, dtype=np.float64)
    xs = np.array([r[2] for r in train_rows], dtype=np.float64)
    ys = np.array([r[1] for r in train_rows])
    onehot = np.eye(n_classes)[ys]
    val_xs = np.array([r[2] for r in val_rows], dtype=np.float64)
    val_ys = np.array([r[1] for r in val_rows])

    params = init_params(x_q.size, n_classes, cfg.embed_dim, cfg.seed)
    velocity = {k: 0.0 for k in ("w_q", "w_k", "w_v", "head_w", "head_b")}

    val_onehot = np.eye(n_classes)[val_ys]

    def val_scores():
        """(AUC, -CE): ties in AUC resolve toward the better-calibrated step."""
        probs, _ = batch_forward(params, x_q, val_xs)
        ce = mean_cross_entropy(probs, val_onehot)
        if n_classes == 2:
            return (auc_from_scores(probs[:, 1], val_ys), -ce)
        return (macro_ovr_auc(probs, val_ys), -ce)

    best = ((-1.0, -np.inf), params.copy())
    log_rows = []
    for step in range(1, cfg.steps + 1):
        probs, cache = batch_forward(params, x_q, xs)
        loss = mean_cross_entropy(probs, onehot)
        grads = batch_backward(params, cache, onehot)
        for key, g in grads.items():
            velocity[key] = cfg.momentum * velocity[key] + g
            arr = getattr(params, key)
            arr -= cfg.lr * velocity[key]
        if step % cfg.eval_every == 0 or step == cfg.steps:
            score = val_scores()
            log_rows.append((step, loss, score[0]))
            if score > best[0]:
                best = (score, params.copy())
    return best[1], log_rows


@dataclass
class RelatednessReport:
    """Per-ROI contribution vector CA @ x_s, min-max normalized per report."""

    raw: np.ndarray
    normalized: np.ndarray
    tag: str
    scenario: str
    normalization: str = "min-max"


def _min_max(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def ad_relatedness(params: LiCoLParams, x_q: np.ndarray, subjects, tag: str = "",
                   scenario: str = "") -> RelatednessReport:
    """Relatedness index for one subject vector or the mean over a group.

    ``subjects`` is a single ROI vector or an iterable of them; group mode
    averages the raw per-subject vectors before normalizing.
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    arr = np.asarray(subjects, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    raws = []
    for x_s in arr:
        ca, _, _ = linear_form(params, x_q, x_s)
        raws.append(ca @ x_s)
    raw = np.mean(raws, axis=0)
    return RelatednessReport(raw=raw, normalized=_min_max(raw), tag=tag, scenario=scenario)
