"""Predictive model: three conv stages, global average pool, linear head.

The same stack doubles as the counterfactual generator's frozen encoder and
as the discriminator template (scalar realness head). Stage feature maps
are kept post-activation / pre-pool, which is what the generator's skip
fusion consumes.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import EmptyClass, ShapeMismatch

CHANNELS = (8, 16, 32)
KERNEL = 3
LRELU_SLOPE = 0.2


def init_conv_stack(store: nn.ParamStore, rng: np.random.Generator, in_channels: int = 1,
                    channels=CHANNELS, prefix: str = "enc", frozen: bool = False,
                    dtype=np.float32) -> None:
    c_prev = in_channels
    for i, c_out in enumerate(channels, start=1):
        fan_in = c_prev * KERNEL ** 3
        store.add(f"{prefix}{i}_w", nn.init_uniform(rng, (c_out, c_prev, KERNEL, KERNEL, KERNEL), fan_in, dtype), frozen=frozen)
        store.add(f"{prefix}{i}_b", np.zeros(c_out, dtype=dtype), frozen=frozen)
        c_prev = c_out


def conv_stack_forward(store: nn.ParamStore, x: np.ndarray, channels=CHANNELS, prefix: str = "enc"):
    """Run the encoder stages. Returns (feats, pooled_last, caches).

    feats[l] is the post-LeakyReLU, pre-pool map of stage l+1; pooled_last
    is the final pooled tensor the head consumes.
    """
    feats, caches = [], []
    a = x
    for i in range(1, len(channels) + 1):
        y, c_conv = nn.conv3d(a, store[f"{prefix}{i}_w"], store[f"{prefix}{i}_b"])
        f, c_act = nn.leaky_relu(y, LRELU_SLOPE)
        a, c_pool = nn.downsample_max2(f)
        feats.append(f)
        caches.append((c_conv, c_act, c_pool))
    return feats, a, caches


def conv_stack_backward(store: nn.ParamStore, caches, gfeats=None, g_pooled_last=None,
                        channels=CHANNELS, prefix: str = "enc",
                        want_param_grads: bool = True, want_input_grad: bool = False):
    """Backward through the stages.

    gfeats: optional per-stage gradients arriving directly at feats[l]
    (skip connections); g_pooled_last: gradient at the final pooled output.
    Returns the input gradient when requested.
    """
    n = len(channels)
    g_a = g_pooled_last
    for i in range(n, 0, -1):
        c_conv, c_act, c_pool = caches[i - 1]
        gf = nn.downsample_max2_backward(c_pool, g_a) if g_a is not None else None
        if gfeats is not None and gfeats[i - 1] is not None:
            gf = gfeats[i - 1] if gf is None else gf + gfeats[i - 1]
        gy = nn.leaky_relu_backward(c_act, gf)
        want_input = i > 1 or want_input_grad
        gx, gw, gb = nn.conv3d_backward(c_conv, gy, want_input=want_input,
                                        want_weights=want_param_grads)
        if want_param_grads:
            store.add_grad(f"{prefix}{i}_w", gw)
            store.add_grad(f"{prefix}{i}_b", gb)
        if i == 1 and not want_input_grad:
            return None
        g_a = gx
    return g_a


class Classifier:
    """Conv-stack classifier; also serves as the reasoning evaluator."""

    def __init__(self, n_classes: int, input_dims, seed: int = 0, channels=CHANNELS,
                 front_sigma: float = 2.0):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.input_dims = tuple(input_dims)
        self.channels = tuple(channels)
        # fixed smoothing front end: the decision depends only on smooth
        # regional content, which closes the high-frequency shortcut
        # directions a desk-scale counterfactual search would exploit
        self.front_sigma = float(front_sigma)
        self.front_kernel = nn.smoothing_kernel(self.front_sigma)
        self.trained = False
        self.store = nn.ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
        init_conv_stack(self.store, rng, 1, self.channels)
        # octant pooling keeps coarse localization; zero-init head starts
        # at the uniform prediction
        pooled_dims = tuple(d // 2 ** len(self.channels) for d in self.input_dims)
        head_in = self.channels[-1] * nn.octant_cells(pooled_dims)
        self.store.add("head_w", np.zeros((n_classes, head_in), dtype=np.float32))
        self.store.add("head_b", np.zeros(n_classes, dtype=np.float32))

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (1,) + self.input_dims:
            raise ShapeMismatch(f"expected input (1, {self.input_dims}), got {x.shape}")
        return x

    def smooth_input(self, x: np.ndarray) -> np.ndarray:
        return nn.fixed_smooth3(x, self.front_kernel)

    def forward(self, x: np.ndarray):
        """Returns (logits, cache)."""
        x = self._check_input(x)
        feats, pooled, caches = conv_stack_forward(self.store, self.smooth_input(x), self.channels)
        vec, c_pool = nn.octant_avg_pool(pooled)
        logits, c_lin = nn.linear(vec, self.store["head_w"], self.store["head_b"])
        return logits, (caches, c_pool, c_lin)

    def backward(self, cache, glogits, want_param_grads: bool = True, want_input_grad: bool = False):
        caches, c_pool, c_lin = cache
        gvec, gw, gb = nn.linear_backward(c_lin, glogits)
        if want_param_grads:
            self.store.add_grad("head_w", gw)
            self.store.add_grad("head_b", gb)
        g_pooled = nn.octant_avg_pool_backward(c_pool, gvec)
        gx = conv_stack_backward(self.store, caches, None, g_pooled, self.channels,
                                 want_param_grads=want_param_grads,
                                 want_input_grad=want_input_grad)
        if want_input_grad:
            gx = nn.fixed_smooth3(gx, self.front_kernel)   # self-adjoint front end
        return gx

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities; a pure function of (weights, input)."""
        logits, _ = self.forward(x)
        return nn.softmax(logits)

    def extract_features(self, x: np.ndarray) -> list:
        """Per-stage feature maps for the generator's skip fusion."""
        x = self._check_input(x)
        feats, _, _ = conv_stack_forward(self.store, self.smooth_input(x), self.channels)
        return feats

    def encoder_param_names(self) -> list:
        return [n for n in self.store.names() if n.startswith("enc")]

    def encoder_checksum(self) -> str:
        return self.store.checksum(self.encoder_param_names())


def as_model_input(volume_data: np.ndarray) -> np.ndarray:
    """Add the channel axis and cast to the training dtype."""
    return np.ascontiguousarray(volume_data, dtype=np.float32)[None, ...]


def stratified_order(items, rng: np.random.Generator) -> list:
    """Interleave per-class shuffles so every mini-batch is class-balanced.

    With tiny cohorts, imbalanced batches swamp the between-class gradient
    with class-prior noise; balanced batches remove it.
    """
    by_class = {}
    for idx, item in enumerate(items):
        by_class.setdefault(item[1], []).append(idx)
    streams = [[ids[j] for j in rng.permutation(len(ids))] for ids in by_class.values()]
    order = []
    longest = max(len(s) for s in streams)
    for rank in range(longest):
        for stream in streams:
            if rank < len(stream):
                order.append(stream[rank])
    return order


def train_classifier(train_items, val_items, n_classes: int, input_dims,
                     lr: float = 0.003, momentum: float = 0.9, epochs: int = 30,
                     batch_size: int = 8, seed: int = 0, optimizer: str = "adam",
                     front_sigma: float = 2.0, aug_noise: float = 0.25,
                     aug_shift: float = 0.25, aug_region: float = 0.4,
                     region_masks=None):
    """Mini-batch cross-entropy training; keeps the best-validation-AUC weights.

    ``train_items``/``val_items`` are lists of (x, class_index) with x shaped
    (1, dx, dy, dz). Training applies three invariance augmentations that a
    tiny cohort cannot supply on its own: fresh voxel noise (equivalent to
    drawing new phantom subjects), global intensity shifts, and random
    per-region offsets (``region_masks``: boolean input-grid masks). They
    force the decision onto the stable regional contrasts instead of frozen
    noise texture, which is what makes the later counterfactual search land
    on anatomy rather than adversarial patterns. Returns (classifier,
    log_rows) with rows (epoch, mean train CE, val AUC).
    """
    from .metrics import auc_from_scores, macro_ovr_auc

    present = {y for _, y in train_items}
    missing = set(range(n_classes)) - present
    if missing:
        raise EmptyClass(f"classes {sorted(missing)} absent from the train split")

    model = Classifier(n_classes, input_dims, seed=seed, front_sigma=front_sigma)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 707)))
    eye = np.eye(n_classes, dtype=np.float32)

    def augment(x: np.ndarray) -> np.ndarray:
        out = x
        if aug_noise > 0:
            out = out + rng.normal(0, aug_noise, x.shape).astype(np.float32)
        if aug_shift > 0:
            out = out + np.float32(rng.normal(0, aug_shift))
        if aug_region > 0 and region_masks is not None:
            bump = np.zeros(x.shape[1:], dtype=np.float32)
            offsets = rng.normal(0, aug_region, len(region_masks)).astype(np.float32)
            for mask, c in zip(region_masks, offsets):
                bump[mask] = c
            out = out + bump[None]
        return out

    def val_scores():
        """(AUC, -CE) so ties in AUC resolve toward lower validation loss."""
        if not val_items:
            return (0.0, 0.0)
        probs = np.array([model.predict(x) for x, _ in val_items])
        ys = np.array([y for _, y in val_items])
        ce = float(-np.mean(np.log(np.maximum(probs[np.arange(len(ys)), ys], 1e-300))))
        if n_classes == 2:
            return (auc_from_scores(probs[:, 1], ys), -ce)
        return (macro_ovr_auc(probs, ys), -ce)

    best = ((-1.0, 0.0), None)
    log_rows = []
    for epoch in range(1, epochs + 1):
        order = stratified_order(train_items, rng)
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            model.store.zero_grads()
            for idx in batch:
                x, y = train_items[idx]
                logits, cache = model.forward(augment(x))
                loss, _, c_ce = nn.softmax_ce(logits.astype(np.float64), eye[y].astype(np.float64))
                glog = nn.softmax_ce_backward(c_ce, 1.0 / len(batch)).astype(np.float32)
                model.backward(cache, glog)
                losses.append(loss)
            model.store.optimize(optimizer, lr, momentum)
        score = val_scores()
        log_rows.append((epoch, float(np.mean(losses)), score[0]))
        if val_items and score > best[0]:
            best = (score, {n: model.store[n].copy() for n in model.store.names()})
    if val_items and best[1] is not None:
        model.store.load(best[1])
    model.trained = True
    return model, log_rows
