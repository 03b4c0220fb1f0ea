"""Counterfactual map generator: frozen encoder, target fusion, decoder,
discriminator, and the adversarial/cycle/tv/magnitude/classification losses.

The generator never owns encoder weights: they are copied from the
pre-trained classifier and frozen, so the class-relevant features feeding
the skip fusion stay fixed while fusion and decoder learn. Counterfactual
synthesis is exact voxelwise addition, so record invariants
(xc = x + m, recon = xc + override) hold bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .classifier import (
    CHANNELS,
    KERNEL,
    LRELU_SLOPE,
    Classifier,
    conv_stack_backward,
    conv_stack_forward,
    init_conv_stack,
    stratified_order,
)
from .errors import NotPretrained, ShapeMismatch

FUSION_CHANNELS = (4, 8, 16)
DECODER_CHANNELS = (8, 4)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator objective; all finite, >= 0.

    Defaults were set by balancing per-loss generator gradient norms on the
    synthetic fixture (the per-epoch gradient report is the tuning tool).
    """

    lam1: float = 2.0     # cf-map l1 magnitude
    lam2: float = 2.0     # cf-map l2 magnitude
    lam3: float = 0.5     # generator adversarial
    lam4: float = 0.5     # discriminator adversarial
    lam5: float = 1.0     # cycle consistency
    lam6: float = 10.0    # target classification through the evaluator
    lam7: float = 0.5     # total variation (per-voxel mean convention)

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3", "lam4", "lam5", "lam6", "lam7"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("lam1", "lam2", "lam3", "lam4", "lam5", "lam6", "lam7")}


# ------------------------------------------------------------- losses

def loss_adv_d(d_real, d_fake, d_recon) -> float:
    """Least-squares discriminator loss (real -> 1, both synthetics -> 0)."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    d_recon = np.asarray(d_recon, dtype=np.float64)
    return float(np.mean((d_real - 1.0) ** 2) + 0.5 * np.mean(d_fake ** 2 + d_recon ** 2))


def loss_adv_g(d_fake, d_recon) -> float:
    """Least-squares generator loss (both synthetics -> 1)."""
    d_fake = np.asarray(d_fake, dtype=np.float64)
    d_recon = np.asarray(d_recon, dtype=np.float64)
    return float(0.5 * np.mean((d_fake - 1.0) ** 2 + (d_recon - 1.0) ** 2))


def loss_cyc(recon: np.ndarray, x: np.ndarray) -> float:
    """Mean absolute reconstruction error; zero iff exact reconstruction."""
    if recon.shape != x.shape:
        raise ShapeMismatch("cycle loss operands differ in shape")
    return float(np.mean(np.abs(recon - x)))


def loss_tv(xc: np.ndarray) -> float:
    """Total variation: raw sum of |forward differences| along all axes."""
    total = 0.0
    for axis in range(xc.ndim - 3, xc.ndim):
        total += float(np.sum(np.abs(np.diff(xc, axis=axis))))
    return total


def tv_grad(xc: np.ndarray) -> np.ndarray:
    g = np.zeros_like(xc)
    for axis in range(xc.ndim - 3, xc.ndim):
        s = np.sign(np.diff(xc, axis=axis))
        plus = [slice(None)] * xc.ndim
        minus = [slice(None)] * xc.ndim
        plus[axis] = slice(1, None)
        minus[axis] = slice(None, -1)
        g[tuple(plus)] += s
        g[tuple(minus)] -= s
    return g


def loss_map(m: np.ndarray, lam1: float, lam2: float, squared: bool = False) -> float:
    """Elastic magnitude constraint: lam1 * ||m||_1 + lam2 * ||m||_2.

    The l2 term is the Euclidean norm of the flattened map by default; the
    squared variant is available behind the flag.
    """
    l1 = float(np.sum(np.abs(m)))
    l2sq = float(np.sum(m.astype(np.float64) ** 2))
    l2 = l2sq if squared else float(np.sqrt(l2sq))
    return lam1 * l1 + lam2 * l2


def map_grad(m: np.ndarray, lam1: float, lam2: float, squared: bool = False) -> np.ndarray:
    g = lam1 * np.sign(m)
    if squared:
        g = g + lam2 * 2.0 * m
    else:
        norm = float(np.linalg.norm(m))
        if norm > 0:
            g = g + lam2 * m / norm
    return g.astype(m.dtype)


def synthesize(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Exact voxelwise sum; the only way counterfactuals are composed."""
    if x.shape != m.shape:
        raise ShapeMismatch(f"synthesize got {x.shape} vs {m.shape}")
    return x + m


# ------------------------------------------------------- discriminator

class Discriminator:
    """Classifier-template realness critic with a single linear output."""

    def __init__(self, input_dims, seed: int = 0, channels=CHANNELS):
        self.input_dims = tuple(input_dims)
        self.channels = tuple(channels)
        self.store = nn.ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
        init_conv_stack(self.store, rng, 1, self.channels, prefix="dsc")
        pooled_dims = tuple(d // 2 ** len(self.channels) for d in self.input_dims)
        head_in = self.channels[-1] * nn.octant_cells(pooled_dims)
        self.store.add("head_w", nn.init_uniform(rng, (1, head_in), head_in))
        self.store.add("head_b", np.zeros(1, dtype=np.float32))

    def forward(self, x: np.ndarray):
        feats, pooled, caches = conv_stack_forward(self.store, x, self.channels, prefix="dsc")
        vec, c_pool = nn.octant_avg_pool(pooled)
        out, c_lin = nn.linear(vec, self.store["head_w"], self.store["head_b"])
        return float(out[0]), (caches, c_pool, c_lin)

    def backward(self, cache, gscalar: float, want_param_grads: bool = True,
                 want_input_grad: bool = False):
        caches, c_pool, c_lin = cache
        gout = np.array([gscalar], dtype=np.float32)
        gvec, gw, gb = nn.linear_backward(c_lin, gout)
        if want_param_grads:
            self.store.add_grad("head_w", gw)
            self.store.add_grad("head_b", gb)
        g_pooled = nn.octant_avg_pool_backward(c_pool, gvec)
        return conv_stack_backward(self.store, caches, None, g_pooled, self.channels,
                                   prefix="dsc", want_param_grads=want_param_grads,
                                   want_input_grad=want_input_grad)


# ----------------------------------------------------------- generator

def fuse_target_tile(t_onehot: np.ndarray, spatial: tuple, dtype) -> np.ndarray:
    """Tile the target one-hot to (n_classes, *spatial); channels are constant."""
    tile = np.empty((t_onehot.size,) + tuple(spatial), dtype=dtype)
    tile[...] = np.asarray(t_onehot, dtype=dtype)[:, None, None, None]
    return tile


class CmgModel:
    """Frozen-encoder U-Net-style generator plus its discriminator."""

    def __init__(self, classifier: Classifier, seed: int = 0,
                 fusion_channels=FUSION_CHANNELS, decoder_channels=DECODER_CHANNELS):
        self.n_classes = classifier.n_classes
        self.input_dims = classifier.input_dims
        self.enc_channels = classifier.channels
        self.fusion_channels = tuple(fusion_channels)
        self.decoder_channels = tuple(decoder_channels)
        if len(self.fusion_channels) != len(self.enc_channels):
            raise ShapeMismatch("one fusion conv per encoder stage")
        self.store = nn.ParamStore()
        # the frozen encoder expects the classifier's smoothed view of the input
        self.front_kernel = classifier.front_kernel.copy()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 404)))
        for name in classifier.encoder_param_names():
            self.store.add(name, classifier.store[name].copy(), frozen=True)
        for l, fc in enumerate(self.fusion_channels, start=1):
            c_in = self.enc_channels[l - 1] + self.n_classes
            fan_in = c_in * KERNEL ** 3
            self.store.add(f"fus{l}_w", nn.init_uniform(rng, (fc, c_in, KERNEL, KERNEL, KERNEL), fan_in))
            self.store.add(f"fus{l}_b", np.zeros(fc, dtype=np.float32))
        # all decoding happens at half resolution; the map is upsampled at
        # the very end, so it cannot carry voxel-scale shortcut patterns
        d2_in = sum(self.fusion_channels)
        d1_in = self.decoder_channels[0]
        self.store.add("dec2_w", nn.init_uniform(rng, (self.decoder_channels[0], d2_in, KERNEL, KERNEL, KERNEL), d2_in * KERNEL ** 3))
        self.store.add("dec2_b", np.zeros(self.decoder_channels[0], dtype=np.float32))
        self.store.add("dec1_w", nn.init_uniform(rng, (self.decoder_channels[1], d1_in, KERNEL, KERNEL, KERNEL), d1_in * KERNEL ** 3))
        self.store.add("dec1_b", np.zeros(self.decoder_channels[1], dtype=np.float32))
        # zero-init map head: counterfactuals start at the identity
        self.store.add("out_w", np.zeros((1, self.decoder_channels[1], KERNEL, KERNEL, KERNEL), dtype=np.float32))
        self.store.add("out_b", np.zeros(1, dtype=np.float32))
        self.discriminator = Discriminator(self.input_dims, seed=seed)

    # -- forward -------------------------------------------------------

    def fuse_target(self, feat: np.ndarray, t_onehot: np.ndarray, level: int):
        """Tile + concatenate the target, then conv + LeakyReLU."""
        if t_onehot.size != self.n_classes:
            raise ShapeMismatch(f"target one-hot must have {self.n_classes} entries")
        tile = fuse_target_tile(t_onehot, feat.shape[1:], feat.dtype)
        cat = np.concatenate([feat, tile], axis=0)
        y, c_conv = nn.conv3d(cat, self.store[f"fus{level}_w"], self.store[f"fus{level}_b"])
        f, c_act = nn.leaky_relu(y, LRELU_SLOPE)
        return f, (c_conv, c_act, feat.shape[0])

    def _fuse_backward(self, level: int, cache, gf, want_input_grad: bool = True):
        c_conv, c_act, n_feat = cache
        gy = nn.leaky_relu_backward(c_act, gf)
        gcat, gw, gb = nn.conv3d_backward(c_conv, gy, want_input=want_input_grad)
        self.store.add_grad(f"fus{level}_w", gw)
        self.store.add_grad(f"fus{level}_b", gb)
        # gradient w.r.t. the encoder feature only (the tiled target is constant)
        return gcat[:n_feat] if want_input_grad else None

    def generate(self, x: np.ndarray, t_onehot: np.ndarray):
        """Counterfactual map for (input, target). Returns (m, cache)."""
        smoothed = nn.fixed_smooth3(x, self.front_kernel)
        feats, _, enc_caches = conv_stack_forward(self.store, smoothed, self.enc_channels)
        # level-1 features are pooled to half resolution before fusion;
        # all three skip levels then meet on the 16^3 grid
        f1_half, c_pool1 = nn.downsample_avg2(feats[0])
        fused, fuse_caches = [], []
        for l, feat in enumerate([f1_half, feats[1], feats[2]], start=1):
            f, c = self.fuse_target(feat, t_onehot, l)
            fused.append(f)
            fuse_caches.append(c)
        u3, cu3 = nn.upsample_trilinear2(fused[2])
        cat = np.concatenate([u3, fused[1], fused[0]], axis=0)
        y2, cc2 = nn.conv3d(cat, self.store["dec2_w"], self.store["dec2_b"])
        d2, ca2 = nn.leaky_relu(y2, LRELU_SLOPE)
        y1, cc1 = nn.conv3d(d2, self.store["dec1_w"], self.store["dec1_b"])
        d1, ca1 = nn.leaky_relu(y1, LRELU_SLOPE)
        m_half, cout = nn.conv3d(d1, self.store["out_w"], self.store["out_b"])
        m, cup = nn.upsample_trilinear2(m_half)
        cache = (enc_caches, fuse_caches, c_pool1, cu3, cc2, ca2, cc1, ca1, cout, cup,
                 self.fusion_channels)
        return m, cache

    def generate_backward(self, cache, gm: np.ndarray, want_input_grad: bool = False):
        """Backprop through decoder, fusion, and (paramless) frozen encoder."""
        (enc_caches, fuse_caches, c_pool1, cu3, cc2, ca2, cc1, ca1, cout, cup,
         fusion_channels) = cache
        gm_half = nn.upsample_trilinear2_backward(cup, gm)
        gd1, gw, gb = nn.conv3d_backward(cout, gm_half)
        self.store.add_grad("out_w", gw)
        self.store.add_grad("out_b", gb)
        gy1 = nn.leaky_relu_backward(ca1, gd1)
        gd2, gw, gb = nn.conv3d_backward(cc1, gy1)
        self.store.add_grad("dec1_w", gw)
        self.store.add_grad("dec1_b", gb)
        gy2 = nn.leaky_relu_backward(ca2, gd2)
        gcat, gw, gb = nn.conv3d_backward(cc2, gy2)
        self.store.add_grad("dec2_w", gw)
        self.store.add_grad("dec2_b", gb)
        n3, n2 = fusion_channels[2], fusion_channels[1]
        gu3, gfused1, gfused0 = gcat[:n3], gcat[n3:n3 + n2], gcat[n3 + n2:]
        gfused2 = nn.upsample_trilinear2_backward(cu3, gu3)
        gf1_half = self._fuse_backward(1, fuse_caches[0], gfused0, want_input_grad)
        gfeats = [
            nn.downsample_avg2_backward(c_pool1, gf1_half) if want_input_grad else None,
            self._fuse_backward(2, fuse_caches[1], gfused1, want_input_grad),
            self._fuse_backward(3, fuse_caches[2], gfused2, want_input_grad),
        ]
        if not want_input_grad:
            # frozen encoder over a constant input: nothing upstream needs grads
            return None
        g_smoothed = conv_stack_backward(self.store, enc_caches, gfeats, None, self.enc_channels,
                                         want_param_grads=False, want_input_grad=True)
        return nn.fixed_smooth3(g_smoothed, self.front_kernel)

    def generator_param_names(self) -> list:
        return [n for n in self.store.names() if not n.startswith("enc")]

    def encoder_checksum(self) -> str:
        return self.store.checksum([n for n in self.store.names() if n.startswith("enc")])


@dataclass
class CounterfactualRecord:
    """One counterfactual synthesis with its cycle components."""

    subject_id: str
    source_label_index: int
    target: np.ndarray            # one-hot
    x_real: np.ndarray
    cf_map: np.ndarray
    x_cf: np.ndarray
    override_map: np.ndarray
    x_recon: np.ndarray
    re_confidence: float

    def check_invariants(self) -> None:
        if not np.array_equal(self.x_cf, self.x_real + self.cf_map):
            raise AssertionError("x_cf != x_real + cf_map")
        if not np.array_equal(self.x_recon, self.x_cf + self.override_map):
            raise AssertionError("x_recon != x_cf + override_map")


def gen_counterfactual_record(model: CmgModel, classifier: Classifier, x: np.ndarray,
                              t_onehot: np.ndarray, subject_id: str = "",
                              source_label_index: int = -1) -> CounterfactualRecord:
    """Generate the counterfactual plus the override pass for cycle checks."""
    m, _ = model.generate(x, t_onehot)
    xc = synthesize(x, m)
    probs_real = classifier.predict(x)
    yr = np.zeros(model.n_classes, dtype=x.dtype)
    yr[int(np.argmax(probs_real))] = 1.0
    m2, _ = model.generate(xc, yr)
    recon = synthesize(xc, m2)
    conf = float(np.dot(classifier.predict(xc), t_onehot))
    return CounterfactualRecord(
        subject_id=subject_id,
        source_label_index=source_label_index,
        target=np.asarray(t_onehot, dtype=np.float32),
        x_real=x,
        cf_map=m,
        x_cf=xc,
        override_map=m2,
        x_recon=recon,
        re_confidence=conf,
    )


# ------------------------------------------------------------ training

@dataclass
class CmgTrainConfig:
    lr_g: float = 0.005
    lr_d: float = 0.002
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 4          # small batches buy more optimizer steps
    seed: int = 0
    clip_norm: float = 1.0       # global-norm gradient clip, both sides
    optimizer: str = "adam"
    l2_squared: bool = False


def _per_voxel(total: float, n_vox: int) -> float:
    return total / n_vox


def train_cmg(classifier: Classifier, items, weights: LossWeights, cfg: CmgTrainConfig):
    """Alternating discriminator/generator optimization of the composite loss.

    ``items``: (x, label_index, subject_id) with x shaped (1, dx, dy, dz).
    The discriminator minimizes the least-squares loss alone; the
    generator-side parameters (fusion + decoder; encoder frozen) minimize
    the weighted sum of adversarial, cycle, evaluator-classification, tv,
    and map-magnitude terms (tv and map per-voxel scaled for balance, raw
    sums logged alongside). Returns (model, loss_rows, gradmag_rows).
    """
    if not getattr(classifier, "trained", False):
        raise NotPretrained("classifier must carry trained weights before CMG training")
    model = CmgModel(classifier, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 808)))
    n_vox = int(np.prod(model.input_dims))
    eye = np.eye(model.n_classes, dtype=np.float32)
    # the evaluator's source predictions never change: cache them
    source_onehot = {}
    for x, _, sid in items:
        source_onehot[sid] = eye[int(np.argmax(classifier.predict(x)))]

    loss_rows, gradmag_rows = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = stratified_order(items, rng)
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            n_b = len(batch)
            targets = [eye[rng.integers(model.n_classes)] for _ in batch]

            passes = []
            for (x, _, sid), t in zip(batch, targets):
                m1, c1 = model.generate(x, t)
                xc = synthesize(x, m1)
                m2, c2 = model.generate(xc, source_onehot[sid])
                xt = synthesize(xc, m2)
                passes.append((x, t, sid, m1, c1, xc, m2, c2, xt))

            # discriminator step (least-squares loss only)
            model.discriminator.store.zero_grads()
            d_real, d_fake, d_recon = [], [], []
            for x, t, sid, m1, c1, xc, m2, c2, xt in passes:
                dr, cr = model.discriminator.forward(x)
                df, cf_ = model.discriminator.forward(xc)
                dc, cc = model.discriminator.forward(xt)
                d_real.append(dr)
                d_fake.append(df)
                d_recon.append(dc)
                scale = weights.lam4 / n_b
                model.discriminator.backward(cr, 2.0 * (dr - 1.0) * scale)
                model.discriminator.backward(cf_, df * scale)
                model.discriminator.backward(cc, dc * scale)
            model.discriminator.store.clip_grads(cfg.clip_norm)
            model.discriminator.store.optimize(cfg.optimizer, cfg.lr_d, cfg.momentum)
            l_adv_d = loss_adv_d(d_real, d_fake, d_recon)

            # generator step
            model.store.zero_grads()
            batch_losses = {"adv_g": 0.0, "cyc": 0.0, "cls": 0.0, "tv_raw": 0.0,
                            "map_raw": 0.0, "tv": 0.0, "map": 0.0}
            for x, t, sid, m1, c1, xc, m2, c2, xt in passes:
                df, cf_ = model.discriminator.forward(xc)
                dc, cc = model.discriminator.forward(xt)
                batch_losses["adv_g"] += loss_adv_g([df], [dc]) / n_b
                g_xc = model.discriminator.backward(
                    cf_, weights.lam3 * (df - 1.0) / n_b,
                    want_param_grads=False, want_input_grad=True)
                g_xt = model.discriminator.backward(
                    cc, weights.lam3 * (dc - 1.0) / n_b,
                    want_param_grads=False, want_input_grad=True)

                l_cyc = loss_cyc(xt, x)
                batch_losses["cyc"] += l_cyc / n_b
                g_xt = g_xt + weights.lam5 * np.sign(xt - x) / (n_vox * n_b)

                logits, c_clf = classifier.forward(xc)
                l_cls, probs, c_ce = nn.softmax_ce(logits.astype(np.float64), t.astype(np.float64))
                batch_losses["cls"] += l_cls / n_b
                glog = nn.softmax_ce_backward(c_ce, weights.lam6 / n_b).astype(np.float32)
                g_xc = g_xc + classifier.backward(c_clf, glog, want_param_grads=False,
                                                  want_input_grad=True)

                l_tv_raw = loss_tv(xc)
                batch_losses["tv_raw"] += l_tv_raw / n_b
                batch_losses["tv"] += _per_voxel(l_tv_raw, n_vox) / n_b
                g_xc = g_xc + weights.lam7 * tv_grad(xc) / (n_vox * n_b)

                l_map_raw = loss_map(m1, weights.lam1, weights.lam2, cfg.l2_squared)
                batch_losses["map_raw"] += l_map_raw / n_b
                batch_losses["map"] += _per_voxel(l_map_raw, n_vox) / n_b
                g_m1_map = map_grad(m1, weights.lam1, weights.lam2, cfg.l2_squared) / (n_vox * n_b)

                # chain: xt = xc + m2;  m2 = G(T(xc, yr));  xc = x + m1
                g_m2 = g_xt
                g_xc = g_xc + g_xt
                g_xc = g_xc + model.generate_backward(c2, g_m2, want_input_grad=True)
                g_m1 = g_xc + g_m1_map
                model.generate_backward(c1, g_m1, want_input_grad=False)
            model.store.clip_grads(cfg.clip_norm)
            model.store.optimize(cfg.optimizer, cfg.lr_g, cfg.momentum)

            total = (weights.lam3 * batch_losses["adv_g"] + weights.lam4 * l_adv_d
                     + weights.lam5 * batch_losses["cyc"] + weights.lam6 * batch_losses["cls"]
                     + weights.lam7 * batch_losses["tv"] + batch_losses["map"])
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite generator objective at step {step}")
            loss_rows.append((epoch, step, l_adv_d, batch_losses["adv_g"], batch_losses["cyc"],
                              batch_losses["cls"], batch_losses["tv"], batch_losses["map"],
                              batch_losses["tv_raw"], batch_losses["map_raw"], total))
            step += 1

        gradmag_rows.extend(_gradient_magnitude_report(model, classifier, items, weights,
                                                       epoch, rng, n_vox))
    return model, loss_rows, gradmag_rows


def _gradient_magnitude_report(model, classifier, items, weights, epoch, rng, n_vox):
    """Per-loss generator gradient norms on one probe sample (the balancing tool)."""
    x, _, sid = items[int(rng.integers(len(items)))]
    eye = np.eye(model.n_classes, dtype=np.float32)
    t = eye[int(rng.integers(model.n_classes))]
    yr = eye[int(np.argmax(classifier.predict(x)))]

    def gen_norm() -> float:
        sq = 0.0
        for name in model.generator_param_names():
            g = model.store.grad(name)
            sq += float(np.sum(g.astype(np.float64) ** 2))
        return float(np.sqrt(sq))

    rows = []
    for term in ("adv_g", "cyc", "cls", "tv", "map"):
        model.store.zero_grads()
        m1, c1 = model.generate(x, t)
        xc = synthesize(x, m1)
        m2, c2 = model.generate(xc, yr)
        xt = synthesize(xc, m2)
        g_xc = np.zeros_like(xc)
        g_xt = np.zeros_like(xt)
        g_m1_extra = np.zeros_like(m1)
        if term == "adv_g":
            df, cf_ = model.discriminator.forward(xc)
            dc, cc = model.discriminator.forward(xt)
            value = loss_adv_g([df], [dc])
            g_xc = model.discriminator.backward(cf_, weights.lam3 * (df - 1.0),
                                                want_param_grads=False, want_input_grad=True)
            g_xt = model.discriminator.backward(cc, weights.lam3 * (dc - 1.0),
                                                want_param_grads=False, want_input_grad=True)
        elif term == "cyc":
            value = loss_cyc(xt, x)
            g_xt = weights.lam5 * np.sign(xt - x) / n_vox
        elif term == "cls":
            logits, c_clf = classifier.forward(xc)
            value, _, c_ce = nn.softmax_ce(logits.astype(np.float64), t.astype(np.float64))
            glog = nn.softmax_ce_backward(c_ce, weights.lam6).astype(np.float32)
            g_xc = classifier.backward(c_clf, glog, want_param_grads=False, want_input_grad=True)
        elif term == "tv":
            value = loss_tv(xc) / n_vox
            g_xc = weights.lam7 * tv_grad(xc) / n_vox
        else:
            value = loss_map(m1, weights.lam1, weights.lam2) / n_vox
            g_m1_extra = map_grad(m1, weights.lam1, weights.lam2) / n_vox
        g_m2 = g_xt
        g_xc = g_xc + g_xt
        g_xc = g_xc + model.generate_backward(c2, g_m2, want_input_grad=True)
        model.generate_backward(c1, g_xc + g_m1_extra, want_input_grad=False)
        rows.append((epoch, term, float(value), gen_norm()))
    model.store.zero_grads()
    return rows
