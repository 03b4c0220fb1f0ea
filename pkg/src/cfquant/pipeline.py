"""End-to-end orchestration: stages, artifacts, provenance, hash-skipping.

Every stage reads its inputs from the artifact directory and writes its
outputs plus a content-hash stamp; re-running with an unchanged config
skips completed stages. No artifact carries a timestamp, so two runs with
identical config and seeds produce byte-identical directories.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import cmg as cmg_mod
from . import density as density_mod
from . import fileio, licol, metrics, rois
from .classifier import Classifier, as_model_input, train_classifier
from .config import RunConfig
from .errors import LeakageGuard, MissingStage
from .phantom import (
    Atlas,
    LABELS,
    PhantomSpec,
    build_cohort,
    make_atlas,
    make_longitudinal_pair,
    pseudo_ground_truth_map,
    scenario_labels,
)
from .volume import NormStats, Volume3D

STAGES = ("synth", "train-clf", "train-cmg", "gen-cf", "manipulate", "effect-map",
          "stat-map", "rois", "train-licol", "relatedness", "eval")

_SUBDIRS = {"data": "data", "clf": "clf", "cmg": "cmg", "cf": "cf", "density": "density",
            "maps": "maps", "rois": "rois", "licol": "licol", "eval": "eval",
            "stamps": "stamps", "report": "report"}


class PipelineContext:
    """Paths, config, and stamp bookkeeping for one artifact directory."""

    def __init__(self, cfg: RunConfig, outdir):
        self.cfg = cfg
        self.root = Path(outdir)
        self.cfg_text = cfg.to_text()
        self.cfg_hash = hashlib.sha256(self.cfg_text.encode()).hexdigest()[:16]

    def dir(self, name: str) -> Path:
        path = self.root / _SUBDIRS[name]
        path.mkdir(parents=True, exist_ok=True)
        return path

    # ---- stamps ----
    def stage_hash(self, stage: str) -> str:
        idx = STAGES.index(stage)
        prev = self.stage_hash(STAGES[idx - 1]) if idx else ""
        return hashlib.sha256((prev + stage + self.cfg_text).encode()).hexdigest()

    def stamp_path(self, stage: str) -> Path:
        return self.dir("stamps") / f"{stage}.stamp"

    def is_done(self, stage: str) -> bool:
        path = self.stamp_path(stage)
        return path.exists() and path.read_text() == self.stage_hash(stage)

    def mark_done(self, stage: str) -> None:
        self.stamp_path(stage).write_text(self.stage_hash(stage))

    def require(self, *stages) -> None:
        for stage in stages:
            if not self.is_done(stage):
                raise MissingStage(f"stage {stage!r} has not been run (or config changed)")

    def provenance(self, stage: str, **extra) -> dict:
        meta = {"config_hash": self.cfg_hash, "stage": stage,
                "input_hash": self.stage_hash(stage)[:16]}
        meta.update(extra)
        return meta

    # ---- shared loaders ----
    def scenario(self) -> tuple:
        return scenario_labels(self.cfg.scenario)

    def phantom_spec(self) -> PhantomSpec:
        c = self.cfg
        return PhantomSpec(raw_dims=(c.raw_dim,) * 3, input_dims=(c.input_dim,) * 3,
                           n_regions=c.regions, delta=c.delta, noise_std=c.noise_std,
                           aging_rate=c.aging_rate, seed=c.seed)

    def load_atlas(self) -> Atlas:
        labels, spacing, meta = fileio.read_v3d(self.dir("data") / "atlas.v3d")
        names = tuple(meta["region_names"].split(";"))
        flat = labels.ravel(order="F")
        index_sets = tuple(np.flatnonzero(flat == r) for r in range(1, len(names) + 1))
        return Atlas(labels=labels, spacing_mm=spacing, region_names=names,
                     voxel_index_sets=index_sets)

    def load_manifest(self) -> list:
        header, rows = fileio.read_csv(self.dir("data") / "manifest.csv")
        return [dict(zip(header, row)) for row in rows]

    def load_input(self, sid: str):
        vol, meta = fileio.read_v3d(self.dir("data") / f"{sid}_input.v3d")
        stats = NormStats(mean=float(meta["norm_mean"]), std=float(meta["norm_std"]),
                          q_low=float(meta["q_low"]), q_high=float(meta["q_high"]))
        return vol, stats, meta

    def load_classifier(self) -> Classifier:
        labels = self.scenario()
        model = Classifier(len(labels), (self.cfg.input_dim,) * 3, seed=self.cfg.seed,
                           front_sigma=self.cfg.clf_front_sigma)
        model.store.load(fileio.read_ckpt(self.dir("clf") / "clf.ckpt"))
        model.trained = True
        return model

    def load_cmg(self) -> cmg_mod.CmgModel:
        model = cmg_mod.CmgModel(self.load_classifier(), seed=self.cfg.seed)
        model.store.load(fileio.read_ckpt(self.dir("cmg") / "gen.ckpt"))
        model.discriminator.store.load(fileio.read_ckpt(self.dir("cmg") / "disc.ckpt"))
        return model

    def class_index(self) -> dict:
        return {label: i for i, label in enumerate(self.scenario())}

    def cf_targets(self, label: str) -> list:
        return [other for other in self.scenario() if other != label]

    def load_density(self, name: str) -> density_mod.DensityMap:
        vol, meta = fileio.read_v3d(self.dir("density") / name)
        return density_mod.DensityMap(volume=vol, provenance=meta["provenance"],
                                      subject_id=meta["subject_id"], stage=meta["stage_label"])

    def load_effect_map(self) -> density_mod.EffectMap:
        vol, meta = fileio.read_v3d(self.dir("maps") / "effect_map.v3d")
        mask_labels, _, _ = fileio.read_v3d(self.dir("maps") / "effect_mask.v3d")
        return density_mod.EffectMap(volume=vol, percentile=float(meta["percentile"]),
                                     mask=mask_labels > 0)

    def load_stat_map(self) -> density_mod.StatMap:
        vol, meta = fileio.read_v3d(self.dir("maps") / "stat_map.v3d")
        clipped = Volume3D(np.clip(vol.data, 0.0, 1.0), vol.spacing_mm)
        return density_mod.StatMap(volume=clipped, test_kind=meta["test_kind"],
                                   threshold=float(meta["threshold"]))

    def load_xq(self):
        header, row_data = fileio.read_csv(self.dir("rois") / "xq_effect.csv")
        values = np.array([float(r[2]) for r in row_data])
        ids = tuple(int(r[0]) for r in row_data)
        return rois.RoiVector(values=values, region_ids=ids, source="effect",
                              scenario=self.cfg.scenario)


# ------------------------------------------------------------- stage: synth

def stage_synth(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    spec = ctx.phantom_spec()
    atlas = make_atlas(spec)
    labels = ctx.scenario()
    confound = None
    if cfg.confound_label:
        confound = {"label": cfg.confound_label, "band": (cfg.confound_lo, cfg.confound_hi),
                    "keep": cfg.confound_keep}
    cohort = build_cohort(spec, atlas, labels, cfg.n_per_class, confound=confound)
    data = ctx.dir("data")
    fileio.write_v3d(data / "atlas.v3d", None, labels=atlas.labels,
                     spacing_mm=atlas.spacing_mm,
                     meta=ctx.provenance("synth", region_names=";".join(atlas.region_names),
                                         planted_regions=";".join(str(r) for r in spec.planted_regions),
                                         effect_regions=";".join(str(r) for r in spec.effect_regions),
                                         growth_regions=";".join(str(r) for r in spec.growth_regions)))
    manifest_rows = []
    for scan, split in cohort:
        sid = scan.subject_id
        raw_path = data / f"{sid}_raw.v3d"
        meta = ctx.provenance("synth", subject_id=sid, label=scan.label,
                              age=f"{scan.age:.6f}", split=split)
        fileio.write_v3d(raw_path, scan.volume, meta=meta)
        x_input, stats = density_mod.preprocess(scan.volume, spec.input_dims,
                                                cfg.quant_low, cfg.quant_high)
        meta_in = dict(meta)
        meta_in.update(norm_mean=repr(stats.mean), norm_std=repr(stats.std),
                       q_low=repr(stats.q_low), q_high=repr(stats.q_high))
        fileio.write_v3d(data / f"{sid}_input.v3d", x_input, meta=meta_in)
        manifest_rows.append([sid, scan.label, f"{scan.age:.6f}", split, f"{sid}_raw.v3d"])
    fileio.write_csv(data / "manifest.csv", ["subject_id", "label", "age", "split", "path"],
                     manifest_rows)
    fileio.write_meta(data / "manifest.csv", ctx.provenance("synth"))


# --------------------------------------------------------- stage: train-clf

def _split_items(ctx: PipelineContext, split: str) -> list:
    class_of = ctx.class_index()
    items = []
    for row in ctx.load_manifest():
        if row["split"] != split:
            continue
        vol, _, _ = ctx.load_input(row["subject_id"])
        items.append((as_model_input(vol.data), class_of[row["label"]], row["subject_id"],
                      row["label"], float(row["age"])))
    return items


def _region_masks_at_input(ctx: PipelineContext):
    from .phantom import resample_labels_nearest
    atlas = ctx.load_atlas()
    labels_small = resample_labels_nearest(atlas.labels, (ctx.cfg.input_dim,) * 3)
    return [labels_small == r for r in range(1, atlas.n_regions + 1)]


def stage_train_clf(ctx: PipelineContext) -> None:
    ctx.require("synth")
    cfg = ctx.cfg
    labels = ctx.scenario()
    train = [(x, y) for x, y, *_ in _split_items(ctx, "train")]
    val = [(x, y) for x, y, *_ in _split_items(ctx, "val")]
    model, log = train_classifier(train, val, len(labels), (cfg.input_dim,) * 3,
                                  lr=cfg.clf_lr, momentum=cfg.clf_momentum,
                                  epochs=cfg.clf_epochs, batch_size=cfg.batch_size,
                                  seed=cfg.seed, optimizer=cfg.optimizer,
                                  front_sigma=cfg.clf_front_sigma,
                                  aug_noise=cfg.clf_aug_noise,
                                  aug_shift=cfg.clf_aug_shift,
                                  aug_region=cfg.clf_aug_region,
                                  region_masks=_region_masks_at_input(ctx))
    out = ctx.dir("clf")
    fileio.write_ckpt(out / "clf.ckpt", model.store.as_dict())
    fileio.write_meta(out / "clf.ckpt", ctx.provenance("train-clf", n_classes=len(labels)))
    fileio.write_csv(out / "train_log.csv", ["epoch", "train_ce", "val_auc"],
                     [[e, repr(l), repr(a)] for e, l, a in log])
    test = _split_items(ctx, "test")
    probs = np.array([model.predict(x) for x, *_ in test])
    ys = np.array([y for _, y, *_ in test])
    if len(labels) == 2:
        rep = metrics.binary_metrics(probs[:, 1], ys)
        rows = [[name, repr(getattr(rep, name))] for name in metrics.MetricsReport.FIELDS]
    else:
        acc = float((probs.argmax(axis=1) == ys).mean())
        rows = [["mauc", repr(metrics.macro_ovr_auc(probs, ys))], ["accuracy", repr(acc)]]
    fileio.write_csv(out / "test_metrics.csv", ["metric", "value"], rows)


# --------------------------------------------------------- stage: train-cmg

def stage_train_cmg(ctx: PipelineContext) -> None:
    ctx.require("synth", "train-clf")
    cfg = ctx.cfg
    classifier = ctx.load_classifier()
    items = [(x, y, sid) for x, y, sid, *_ in _split_items(ctx, "train")]
    weights = cmg_mod.LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4,
                                  cfg.lambda5, cfg.lambda6, cfg.lambda7)
    train_cfg = cmg_mod.CmgTrainConfig(lr_g=cfg.cmg_lr_g, lr_d=cfg.cmg_lr_d,
                                       momentum=cfg.clf_momentum, epochs=cfg.cmg_epochs,
                                       batch_size=cfg.cmg_batch_size, seed=cfg.seed,
                                       clip_norm=cfg.cmg_clip_norm,
                                       optimizer=cfg.optimizer,
                                       l2_squared=cfg.l2_squared)
    encoder_before = classifier.encoder_checksum()
    model, loss_rows, grad_rows = cmg_mod.train_cmg(classifier, items, weights, train_cfg)
    if model.encoder_checksum() != encoder_before:
        raise AssertionError("frozen encoder changed during CMG training")
    out = ctx.dir("cmg")
    gen_params = {n: model.store[n] for n in model.store.names()}
    fileio.write_ckpt(out / "gen.ckpt", gen_params)
    fileio.write_meta(out / "gen.ckpt", ctx.provenance(
        "train-cmg", encoder_checksum=model.encoder_checksum(),
        train_subjects=";".join(sid for _, _, sid in items),
        **{k: repr(v) for k, v in weights.as_dict().items()}))
    fileio.write_ckpt(out / "disc.ckpt", model.discriminator.store.as_dict())
    fileio.write_meta(out / "disc.ckpt", ctx.provenance("train-cmg"))
    fileio.write_csv(out / "loss_log.csv",
                     ["epoch", "step", "adv_d", "adv_g", "cyc", "cls", "tv", "map",
                      "tv_raw", "map_raw", "total"],
                     [[r[0], r[1]] + [repr(v) for v in r[2:]] for r in loss_rows])
    fileio.write_csv(out / "gradmag.csv", ["epoch", "loss_term", "value", "grad_norm"],
                     [[e, t, repr(v), repr(g)] for e, t, v, g in grad_rows])


# ------------------------------------------------------------ stage: gen-cf

def _record_paths(cf_dir: Path, sid: str, target: str) -> dict:
    stem = f"{sid}_to_{target}"
    return {part: cf_dir / f"{stem}_{part}.v3d" for part in ("map", "xc", "override", "recon")}


def stage_gen_cf(ctx: PipelineContext) -> None:
    ctx.require("synth", "train-clf", "train-cmg")
    classifier = ctx.load_classifier()
    model = ctx.load_cmg()
    class_of = ctx.class_index()
    cf_dir = ctx.dir("cf")
    rows = []
    for row in ctx.load_manifest():
        sid = row["subject_id"]
        vol, _, _ = ctx.load_input(sid)
        x = as_model_input(vol.data)
        spacing = vol.spacing_mm
        for target in ctx.cf_targets(row["label"]):
            t_onehot = np.zeros(len(class_of), dtype=np.float32)
            t_onehot[class_of[target]] = 1.0
            record = cmg_mod.gen_counterfactual_record(model, classifier, x, t_onehot,
                                                       subject_id=sid,
                                                       source_label_index=class_of[row["label"]])
            record.check_invariants()
            paths = _record_paths(cf_dir, sid, target)
            meta = ctx.provenance("gen-cf", source_subject=sid, source_label=row["label"],
                                  target_label=target, split=row["split"],
                                  re_confidence=repr(record.re_confidence))
            for part, arr in (("map", record.cf_map), ("xc", record.x_cf),
                              ("override", record.override_map), ("recon", record.x_recon)):
                fileio.write_v3d(paths[part], Volume3D(arr[0].astype(np.float64), spacing),
                                 meta=meta)
            rows.append([sid, row["label"], target, row["split"],
                         repr(record.re_confidence),
                         repr(float(np.abs(record.cf_map).mean()))])
    fileio.write_csv(cf_dir / "records.csv",
                     ["subject_id", "source_label", "target_label", "split",
                      "re_confidence", "map_mean_abs"], rows)
    fileio.write_meta(cf_dir / "records.csv", ctx.provenance("gen-cf"))


# -------------------------------------------------------- stage: manipulate

def stage_manipulate(ctx: PipelineContext) -> None:
    ctx.require("synth", "gen-cf")
    cfg = ctx.cfg
    atlas = ctx.load_atlas()
    mask = atlas.mask
    raw_dims = atlas.dims
    dens_dir = ctx.dir("density")
    cf_dir = ctx.dir("cf")
    manifest = ctx.load_manifest()
    for row in manifest:
        sid = row["subject_id"]
        x_vol, stats, _ = ctx.load_input(sid)
        b_real = density_mod.reverse_preprocess(x_vol, stats, raw_dims)
        rgm = density_mod.to_gm_density(b_real, mask, cfg.smooth_sigma_mm,
                                        provenance="real", subject_id=sid, stage=row["label"])
        meta = ctx.provenance("manipulate", subject_id=sid, provenance="real",
                              stage_label=row["label"], split=row["split"],
                              surrogate=density_mod.DENSITY_SURROGATE_NOTE)
        fileio.write_v3d(dens_dir / f"{sid}_rgm.v3d", rgm.volume, meta=meta)
        for target in ctx.cf_targets(row["label"]):
            xc_vol, _ = fileio.read_v3d(_record_paths(cf_dir, sid, target)["xc"])
            b_cf = density_mod.reverse_preprocess(xc_vol, stats, raw_dims,
                                                  paired_input=x_vol, is_counterfactual=True)
            cgm = density_mod.to_gm_density(b_cf, mask, cfg.smooth_sigma_mm,
                                            provenance="counterfactual", subject_id=sid,
                                            stage=target)
            meta_c = ctx.provenance("manipulate", subject_id=sid, provenance="counterfactual",
                                    stage_label=target, split=row["split"],
                                    surrogate=density_mod.DENSITY_SURROGATE_NOTE)
            fileio.write_v3d(dens_dir / f"{sid}_to_{target}_cgm.v3d", cgm.volume, meta=meta_c)
    # distributional compatibility check per stage (train split)
    rows_out = []
    for stage in ctx.scenario():
        rgms = [ctx.load_density(f"{r['subject_id']}_rgm.v3d") for r in manifest
                if r["split"] == "train" and r["label"] == stage]
        cgms = [ctx.load_density(f"{r['subject_id']}_to_{stage}_cgm.v3d") for r in manifest
                if r["split"] == "train" and r["label"] != stage and stage in ctx.cf_targets(r["label"])]
        if len(rgms) >= 2 and len(cgms) >= 2:
            region_rows, compatible = density_mod.validate_cgm_groups(rgms, cgms, atlas)
            for rid, name, p in region_rows:
                rows_out.append([stage, rid, name, repr(p)])
            rows_out.append([stage, 0, "fraction_compatible", repr(compatible)])
    fileio.write_csv(dens_dir / "cgm_validation.csv",
                     ["stage", "region_id", "region_name", "p_value"], rows_out)
    fileio.write_meta(dens_dir / "cgm_validation.csv", ctx.provenance("manipulate"))


# -------------------------------------------------- stage: effect-map

def _train_pairs(ctx: PipelineContext, subject_rows) -> tuple:
    """(rGM, cGM) volume pairs plus the contributing subject ids."""
    pairs, ids = [], []
    for row in subject_rows:
        sid = row["subject_id"]
        rgm = ctx.load_density(f"{sid}_rgm.v3d")
        for target in ctx.cf_targets(row["label"]):
            cgm = ctx.load_density(f"{sid}_to_{target}_cgm.v3d")
            pairs.append((rgm.volume, cgm.volume))
            ids.append(sid)
    return pairs, sorted(set(ids))


def stage_effect_map(ctx: PipelineContext) -> None:
    ctx.require("manipulate")
    cfg = ctx.cfg
    atlas = ctx.load_atlas()
    train_rows = [r for r in ctx.load_manifest() if r["split"] == "train"]
    if len(ctx.scenario()) == 2:
        pairs, ids = _train_pairs(ctx, train_rows)
        effect = density_mod.ad_effect_map(pairs, cfg.percentile_p, atlas.mask)
    else:
        maps = []
        ids = []
        for row in train_rows:
            sid = row["subject_id"]
            maps.append(ctx.load_density(f"{sid}_rgm.v3d"))
            ids.append(sid)
            for target in ctx.cf_targets(row["label"]):
                maps.append(ctx.load_density(f"{sid}_to_{target}_cgm.v3d"))
        effect = density_mod.multi_class_effect_map(maps, cfg.percentile_p, atlas.mask,
                                                    seed=cfg.seed)
        ids = sorted(set(ids))
    out = ctx.dir("maps")
    meta = ctx.provenance("effect-map", percentile=repr(cfg.percentile_p),
                          n_pairs=str(len(ids)), subjects=";".join(ids))
    fileio.write_v3d(out / "effect_map.v3d", effect.volume, meta=meta)
    fileio.write_v3d(out / "effect_mask.v3d", None, labels=effect.mask.astype(np.int32),
                     spacing_mm=effect.volume.spacing_mm, meta=meta)


def stage_stat_map(ctx: PipelineContext) -> None:
    ctx.require("manipulate")
    cfg = ctx.cfg
    train_rows = [r for r in ctx.load_manifest() if r["split"] == "train"]
    by_stage = {stage: [ctx.load_density(f"{r['subject_id']}_rgm.v3d")
                        for r in train_rows if r["label"] == stage]
                for stage in ctx.scenario()}
    if len(ctx.scenario()) == 2:
        a, b = (by_stage[s] for s in ctx.scenario())
        stat = density_mod.stat_map_ttest(a, b, cfg.stat_p)
    else:
        stat = density_mod.stat_map_anova([by_stage[s] for s in ctx.scenario()], cfg.stat_p)
    out = ctx.dir("maps")
    fileio.write_v3d(out / "stat_map.v3d", stat.volume,
                     meta=ctx.provenance("stat-map", test_kind=stat.test_kind,
                                         threshold=repr(stat.threshold),
                                         n=str(sum(len(v) for v in by_stage.values()))))


# ------------------------------------------------------------- stage: rois

def _resolve_alpha(cfg: RunConfig, atlas: Atlas) -> int:
    return cfg.alpha if cfg.alpha > 0 else rois.default_alpha(atlas)


def stage_rois(ctx: PipelineContext) -> None:
    ctx.require("effect-map", "stat-map")
    cfg = ctx.cfg
    atlas = ctx.load_atlas()
    alpha = _resolve_alpha(cfg, atlas)
    effect = ctx.load_effect_map()
    stat = ctx.load_stat_map()
    xq = rois.ad_effect_rois(effect, atlas, alpha, scenario=cfg.scenario,
                             full_region_norm=cfg.roi_full_region_norm)
    xq_stat, mean_p = rois.statistical_rois(stat, atlas, alpha, cfg.stat_p,
                                            scenario=cfg.scenario)
    out = ctx.dir("rois")
    train_ids = sorted({r["subject_id"] for r in ctx.load_manifest() if r["split"] == "train"})
    meta = ctx.provenance("rois", alpha=str(alpha), query_subjects=";".join(train_ids))
    fileio.write_csv(out / "xq_effect.csv", ["region_id", "region_name", "value"],
                     [[rid, atlas.region_names[rid - 1], repr(float(v))]
                      for rid, v in zip(xq.region_ids, xq.values)])
    fileio.write_meta(out / "xq_effect.csv", meta)
    fileio.write_csv(out / "xq_stat.csv", ["region_id", "region_name", "value", "mean_p"],
                     [[rid, atlas.region_names[rid - 1], repr(float(v)), repr(float(mp))]
                      for rid, v, mp in zip(xq_stat.region_ids, xq_stat.values, mean_p)])
    fileio.write_meta(out / "xq_stat.csv", meta)
    r_eff = rois.roi_set_from_vector(xq)
    r_stat = rois.roi_set_from_vector(xq_stat)
    (out / "r_eff.txt").write_text("\n".join(str(i) for i in sorted(r_eff.ids)) + "\n")
    (out / "r_stat.txt").write_text("\n".join(str(i) for i in sorted(r_stat.ids)) + "\n")
    set_rows = []
    for name, result in (
        ("intersection", rois.roi_set_algebra(r_eff, r_stat, "intersection")),
        ("union", rois.roi_set_algebra(r_eff, r_stat, "union")),
        ("eff_only", rois.roi_set_algebra(r_eff, r_stat, "difference")),
        ("stat_only", rois.roi_set_algebra(r_stat, r_eff, "difference")),
    ):
        set_rows.append([name, ";".join(str(i) for i in sorted(result.ids))])
    fileio.write_csv(out / "sets.csv", ["set", "region_ids"], set_rows)
    fileio.write_meta(out / "sets.csv", meta)


# -------------------------------------------------------- stage: train-licol

def _subject_features(ctx: PipelineContext, atlas: Atlas, active: rois.RoiSet):
    """Patient-wise ROI vectors for every subject's rGM and each cGM."""
    real_rows, cf_rows = [], []
    class_of = ctx.class_index()
    for row in ctx.load_manifest():
        sid = row["subject_id"]
        rgm = ctx.load_density(f"{sid}_rgm.v3d")
        vec = rois.patient_rois(rgm, atlas, active, scenario=ctx.cfg.scenario)
        real_rows.append({"sid": sid, "label": row["label"], "y": class_of[row["label"]],
                          "age": float(row["age"]), "split": row["split"], "x": vec.values})
        for target in ctx.cf_targets(row["label"]):
            cgm = ctx.load_density(f"{sid}_to_{target}_cgm.v3d")
            cvec = rois.patient_rois(cgm, atlas, active, scenario=ctx.cfg.scenario)
            cf_rows.append({"sid": sid, "label": target, "y": class_of[target],
                            "age": float(row["age"]), "split": row["split"], "x": cvec.values})
    return real_rows, cf_rows


def _licol_cfg(cfg: RunConfig, seed_shift: int = 0) -> licol.LiCoLTrainConfig:
    return licol.LiCoLTrainConfig(lr=cfg.licol_lr, momentum=cfg.licol_momentum,
                                  steps=cfg.licol_steps, seed=cfg.seed + seed_shift,
                                  embed_dim=cfg.embed_dim)


def _report_from_probs(probs: np.ndarray, ys: np.ndarray, n_classes: int) -> metrics.MetricsReport:
    if n_classes == 2:
        return metrics.binary_metrics(probs[:, 1], ys)
    pred = probs.argmax(axis=1)
    per_class = []
    for c in range(n_classes):
        rep = metrics.binary_metrics((pred == c).astype(float), (ys == c).astype(int))
        per_class.append(rep)
    return metrics.MetricsReport(
        auc=metrics.macro_ovr_auc(probs, ys),
        accuracy=float((pred == ys).mean()),
        sensitivity=float(np.mean([r.sensitivity for r in per_class])),
        specificity=float(np.mean([r.specificity for r in per_class])),
        precision=float(np.mean([r.precision for r in per_class])),
        recall=float(np.mean([r.recall for r in per_class])),
    )


def stage_train_licol(ctx: PipelineContext) -> None:
    ctx.require("rois", "manipulate")
    cfg = ctx.cfg
    atlas = ctx.load_atlas()
    xq = ctx.load_xq()
    active = rois.roi_set_from_vector(xq)
    real_rows, cf_rows = _subject_features(ctx, atlas, active)
    train_ids = {r["sid"] for r in real_rows if r["split"] == "train"}
    test_ids = {r["sid"] for r in real_rows if r["split"] == "test"}
    train_rows = [(r["sid"], r["y"], r["x"]) for r in real_rows if r["split"] == "train"]
    train_rows += [(r["sid"], r["y"], r["x"]) for r in cf_rows if r["sid"] in train_ids]
    val_rows = [(r["sid"], r["y"], r["x"]) for r in real_rows if r["split"] == "val"]
    n_classes = len(ctx.scenario())
    params, log = licol.train_licol(xq.values, train_rows, n_classes, _licol_cfg(cfg),
                                    val_rows=val_rows, query_provenance=sorted(train_ids),
                                    test_ids=sorted(test_ids))
    out = ctx.dir("licol")
    fileio.write_ckpt(out / "licol.ckpt",
                      {"w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
                       "head_w": params.head_w, "head_b": params.head_b})
    fileio.write_meta(out / "licol.ckpt", ctx.provenance(
        "train-licol", embed_dim=str(cfg.embed_dim),
        attention_core_params=str(params.attention_core_param_count()),
        query_subjects=";".join(sorted(train_ids))))
    fileio.write_csv(out / "train_log.csv", ["step", "train_ce", "val_auc"],
                     [[s, repr(l), repr(a)] for s, l, a in log])
    test_rows = [r for r in real_rows if r["split"] == "test"]
    probs = np.stack([licol.forward(params, xq.values, r["x"]) for r in test_rows])
    ys = np.array([r["y"] for r in test_rows])
    rep = _report_from_probs(probs, ys, n_classes)
    fileio.write_csv(out / "final_metrics.csv", ["metric", "value"],
                     [[name, repr(getattr(rep, name))] for name in metrics.MetricsReport.FIELDS])


def _load_licol_params(ctx: PipelineContext) -> licol.LiCoLParams:
    raw = fileio.read_ckpt(ctx.dir("licol") / "licol.ckpt")
    return licol.LiCoLParams(w_q=raw["w_q"].astype(np.float64),
                             w_k=raw["w_k"].astype(np.float64),
                             w_v=raw["w_v"].astype(np.float64),
                             head_w=raw["head_w"].astype(np.float64),
                             head_b=raw["head_b"].astype(np.float64))


def stage_relatedness(ctx: PipelineContext) -> None:
    ctx.require("train-licol")
    atlas = ctx.load_atlas()
    xq = ctx.load_xq()
    active = rois.roi_set_from_vector(xq)
    params = _load_licol_params(ctx)
    real_rows, _ = _subject_features(ctx, atlas, active)
    out = ctx.dir("licol")
    header = ["region_id", "region_name", "raw_index", "normalized_index"]

    def write_report(path, report):
        fileio.write_csv(path, header,
                         [[rid, atlas.region_names[rid - 1], repr(float(raw)), repr(float(norm))]
                          for rid, raw, norm in zip(range(1, atlas.n_regions + 1),
                                                    report.raw, report.normalized)])
        fileio.write_meta(path, ctx.provenance("relatedness", tag=report.tag,
                                               scenario=ctx.cfg.scenario))

    for stage in ctx.scenario():
        members = [r["x"] for r in real_rows if r["split"] == "test" and r["label"] == stage]
        if not members:
            continue
        report = licol.ad_relatedness(params, xq.values, members, tag=f"group_{stage}",
                                      scenario=ctx.cfg.scenario)
        write_report(out / f"relatedness_group_{stage}.csv", report)
        for r in [r for r in real_rows if r["split"] == "test" and r["label"] == stage][:2]:
            individual = licol.ad_relatedness(params, xq.values, r["x"], tag=r["sid"],
                                              scenario=ctx.cfg.scenario)
            write_report(out / f"relatedness_{r['sid']}.csv", individual)


# -------------------------------------------------------------- stage: eval

def _fold_pipeline(ctx: PipelineContext, atlas: Atlas, real_rows, cf_rows, alpha: int):
    """Closure for kfold_run: rebuilds query + features + LiCoL per fold."""
    cfg = ctx.cfg
    n_classes = len(ctx.scenario())
    rgm_cache = {r["sid"]: ctx.load_density(f"{r['sid']}_rgm.v3d") for r in real_rows}
    cgm_cache = {(r["sid"], r["label"]): ctx.load_density(f"{r['sid']}_to_{r['label']}_cgm.v3d")
                 for r in cf_rows}
    label_of = {r["sid"]: r["label"] for r in real_rows}

    def run_fold(fold_idx: int, train_ids: list, test_ids: list):
        train_set = set(train_ids)
        if len(ctx.scenario()) == 2:
            pairs = []
            for (sid, target), cgm in sorted(cgm_cache.items()):
                if sid in train_set:
                    pairs.append((rgm_cache[sid].volume, cgm.volume))
            effect = density_mod.ad_effect_map(pairs, cfg.percentile_p, atlas.mask)
        else:
            maps = [rgm_cache[sid] for sid in sorted(train_set)]
            maps += [cgm for (sid, _), cgm in sorted(cgm_cache.items()) if sid in train_set]
            effect = density_mod.multi_class_effect_map(maps, cfg.percentile_p, atlas.mask,
                                                        seed=cfg.seed + fold_idx)
        xq = rois.ad_effect_rois(effect, atlas, alpha, scenario=cfg.scenario,
                                 full_region_norm=cfg.roi_full_region_norm)
        active = rois.roi_set_from_vector(xq)
        class_of = ctx.class_index()

        def features(sid, density_map):
            return rois.patient_rois(density_map, atlas, active).values

        train_rows = [(sid, class_of[label_of[sid]], features(sid, rgm_cache[sid]))
                      for sid in sorted(train_set)]
        train_rows += [(sid, class_of[target], features(sid, cgm))
                       for (sid, target), cgm in sorted(cgm_cache.items()) if sid in train_set]
        params, _ = licol.train_licol(xq.values, train_rows, n_classes,
                                      _licol_cfg(cfg, seed_shift=fold_idx),
                                      query_provenance=sorted(train_set),
                                      test_ids=list(test_ids))
        test_feats = np.stack([features(sid, rgm_cache[sid]) for sid in test_ids])
        probs = np.stack([licol.forward(params, xq.values, f) for f in test_feats])
        ys = np.array([class_of[label_of[sid]] for sid in test_ids])
        rep = _report_from_probs(probs, ys, n_classes)
        # reference linear model on the same features
        base_xs = np.stack([row[2] for row in train_rows])
        base_ys = np.array([row[1] for row in train_rows])
        wb = metrics.train_logistic_regression(base_xs, base_ys, n_classes,
                                               seed=cfg.seed + fold_idx)
        base_probs = metrics.logistic_regression_predict(wb, test_feats)
        base_rep = _report_from_probs(base_probs, ys, n_classes)
        provenance = {"query_ids": sorted(train_set), "train_ids": sorted(train_set)}
        return (rep, base_rep), provenance

    return run_fold


def _ncc_entries(ctx: PipelineContext):
    """Match held-out counterfactual maps with planted progression maps."""
    spec = ctx.phantom_spec()
    atlas = ctx.load_atlas()
    cf_dir = ctx.dir("cf")
    entries, rows = [], []
    for row in ctx.load_manifest():
        if row["split"] == "train":
            continue
        sid = row["subject_id"]
        seed = int(sid[1:])
        for target in ctx.cf_targets(row["label"]):
            cf_vol, _ = fileio.read_v3d(_record_paths(cf_dir, sid, target)["map"])
            pair = make_longitudinal_pair(spec, atlas, seed, row["label"], target)
            gt = pseudo_ground_truth_map(pair)
            from .volume import resample_trilinear
            gt_small = resample_trilinear(gt, spec.input_dims)
            entries.append((row["label"], target, cf_vol.data, gt_small.data))
            rows.append([sid, row["label"], target,
                         repr(metrics.ncc(cf_vol.data, gt_small.data))])
    return entries, rows


def stage_eval(ctx: PipelineContext) -> None:
    ctx.require("rois", "train-licol")
    cfg = ctx.cfg
    atlas = ctx.load_atlas()
    alpha = _resolve_alpha(cfg, atlas)
    xq_full = ctx.load_xq()
    active = rois.roi_set_from_vector(xq_full)
    real_rows, cf_rows = _subject_features(ctx, atlas, active)
    out = ctx.dir("eval")

    # five-fold cross-validation with per-fold artifact rebuilding
    plan = metrics.make_fold_plan([r["sid"] for r in real_rows],
                                  [r["label"] for r in real_rows],
                                  k=cfg.k_folds, seed=cfg.seed)
    results = metrics.kfold_run(plan, _fold_pipeline(ctx, atlas, real_rows, cf_rows, alpha))
    fold_rows = []
    licol_reports, base_reports = [], []
    for i, ((rep, base_rep), _prov) in enumerate(results):
        licol_reports.append(rep)
        base_reports.append(base_rep)
        fold_rows.append([i, "licol"] + [repr(v) for v in rep.as_row()])
        fold_rows.append([i, "logreg"] + [repr(v) for v in base_rep.as_row()])
    fileio.write_csv(out / "kfold_metrics.csv",
                     ["fold", "model"] + list(metrics.MetricsReport.FIELDS), fold_rows)
    summary_rows = []
    for name, reports in (("licol", licol_reports), ("logreg", base_reports)):
        agg = metrics.aggregate_reports(reports)
        for metric_name, (mean, std) in agg.items():
            summary_rows.append([name, metric_name, repr(mean), repr(std)])
    licol_aucs = [r.auc for r in licol_reports]
    base_aucs = [r.auc for r in base_reports]
    try:
        from .stats import wilcoxon_signed_rank
        p_wilcoxon = wilcoxon_signed_rank(licol_aucs, base_aucs)
        summary_rows.append(["comparison", "wilcoxon_auc_p", repr(float(p_wilcoxon)), ""])
    except Exception as exc:  # AllTies or too few pairs
        summary_rows.append(["comparison", "wilcoxon_auc_p", "n/a", str(exc)])
    fileio.write_csv(out / "kfold_summary.csv", ["model", "metric", "mean", "std"], summary_rows)
    fileio.write_meta(out / "kfold_summary.csv", ctx.provenance("eval", k=str(cfg.k_folds)))

    # counterfactual-map fidelity against planted progression
    entries, ncc_rows = _ncc_entries(ctx)
    fileio.write_csv(out / "ncc.csv",
                     ["subject_id", "source_label", "target_label", "ncc"], ncc_rows)
    direction = metrics.ncc_directional(entries)
    fileio.write_csv(out / "ncc_summary.csv", ["group", "mean", "std", "n"],
                     [[g, repr(v[0]), repr(v[1]), v[2]] for g, v in direction.items()])
    fileio.write_meta(out / "ncc_summary.csv", ctx.provenance("eval", population="held-out"))

    # age-stratified augmentation experiment (confounded cohorts only)
    if cfg.confound_label:
        strata = ((55.0, 70.0), (70.0, 80.0), (80.0, 95.0))
        study_real = [(r["sid"], r["age"], r["y"], r["x"]) for r in real_rows]
        study_cf = [(r["sid"], r["age"], r["y"], r["x"]) for r in cf_rows]
        n_classes = len(ctx.scenario())

        def licol_fn(xs, ys, seed):
            rows = [(f"r{i}", int(y), x) for i, (x, y) in enumerate(zip(xs, ys))]
            params, _ = licol.train_licol(xq_full.values, rows, n_classes,
                                          _licol_cfg(cfg, seed_shift=seed))
            def predict(test_xs):
                return np.stack([licol.forward(params, xq_full.values, x) for x in test_xs])
            return predict

        study = metrics.age_stratified_augmentation_study(
            study_real, study_cf, xq_full.values, n_classes, strata,
            seeds=list(range(cfg.study_seeds)), licol_fn=licol_fn)
        fileio.write_csv(out / "age_study.csv",
                         ["seed", "stratum", "n_test", "precision_base", "recall_base",
                          "precision_aug", "recall_aug"],
                         [[s.seed, s.stratum, s.n_test, repr(s.precision_base),
                           repr(s.recall_base), repr(s.precision_aug), repr(s.recall_aug)]
                          for s in study])
        fileio.write_meta(out / "age_study.csv", ctx.provenance("eval"))

    # plain-text summary block
    lines = [f"scenario {cfg.scenario}", f"config_hash {ctx.cfg_hash}"]
    for name, reports in (("licol", licol_reports), ("logreg", base_reports)):
        agg = metrics.aggregate_reports(reports)
        mean_auc, std_auc = agg["auc"]
        mean_acc, std_acc = agg["accuracy"]
        lines.append(f"{name} auc {mean_auc:.4f}+/-{std_auc:.4f} "
                     f"accuracy {mean_acc:.4f}+/-{std_acc:.4f}")
    for group, (mean, std, n) in direction.items():
        lines.append(f"ncc {group} {mean:.4f}+/-{std:.4f} n={n}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ report

def emit_report(ctx: PipelineContext) -> None:
    """Aggregate the run's outputs into report/ (tables + plot data)."""
    ctx.require(*STAGES)
    out = ctx.dir("report")
    import shutil
    copies = [
        ("eval/kfold_metrics.csv", "metrics_per_fold.csv"),
        ("eval/kfold_summary.csv", "metrics_summary.csv"),
        ("eval/ncc.csv", "ncc_per_record.csv"),
        ("eval/ncc_summary.csv", "ncc_summary.csv"),
        ("rois/xq_effect.csv", "rois_effect.csv"),
        ("rois/xq_stat.csv", "rois_statistical.csv"),
        ("rois/sets.csv", "rois_sets.csv"),
        ("cmg/loss_log.csv", "loss_curves.csv"),
        ("clf/train_log.csv", "classifier_training.csv"),
    ]
    for src, dst in copies:
        path = ctx.root / src
        if not path.exists():
            raise MissingStage(f"missing artifact {src}")
        shutil.copyfile(path, out / dst)
    for path in sorted(ctx.dir("licol").glob("relatedness_*.csv")):
        shutil.copyfile(path, out / path.name)
    if (ctx.root / "eval/age_study.csv").exists():
        shutil.copyfile(ctx.root / "eval/age_study.csv", out / "age_study.csv")
    shutil.copyfile(ctx.root / "eval/summary.txt", out / "summary.txt")


# -------------------------------------------------------------------- runner

_STAGE_FNS = {
    "synth": stage_synth,
    "train-clf": stage_train_clf,
    "train-cmg": stage_train_cmg,
    "gen-cf": stage_gen_cf,
    "manipulate": stage_manipulate,
    "effect-map": stage_effect_map,
    "stat-map": stage_stat_map,
    "rois": stage_rois,
    "train-licol": stage_train_licol,
    "relatedness": stage_relatedness,
    "eval": stage_eval,
}


class StageError(Exception):
    """Carries the name and index of the failed stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.index = STAGES.index(stage)
        self.cause = cause


def run_stage(ctx: PipelineContext, stage: str, force: bool = False) -> bool:
    """Run one stage unless its stamp is current. Returns True if executed."""
    if not force and ctx.is_done(stage):
        return False
    try:
        _STAGE_FNS[stage](ctx)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    ctx.mark_done(stage)
    return True


def run_pipeline(cfg: RunConfig, outdir, force: bool = False, log=print) -> None:
    """Execute all stages in order, materializing every artifact."""
    ctx = PipelineContext(cfg, outdir)
    ctx.root.mkdir(parents=True, exist_ok=True)
    (ctx.root / "config.resolved").write_text(ctx.cfg_text)
    for stage in STAGES:
        executed = run_stage(ctx, stage, force=force)
        log(f"[{'run ' if executed else 'skip'}] {stage}")
