"""Run configuration: typed keys, key=value files, CLI overrides.

Unknown keys are hard errors; every run writes its fully-resolved config
verbatim into the artifact directory so results are diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_SCENARIOS = ("cn-mci", "mci-ad", "cn-ad", "cn-mci-ad")


@dataclass
class RunConfig:
    # scenario / reproducibility
    scenario: str = "cn-ad"
    seed: int = 7
    # phantom cohort
    raw_dim: int = 48
    input_dim: int = 32
    regions: int = 24
    delta: float = 0.3
    noise_std: float = 0.05
    n_per_class: int = 24
    aging_rate: float = 0.0
    confound_label: str = ""
    confound_lo: float = 80.0
    confound_hi: float = 95.0
    confound_keep: float = 0.2
    # preprocessing
    quant_low: float = 0.01
    quant_high: float = 0.99
    smooth_sigma_mm: float = 2.0
    # training
    optimizer: str = "adam"
    clf_lr: float = 0.003
    clf_momentum: float = 0.9
    clf_epochs: int = 40
    batch_size: int = 8
    clf_front_sigma: float = 2.0
    clf_aug_noise: float = 0.25
    clf_aug_shift: float = 0.25
    clf_aug_region: float = 0.4
    # generator training (weights set by the gradient-magnitude balance)
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 0.5
    lambda4: float = 0.5
    lambda5: float = 1.0
    lambda6: float = 10.0
    lambda7: float = 0.5
    l2_squared: bool = False
    cmg_lr_g: float = 0.005
    cmg_lr_d: float = 0.002
    cmg_epochs: int = 20
    cmg_batch_size: int = 4
    cmg_clip_norm: float = 1.0
    # maps and ROIs
    percentile_p: float = 0.99
    stat_p: float = 0.01
    alpha: int = 0                     # 0 = max(4, 1% of median region size)
    roi_full_region_norm: bool = False
    # attention classifier
    embed_dim: int = 512
    licol_lr: float = 0.5
    licol_momentum: float = 0.9
    licol_steps: int = 400
    # evaluation
    k_folds: int = 5
    study_seeds: int = 5

    def validate(self) -> None:
        if self.scenario not in _SCENARIOS:
            raise ConfigError(f"scenario must be one of {_SCENARIOS}, got {self.scenario!r}")
        positives = ("raw_dim", "input_dim", "regions", "n_per_class", "batch_size",
                     "clf_epochs", "cmg_epochs", "embed_dim", "licol_steps", "k_folds",
                     "study_seeds")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.quant_low < self.quant_high <= 1):
            raise ConfigError("need 0 <= quant_low < quant_high <= 1")
        if not (0 < self.percentile_p < 1):
            raise ConfigError("percentile_p must be in (0, 1)")
        if not (0 < self.stat_p < 1):
            raise ConfigError("stat_p must be in (0, 1)")
        for name in ("delta", "noise_std", "aging_rate", "smooth_sigma_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for i in range(1, 8):
            if getattr(self, f"lambda{i}") < 0:
                raise ConfigError(f"lambda{i} must be >= 0")
        if self.confound_label and self.confound_label not in ("CN", "MCI", "AD"):
            raise ConfigError("confound_label must be CN, MCI, or AD")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0 (0 selects the default)")
        if self.input_dim % 8:
            raise ConfigError("input_dim must be divisible by 8 (three pooling stages)")

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, target_type):
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_assignments(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply key=value strings over a base config; unknown keys are errors."""
    cfg = base if base is not None else RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {pair!r}")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value.strip(), types[key]))
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file (optional) then CLI overrides, then validation."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        pairs = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            pairs.append(line)
        cfg = parse_assignments(pairs, cfg)
    cfg = parse_assignments(list(overrides), cfg)
    cfg.validate()
    return cfg
