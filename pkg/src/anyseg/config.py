"""Flat ``section.key = value`` configuration files and the dataclasses they populate."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    image_width: int = 64
    image_blocks: int = 2
    image_heads: int = 4
    seg_width: int = 128
    seg_blocks: int = 0
    seg_heads: int = 4
    seg_stem_depth: int = 2
    dec_width: int = 64
    dec_heads: int = 4
    dec_layers: int = 3
    n_queries: int = 8
    mask_pool_class: bool = True
    connector_kind: str = "conv"        # conv | mlp | none
    connector_multiscale: bool = True
    lm_width: int = 64
    lm_blocks: int = 2
    lm_heads: int = 4
    lm_positional: bool = True
    max_len: int = 256
    vocab_size: int = 67
    num_categories: int = 12
    region_points: int = 16
    bias: bool = True

    def __post_init__(self):
        if self.connector_kind not in ("conv", "mlp", "none"):
            raise ConfigError(f"connector_kind must be conv, mlp or none, got {self.connector_kind!r}")
        if self.image_size % 16 or self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by 16 and by the patch size")
        if self.seg_width % 4 or self.dec_width % 4:
            raise ConfigError("seg_width and dec_width must be divisible by 4")


@dataclass
class LossConfig:
    cls_weight: float = 1.0
    mask_weight: float = 1.0
    dice_weight: float = 1.0
    bg_weight: float = 1.0


MASK2FORMER_WEIGHTS = LossConfig(cls_weight=2.0, mask_weight=5.0, dice_weight=5.0, bg_weight=0.1)


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    encoder_lr_ratio: float = 0.1
    weight_decay: float = 0.05
    warmup_ratio: float = 0.03
    clip_norm: float = 1.0
    scale_min: float = 0.1
    scale_max: float = 2.0
    augment: bool = False
    seed: int = 0


# Table-style defaults; step counts and absolute rates are desk-scale.
STAGE_DEFAULTS = {
    1: StageConfig(stage=1, steps=15000, batch_size=8, lr=2e-3, encoder_lr_ratio=0.1,
                   weight_decay=0.05, clip_norm=0.01, scale_min=1.0, scale_max=1.0, augment=True),
    2: StageConfig(stage=2, steps=100, batch_size=16, lr=1e-3, encoder_lr_ratio=1.0,
                   weight_decay=0.0, clip_norm=1.0),
    3: StageConfig(stage=3, steps=1500, batch_size=8, lr=4e-4, encoder_lr_ratio=0.1,
                   weight_decay=0.05, clip_norm=1.0),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=lambda: replace(MASK2FORMER_WEIGHTS))
    stage1: StageConfig = field(default_factory=lambda: replace(STAGE_DEFAULTS[1]))
    stage2: StageConfig = field(default_factory=lambda: replace(STAGE_DEFAULTS[2]))
    stage3: StageConfig = field(default_factory=lambda: replace(STAGE_DEFAULTS[3]))
    oversample_t: float = 0.1

    def stage(self, k: int) -> StageConfig:
        if k not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {k}")
        return getattr(self, f"stage{k}")

    def model_hash(self) -> str:
        return config_hash(self.model)

    def to_text(self) -> str:
        return dump_config(self)


_SECTIONS = ("model", "loss", "stage1", "stage2", "stage3")


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def config_hash(obj) -> str:
    lines = [f"{f.name}={_fmt(getattr(obj, f.name))}" for f in sorted(fields(obj), key=lambda f: f.name)]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def dump_config(cfg: RunConfig) -> str:
    lines = [f"oversample_t = {_fmt(cfg.oversample_t)}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "oversample_t":
            cfg = replace(cfg, oversample_t=float(raw))
            continue
        sec, _, name = key.partition(".")
        if sec not in updates:
            raise ConfigError(f"line {n}: unknown section {sec!r}")
        types = {f.name: f.type for f in fields(getattr(cfg, sec))}
        if name not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            updates[sec][name] = _parse_value(raw, types[name])
        except ValueError as e:
            raise ConfigError(f"line {n}: bad value for {key}: {e}") from e
    for sec, vals in updates.items():
        if vals:
            cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **vals)})
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
