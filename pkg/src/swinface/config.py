"""Dataclass configs, presets and the layered (file + override) loader."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError

MLCA_MODES = ("mlff_ca", "mlff_only", "baseline_top_only")
PHASES = ("pretrain", "multitask", "finetune")
AUGMENT_POLICIES = ("per_category", "flip_only", "full", "none")


@dataclass
class BackboneConfig:
    image_size: int = 112
    patch_size: int = 2
    in_chans: int = 3
    embed_dim: int = 96
    stage_depths: tuple = (2, 2, 6, 2)
    stage_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    absolute_pos_embed: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_heads = tuple(self.stage_heads)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def stage_grids(self) -> tuple:
        return tuple(self.grid_size // 2**i for i in range(len(self.stage_depths)))

    @property
    def stage_dims(self) -> tuple:
        return tuple(self.embed_dim * 2**i for i in range(len(self.stage_depths)))

    @property
    def pyramid_channels(self) -> tuple:
        d = self.stage_dims
        return (d[1], d[2], d[3], d[3])

    @property
    def pyramid_sides(self) -> tuple:
        g = self.stage_grids
        return (g[1], g[2], g[3], g[3])

    def validate(self) -> "BackboneConfig":
        if len(self.stage_depths) != 4 or len(self.stage_heads) != 4:
            raise ConfigError(
                "stage_depths and stage_heads must both have length 4 "
                f"(got {len(self.stage_depths)} and {len(self.stage_heads)})")
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}; "
                "the token grid must be integral")
        side = self.grid_size
        for i in range(1, 4):
            if side % 2:
                raise ConfigError(f"token grid side {side} at stage {i - 1} is odd and cannot be merged")
            side //= 2
        for i, g in enumerate(self.stage_grids):
            if g % self.window_size:
                raise ConfigError(
                    f"window_size {self.window_size} does not divide stage {i} grid side {g}")
        for i, (d, h) in enumerate(zip(self.stage_dims, self.stage_heads)):
            if h <= 0 or d % h:
                raise ConfigError(f"stage {i} width {d} is not divisible by {h} heads")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError("every stage needs at least one block")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must be in [0, 1)")
        return self


@dataclass
class HeadsConfig:
    fused_width: int = 512
    hidden_width: int = 512
    ca_reduction: int = 16
    embedding_size: int = 512
    recognition_bn: bool = True
    mlca_mode: str = "mlff_ca"
    subnets: Optional[list] = None

    def validate(self) -> "HeadsConfig":
        if self.mlca_mode not in MLCA_MODES:
            raise ConfigError(f"mlca_mode must be one of {MLCA_MODES}, got {self.mlca_mode!r}")
        if self.fused_width < 4:
            raise ConfigError("fused_width must be at least the number of pyramid levels (4)")
        if self.ca_reduction < 1 or self.fused_width // self.ca_reduction < 1:
            raise ConfigError("ca_reduction leaves an empty hidden layer")
        return self


@dataclass
class LossConfig:
    scale: float = 64.0
    margin: float = 0.4
    margin_type: str = "cosface"
    sampling_ratio: float = 0.3
    num_classes: Optional[int] = None
    age_sigma: float = 3.0
    prob_clamp: float = 1e-7
    task_weights: dict = field(default_factory=dict)

    def validate(self) -> "LossConfig":
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if not 0 <= self.margin < 1 and self.margin_type == "cosface":
            raise ConfigError("cosface margin must lie in [0, 1)")
        if self.margin_type not in ("cosface", "arcface"):
            raise ConfigError(f"unknown margin_type {self.margin_type!r}")
        if not 0 < self.sampling_ratio <= 1:
            raise ConfigError("sampling_ratio must lie in (0, 1]")
        if self.age_sigma <= 0:
            raise ConfigError("age_sigma must be positive")
        return self


@dataclass
class DataConfig:
    manifests: list = field(default_factory=list)
    per_category: int = 128
    augment: str = "per_category"
    align: bool = False

    def validate(self) -> "DataConfig":
        if self.per_category < 1:
            raise ConfigError("per_category must be >= 1")
        if self.augment not in AUGMENT_POLICIES:
            raise ConfigError(f"augment must be one of {AUGMENT_POLICIES}")
        return self


@dataclass
class TrainConfig:
    phase: str = "multitask"
    total_steps: int = 80000
    epochs: Optional[int] = None
    warmup_steps: int = 8000
    warmup_epochs: Optional[int] = None
    peak_lr: float = 5e-4
    warmup_lr: float = 5e-7
    min_lr: float = 5e-6
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    dtype: str = "float32"
    checkpoint_interval: int = 1000
    keep_last: int = 0
    log_interval: int = 1
    out_dir: str = "runs/default"
    init_checkpoint: Optional[str] = None
    from_scratch: bool = False
    finetune_subnet: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> "TrainConfig":
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if min(self.peak_lr, self.warmup_lr, self.min_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.min_lr > self.peak_lr:
            raise ConfigError("min_lr must not exceed peak_lr")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def resolve_epochs(self, steps_per_epoch: int) -> "TrainConfig":
        """Convert an epoch budget into steps (warmup defaults to 5/40 of the run)."""
        if self.epochs is None:
            return self
        total = self.epochs * steps_per_epoch
        warm_epochs = self.warmup_epochs if self.warmup_epochs is not None else self.epochs * 5 / 40
        warm = int(math.floor(warm_epochs * steps_per_epoch))
        return dataclasses.replace(self, total_steps=total, warmup_steps=min(warm, total),
                                   epochs=None, warmup_epochs=None)


@dataclass
class EvalConfig:
    folds: int = 10
    far_targets: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    batch_size: int = 64

    def __post_init__(self):
        self.far_targets = tuple(self.far_targets)


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.heads.validate()
        self.losses.validate()
        self.data.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {}, "")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = prefix or "<root>"
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, value, name) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "backbone": BackboneConfig,
    "heads": HeadsConfig,
    "losses": LossConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def canonical_config() -> RunConfig:
    return RunConfig()


def tiny_config() -> RunConfig:
    """Desk-scale preset used by the tests and the acceptance runs."""
    return RunConfig(
        backbone=BackboneConfig(image_size=56, patch_size=1, embed_dim=24, stage_depths=(1, 1, 1, 1),
                                stage_heads=(1, 2, 4, 4), window_size=7, drop_path_rate=0.0),
        heads=HeadsConfig(fused_width=128, hidden_width=128, ca_reduction=8, embedding_size=128),
        losses=LossConfig(sampling_ratio=0.5),
        data=DataConfig(per_category=8, augment="flip_only"),
        train=TrainConfig(total_steps=500, warmup_steps=50, peak_lr=2e-3, warmup_lr=5e-7, min_lr=5e-6,
                          checkpoint_interval=100),
        eval=EvalConfig(folds=10, far_targets=(1e-3, 1e-2, 1e-1)),
    )


PRESETS = {"canonical": canonical_config, "tiny": tiny_config}


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "task_weights":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(source: Optional[str] = None, overrides: Optional[list] = None) -> RunConfig:
    """Resolve a preset name or YAML file, then apply ``section.key=value`` overrides.

    A YAML file may name a preset under the top-level ``preset`` key and
    override only the fields it lists.
    """
    tree: dict = {}
    if source is None or source in PRESETS:
        tree = PRESETS[source or "canonical"]().to_dict()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {source}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {source} must hold a mapping")
        preset = loaded.pop("preset", "canonical")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} in {source}")
        tree = _merge(PRESETS[preset]().to_dict(), loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    return RunConfig.from_dict(tree).validate()
