"""Dataclass configs and the YAML loader/merger used by every entry point."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

CLASS_NAMES = ("normal", "benign", "malignant")
NUM_CLASSES = 3


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"invalid config value for '{field_name}': {message}")


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    heads: list[int] = field(default_factory=lambda: [2, 4, 8, 8])
    window_size: int = 4
    num_classes: int = NUM_CLASSES
    drop_rate: float = 0.0
    mlp_ratio: float = 4.0
    # "v2": post-norm + scaled cosine attention + continuous position bias
    # "plain": pre-norm dot-product windowed block
    block: str = "v2"
    cpb_hidden: int = 512

    def stage_in_dims(self) -> list[int]:
        """Channel width the blocks of each stage run at: C, 2C, 4C, 8C."""
        c = self.embed_dim
        return [c, 2 * c, 4 * c, 8 * c]

    def stage_out_dims(self) -> list[int]:
        c = self.embed_dim
        return [2 * c, 4 * c, 8 * c, 8 * c]

    def stage_in_sizes(self) -> list[int]:
        g = self.image_size // self.patch_size
        return [g, g // 2, g // 4, g // 8]

    def stage_out_sizes(self) -> list[int]:
        g = self.image_size // self.patch_size
        return [g // 2, g // 4, g // 8, g // 8]

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "embed_dim", "window_size", "num_classes", "cpb_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size", f"{self.image_size} not divisible by patch_size {self.patch_size}")
        if (self.image_size // self.patch_size) % 8:
            raise ConfigError("image_size", "image_size / patch_size must be divisible by 8")
        if len(self.depths) != 4 or any(d < 0 for d in self.depths):
            raise ConfigError("depths", "need 4 non-negative block counts")
        if len(self.heads) != 4 or any(h < 1 for h in self.heads):
            raise ConfigError("heads", "need 4 positive head counts")
        for i, (h, c_in, c_out) in enumerate(zip(self.heads, self.stage_in_dims(), self.stage_out_dims())):
            if c_in % h or c_out % h:
                raise ConfigError("heads", f"stage {i + 1}: {h} heads do not divide width {c_in}/{c_out}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate", "must lie in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio", "must be positive")
        if self.block not in ("v2", "plain"):
            raise ConfigError("block", f"unknown block type {self.block!r}")


@dataclass
class TrainConfig:
    stage: str = "one"
    epochs: int = 30
    batch_size: int = 16
    warmup_epochs: int = 3
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    schedule: str = "cosine"
    seed: int = 0
    cag_enabled: bool = False
    alpha: float = 1e-3
    grad_clip: float | None = None
    augment: bool = True
    randaugment_n: int = 2
    randaugment_m: float = 5.0
    amp: bool = False  # reserved; must stay off

    def validate(self) -> None:
        if self.stage not in ("one", "two"):
            raise ConfigError("stage", f"expected 'one' or 'two', got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs")
        if self.base_lr < 0:
            raise ConfigError("base_lr", "must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.schedule != "cosine":
            raise ConfigError("schedule", "only 'cosine' is supported")
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be positive, got {self.alpha}")
        if self.stage == "one" and self.cag_enabled:
            raise ConfigError("cag_enabled", "stage one trains without the auxiliary stage losses")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be positive when set")
        if self.randaugment_n < 0:
            raise ConfigError("randaugment_n", "must be >= 0")
        if not 0 <= self.randaugment_m <= 10:
            raise ConfigError("randaugment_m", "must lie in [0, 10]")
        if self.amp:
            raise ConfigError("amp", "mixed precision is not supported")


def default_stage_one() -> TrainConfig:
    # desk-scale analog of the 50/5 epoch, 3e-4, wd 0.05 recipe
    return TrainConfig(stage="one", epochs=30, batch_size=16, warmup_epochs=3,
                       base_lr=3e-4, weight_decay=0.05, cag_enabled=False)


def default_stage_two() -> TrainConfig:
    # desk-scale analog of the 10/2 epoch, 3e-5, wd 1e-8 refinement
    return TrainConfig(stage="two", epochs=10, batch_size=16, warmup_epochs=2,
                       base_lr=3e-5, weight_decay=1e-8, cag_enabled=True)


@dataclass
class DataConfig:
    manifest: str | None = None
    segmenter: str = "oracle"
    mask_dir: str | None = None
    fallback_size: int | None = None  # None -> image_size // 2 (128 px at 256 px)

    def validate(self) -> None:
        if self.segmenter not in ("oracle", "precomputed", "center"):
            raise ConfigError("segmenter", f"unknown segmenter {self.segmenter!r}")
        if self.segmenter == "precomputed" and not self.mask_dir:
            raise ConfigError("mask_dir", "required for the precomputed segmenter")
        if self.fallback_size is not None and self.fallback_size < 1:
            raise ConfigError("fallback_size", "must be >= 1")


@dataclass(frozen=True)
class AblationVariant:
    name: str
    wib: bool
    lrb: bool
    ms_laem: bool
    cag: bool


VARIANTS = {
    "M1": AblationVariant("M1", True, False, False, False),
    "M2": AblationVariant("M2", False, True, False, False),
    "M3": AblationVariant("M3", True, True, False, False),
    "M4": AblationVariant("M4", True, True, True, False),
    "M5": AblationVariant("M5", True, True, True, True),
}


def get_variant(name: str) -> AblationVariant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError("variant", f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: TrainConfig = field(default_factory=default_stage_one)
    stage2: TrainConfig = field(default_factory=default_stage_two)
    variant: str = "M5"
    laem_count: int = 4
    laem_out_proj: bool = True
    seeds: list[int] = field(default_factory=lambda: [0])
    alphas: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    laem_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.stage1.validate()
        self.stage2.validate()
        get_variant(self.variant)
        if not 0 <= self.laem_count <= 4:
            raise ConfigError("laem_count", "must lie in 0..4")
        if self.stage1.stage != "one":
            raise ConfigError("stage1.stage", "must be 'one'")
        if self.stage2.stage != "two":
            raise ConfigError("stage2.stage", "must be 'two'")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        for a in self.alphas:
            if not a > 0:
                raise ConfigError("alpha", f"sweep value {a} must be positive")
        for n in self.laem_counts:
            if not 0 <= n <= 4:
                raise ConfigError("laem_count", f"sweep value {n} outside 0..4")
        fb = self.data.fallback_size
        if fb is not None and fb > self.model.image_size:
            raise ConfigError("fallback_size", "cannot exceed image_size")

    def fallback_size(self) -> int:
        return self.data.fallback_size or max(1, self.model.image_size // 2)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTIONS = {"data": DataConfig, "model": BackboneConfig, "stage1": TrainConfig, "stage2": TrainConfig}


def _typed_build(cls, values: dict[str, Any], prefix: str, base=None):
    obj = copy.deepcopy(base) if base is not None else cls()
    known = {f.name for f in fields(cls)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")
        setattr(obj, key, val)
    return obj


def experiment_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw or {})
    cfg = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            section = raw.pop(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(name, "expected a mapping")
            setattr(cfg, name, _typed_build(cls, section, f"{name}.", getattr(cfg, name)))
    cfg = _typed_build(ExperimentConfig, raw, "", cfg)
    _coerce(cfg)
    cfg.validate()
    return cfg


def _coerce(cfg: ExperimentConfig) -> None:
    # YAML reads "3e-4" as a string; normalize numeric fields by their declared defaults
    for section in (cfg.data, cfg.model, cfg.stage1, cfg.stage2, cfg):
        for f in fields(section):
            val = getattr(section, f.name)
            default = getattr(type(section)(), f.name) if f.name not in _SECTIONS else None
            if isinstance(val, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
                try:
                    setattr(section, f.name, type(default)(float(val)) if isinstance(default, int) else float(val))
                except ValueError:
                    raise ConfigError(f.name, f"expected a number, got {val!r}") from None
    cfg.alphas = [float(a) for a in cfg.alphas]


def load_experiment(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a YAML experiment file and apply dotted-key overrides (flags win)."""
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
    for dotted, val in (overrides or {}).items():
        node = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return experiment_from_dict(raw)


def dump_experiment(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as YAML (so 1e-3, true, [1,2] work)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, val = text.split("=", 1)
    parsed = yaml.safe_load(val)
    if isinstance(parsed, str):
        try:
            parsed = float(parsed)  # YAML 1.1 leaves "1e-3" as a string
        except ValueError:
            pass
    return key.strip(), parsed
