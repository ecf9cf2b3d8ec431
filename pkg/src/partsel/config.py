"""Run configuration: one JSON document, strictly validated.

Every field is checked at load time with an error naming the offending key;
unknown keys are rejected rather than ignored so typos cannot silently fall
back to defaults. A loaded config re-serializes to the same semantic content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """A configuration value failed validation; message names the key."""


RANK_LOSS_MODES = ("margin", "literal")
CONFIDENCE_MODES = ("corrected", "literal")


@dataclass
class AnchorConfig:
    base_sizes: tuple = (16.0, 24.0, 32.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    strides: tuple = (8, 16, 32)

    def validate(self):
        if len(self.base_sizes) != len(self.strides):
            raise ConfigError("model.anchor: base_sizes and strides must have one entry per level")
        if not self.ratios:
            raise ConfigError("model.anchor.ratios: at least one ratio required")
        for name, seq, low in (("base_sizes", self.base_sizes, 0.0), ("ratios", self.ratios, 0.0)):
            for v in seq:
                if not (v > low):
                    raise ConfigError(f"model.anchor.{name}: values must be > {low}, got {v}")
        for s in self.strides:
            if int(s) != s or s < 1:
                raise ConfigError(f"model.anchor.strides: must be positive integers, got {s}")


@dataclass
class ModelConfig:
    levels: int = 3
    stem_channels: tuple = (8, 16)
    channels: tuple = (16, 32, 64)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    m_parts: int = 3
    iou_threshold: float = 0.3
    crop_size: int = 32
    local_dim: int = 32
    head_hidden: int = 64
    no_relation: bool = False
    no_selection: bool = False
    rank_loss: str = "margin"
    confidence: str = "corrected"

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"model.levels: must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"model.channels: expected {self.levels} entries, got {len(self.channels)}")
        if len(self.anchor.base_sizes) != self.levels:
            raise ConfigError(f"model.anchor: expected {self.levels} levels, got {len(self.anchor.base_sizes)}")
        if len(self.stem_channels) < 1:
            raise ConfigError("model.stem_channels: at least one stem block required")
        for key, v in (("m_parts", self.m_parts), ("crop_size", self.crop_size),
                       ("local_dim", self.local_dim), ("head_hidden", self.head_hidden)):
            if int(v) != v or v < 1:
                raise ConfigError(f"model.{key}: must be a positive integer, got {v}")
        if self.crop_size < 2:
            raise ConfigError(f"model.crop_size: must be >= 2, got {self.crop_size}")
        if not (0.0 < self.iou_threshold < 1.0):
            raise ConfigError(f"model.iou_threshold: must be in (0,1), got {self.iou_threshold}")
        if self.rank_loss not in RANK_LOSS_MODES:
            raise ConfigError(f"model.rank_loss: expected one of {RANK_LOSS_MODES}, got {self.rank_loss!r}")
        if self.confidence not in CONFIDENCE_MODES:
            raise ConfigError(f"model.confidence: expected one of {CONFIDENCE_MODES}, got {self.confidence!r}")
        self.anchor.validate()


@dataclass
class TrainingConfig:
    batch_size: int = 8
    epochs: int = 40
    base_lr: float = 0.01
    decay_every: int = 25
    decay_factor: float = 0.1
    seed: int = 0
    augment_hflip: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"training.epochs: must be >= 1, got {self.epochs}")
        if not (self.base_lr > 0):
            raise ConfigError(f"training.base_lr: must be > 0, got {self.base_lr}")
        if self.decay_every < 1:
            raise ConfigError(f"training.decay_every: must be >= 1, got {self.decay_every}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ConfigError(f"training.decay_factor: must be in (0,1], got {self.decay_factor}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"training.seed: must be a non-negative integer, got {self.seed}")


@dataclass
class DataConfig:
    n_samples: int = 2000
    image_size: int = 64
    age_min: float = 12.0
    age_max: float = 216.0
    box_min: int = 14
    box_max: int = 22
    noise_std: float = 0.0
    gender_effect: bool = True
    train_fraction: float = 0.8

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError(f"data.n_samples: must be >= 1, got {self.n_samples}")
        if self.image_size < 8:
            raise ConfigError(f"data.image_size: must be >= 8, got {self.image_size}")
        if not (self.age_min < self.age_max):
            raise ConfigError(f"data.age_min/age_max: need age_min < age_max, got [{self.age_min}, {self.age_max}]")
        if not (2 <= self.box_min <= self.box_max):
            raise ConfigError(f"data.box_min/box_max: need 2 <= box_min <= box_max, got [{self.box_min}, {self.box_max}]")
        if self.box_max > self.image_size:
            raise ConfigError(
                f"data.box_max: informative box ({self.box_max}) does not fit a {self.image_size}px image"
            )
        if self.noise_std < 0:
            raise ConfigError(f"data.noise_std: must be >= 0, got {self.noise_std}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(f"data.train_fraction: must be in (0,1), got {self.train_fraction}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.training.validate()
        self.data.validate()
        return self

    def to_dict(self):
        a = self.model.anchor
        return {
            "model": {
                "levels": self.model.levels,
                "stem_channels": list(self.model.stem_channels),
                "channels": list(self.model.channels),
                "anchor": {
                    "base_sizes": [float(b) for b in a.base_sizes],
                    "ratios": [float(r) for r in a.ratios],
                    "strides": [int(s) for s in a.strides],
                },
                "m_parts": self.model.m_parts,
                "iou_threshold": self.model.iou_threshold,
                "crop_size": self.model.crop_size,
                "local_dim": self.model.local_dim,
                "head_hidden": self.model.head_hidden,
                "no_relation": self.model.no_relation,
                "no_selection": self.model.no_selection,
                "rank_loss": self.model.rank_loss,
                "confidence": self.model.confidence,
            },
            "training": {
                "batch_size": self.training.batch_size,
                "epochs": self.training.epochs,
                "base_lr": self.training.base_lr,
                "decay_every": self.training.decay_every,
                "decay_factor": self.training.decay_factor,
                "seed": self.training.seed,
                "augment_hflip": self.training.augment_hflip,
            },
            "data": {
                "n_samples": self.data.n_samples,
                "image_size": self.data.image_size,
                "age_min": self.data.age_min,
                "age_max": self.data.age_max,
                "box_min": self.data.box_min,
                "box_max": self.data.box_max,
                "noise_std": self.data.noise_std,
                "gender_effect": self.data.gender_effect,
                "train_fraction": self.data.train_fraction,
            },
        }


_BOOL_KEYS = {"no_relation", "no_selection", "gender_effect", "augment_hflip"}
_INT_KEYS = {"levels", "m_parts", "crop_size", "local_dim", "head_hidden", "batch_size",
             "epochs", "decay_every", "seed", "n_samples", "image_size", "box_min", "box_max"}
_STR_KEYS = {"rank_loss", "confidence"}


def _take(section, mapping, key, current):
    if key not in mapping:
        return current
    v = mapping.pop(key)
    where = f"{section}.{key}"
    if key in _BOOL_KEYS:
        if not isinstance(v, bool):
            raise ConfigError(f"{where}: expected a boolean, got {v!r}")
        return v
    if key in _STR_KEYS:
        if not isinstance(v, str):
            raise ConfigError(f"{where}: expected a string, got {v!r}")
        return v
    if key in _INT_KEYS:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{where}: expected an integer, got {v!r}")
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _num_list(section, key, v, kind=float):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{section}.{key}: expected a non-empty list, got {v!r}")
    out = []
    for item in v:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{section}.{key}: expected numbers, got {item!r}")
        out.append(kind(item))
    return tuple(out)


def from_dict(doc):
    """Build a validated RunConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root: expected an object, got {type(doc).__name__}")
    doc = dict(doc)
    cfg = RunConfig()

    msec = doc.pop("model", {})
    if not isinstance(msec, dict):
        raise ConfigError("model: expected an object")
    msec = dict(msec)
    m = cfg.model
    if "stem_channels" in msec:
        m.stem_channels = _num_list("model", "stem_channels", msec.pop("stem_channels"), int)
    if "channels" in msec:
        m.channels = _num_list("model", "channels", msec.pop("channels"), int)
    if "anchor" in msec:
        asec = msec.pop("anchor")
        if not isinstance(asec, dict):
            raise ConfigError("model.anchor: expected an object")
        asec = dict(asec)
        if "base_sizes" in asec:
            m.anchor.base_sizes = _num_list("model.anchor", "base_sizes", asec.pop("base_sizes"))
        if "ratios" in asec:
            m.anchor.ratios = _num_list("model.anchor", "ratios", asec.pop("ratios"))
        if "strides" in asec:
            m.anchor.strides = _num_list("model.anchor", "strides", asec.pop("strides"), int)
        if asec:
            raise ConfigError(f"model.anchor: unknown keys {sorted(asec)}")
    for key in ("levels", "m_parts", "iou_threshold", "crop_size", "local_dim", "head_hidden",
                "no_relation", "no_selection", "rank_loss", "confidence"):
        setattr(m, key, _take("model", msec, key, getattr(m, key)))
    if msec:
        raise ConfigError(f"model: unknown keys {sorted(msec)}")

    tsec = doc.pop("training", {})
    if not isinstance(tsec, dict):
        raise ConfigError("training: expected an object")
    tsec = dict(tsec)
    t = cfg.training
    for key in ("batch_size", "epochs", "base_lr", "decay_every", "decay_factor", "seed", "augment_hflip"):
        setattr(t, key, _take("training", tsec, key, getattr(t, key)))
    if tsec:
        raise ConfigError(f"training: unknown keys {sorted(tsec)}")

    dsec = doc.pop("data", {})
    if not isinstance(dsec, dict):
        raise ConfigError("data: expected an object")
    dsec = dict(dsec)
    d = cfg.data
    for key in ("n_samples", "image_size", "age_min", "age_max", "box_min", "box_max",
                "noise_std", "gender_effect", "train_fraction"):
        setattr(d, key, _take("data", dsec, key, getattr(d, key)))
    if dsec:
        raise ConfigError(f"data: unknown keys {sorted(dsec)}")

    if doc:
        raise ConfigError(f"config root: unknown keys {sorted(doc)}")
    return cfg.validate()


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
