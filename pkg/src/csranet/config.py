"""Training configuration and its TOML file form.

Example file::

    seed = 0
    epochs = 50
    batch_size = 16
    threshold = 0.5
    train_fraction = 0.8
    image_size = 224

    [optimizer]
    head_lr = 0.1
    backbone_lr = 0.01
    momentum = 0.9
    weight_decay = 1e-4

    [backbone]
    block_counts = [3, 4, 6, 3]
    stage_widths = [64, 128, 256, 512]
    stem_channels = 64

    [[heads]]
    temperature = 1
    lambda = 0.1
    [[heads]]
    temperature = "inf"
    lambda = 0.1

    [augment]
    hflip_prob = 0.5
    crop_scale = [0.8, 1.0]

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .csra import AttentionHeadConfig, default_heads
from .data import IMAGENET_MEAN, IMAGENET_STD

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


@dataclass(frozen=True)
class TrainConfig:
    head_lr: float = 0.1
    backbone_lr: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    threshold: float = 0.5
    seed: int = 0
    train_fraction: float = 0.8
    image_size: int = 224
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: tuple[AttentionHeadConfig, ...] = field(default_factory=default_heads)
    hflip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        # lr 0 is allowed so a parameter group can be frozen
        if self.head_lr < 0 or self.backbone_lr < 0 or (self.head_lr == 0 and self.backbone_lr == 0):
            raise ConfigError("learning rates must be non-negative and not both zero")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if not self.heads:
            raise ConfigError("at least one attention head is required")
        if self.image_size < 1:
            raise ConfigError("image_size must be positive")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "threshold": self.threshold,
            "train_fraction": self.train_fraction,
            "image_size": self.image_size,
            "optimizer": {
                "head_lr": self.head_lr,
                "backbone_lr": self.backbone_lr,
                "momentum": self.momentum,
                "weight_decay": self.weight_decay,
            },
            "backbone": self.backbone.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
            "augment": {
                "hflip_prob": self.hflip_prob,
                "crop_scale": list(self.crop_scale),
                "mean": list(self.mean),
                "std": list(self.std),
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        top = {"seed", "epochs", "batch_size", "threshold", "train_fraction", "image_size"}
        sections = {"optimizer", "backbone", "heads", "augment"}
        _reject_unknown(doc, top | sections, "config")
        kwargs = {k: doc[k] for k in top if k in doc}
        opt = doc.get("optimizer", {})
        _reject_unknown(opt, {"head_lr", "backbone_lr", "momentum", "weight_decay"}, "[optimizer]")
        kwargs.update(opt)
        if "backbone" in doc:
            bb = doc["backbone"]
            _reject_unknown(bb, {"block_counts", "stage_widths", "stem_channels", "input_channels"}, "[backbone]")
            try:
                kwargs["backbone"] = BackboneConfig(**bb)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[backbone]: {e}") from None
        if "heads" in doc:
            try:
                kwargs["heads"] = tuple(AttentionHeadConfig.from_dict(h) for h in doc["heads"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[[heads]]: {e}") from None
        aug = doc.get("augment", {})
        _reject_unknown(aug, {"hflip_prob", "crop_scale", "mean", "std"}, "[augment]")
        for key in ("crop_scale", "mean", "std"):
            if key in aug:
                kwargs[key] = tuple(float(v) for v in aug[key])
        if "hflip_prob" in aug:
            kwargs["hflip_prob"] = aug["hflip_prob"]
        return cls(**kwargs)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _reject_unknown(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def load_config(path) -> TrainConfig:
    doc = read_toml(path)
    try:
        return TrainConfig.from_dict(doc)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def desk_train_config(**changes) -> TrainConfig:
    """Small configuration for CPU experiments on 64x64 images."""
    from .backbone import desk_config

    base = TrainConfig(epochs=20, batch_size=8, image_size=64, backbone=desk_config())
    return replace(base, **changes)
