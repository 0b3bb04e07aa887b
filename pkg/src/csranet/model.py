"""Backbone + CSRA head, and the checkpoint container.

Checkpoints are ``.npz`` archives. Every parameter and buffer is stored
under its dotted name; ``__meta__`` holds a JSON document with the format
version, backbone and head configuration, class names and free-form extras.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig
from .csra import AttentionHeadConfig, CSRAHead
from .tensor import Tensor

CHECKPOINT_FORMAT = "csranet-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class MultiLabelClassifier:
    def __init__(
        self,
        backbone_config: BackboneConfig,
        heads: Sequence[AttentionHeadConfig],
        class_names: Sequence[str],
        seed: int = 0,
    ):
        self.class_names = list(class_names)
        # image_size / mean / std used at training time, restored from checkpoints
        self.preprocessing: dict = {}
        self.backbone = Backbone(backbone_config, seed)
        self.head = CSRAHead(len(self.class_names), backbone_config.feature_dim, heads, seed + 1)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        params = self.backbone.parameters()
        params.update(self.head.parameters())
        return params

    def param_groups(self) -> dict[str, "OrderedDict[str, Tensor]"]:
        head = self.head.parameters()
        backbone = self.backbone.parameters()
        return {"head": head, "backbone": backbone}

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return self.backbone.buffers()

    def features(self, images, training: bool = False) -> Tensor:
        return self.backbone(images, training)

    def __call__(self, images, training: bool = False) -> Tensor:
        return self.head(self.backbone(images, training))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.parameters().items())
        state.update((k, b.copy()) for k, b in self.buffers().items())
        return state

    def load_state_dict(self, state: dict) -> None:
        params, buffers = self.parameters(), self.buffers()
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, target in [*((k, p.data) for k, p in params.items()), *buffers.items()]:
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
            target[...] = value

    def config_dict(self) -> dict:
        return {
            "backbone": self.backbone.config.to_dict(),
            "heads": [h.to_dict() for h in self.head.heads],
            "class_names": self.class_names,
        }


def save_checkpoint(model: MultiLabelClassifier, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION, **model.config_dict(), "extra": extra or {}}
    arrays = dict(model.state_dict())
    arrays["__meta__"] = np.array(json.dumps(meta))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[MultiLabelClassifier, dict]:
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    with archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
        state = {k: archive[k] for k in archive.files if k != "__meta__"}
    model = MultiLabelClassifier(
        BackboneConfig(**meta["backbone"]),
        [AttentionHeadConfig.from_dict(h) for h in meta["heads"]],
        meta["class_names"],
    )
    model.load_state_dict(state)
    model.preprocessing = dict(meta.get("extra", {}))
    return model, meta
