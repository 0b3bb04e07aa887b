"""Loss, grouped momentum SGD, the training loop, evaluation and prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .csra import predict_labels
from .data import (
    DatasetManifest,
    ImageDecodeError,
    load_image,
    load_images,
    preprocess_and_augment,
    sample_rng,
    split_dataset,
)
from .metrics import MetricsReport, evaluate
from .model import MultiLabelClassifier, load_checkpoint, save_checkpoint
from .tensor import GradCheckReport, Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, last_checkpoint: Path | None):
        self.epoch, self.batch, self.last_checkpoint = epoch, batch, last_checkpoint
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint: {last_checkpoint or 'none'}"
        )


def bce_loss(logits: Tensor, truths) -> Tensor:
    return T.bce_with_logits(logits, truths)


class GroupedSGD:
    """Momentum SGD with one learning rate per parameter group.

    ``v <- momentum * v + g + weight_decay * theta``;
    ``theta <- theta - lr_group * v``.
    """

    def __init__(
        self,
        groups: Mapping[str, Mapping[str, Tensor]],
        lrs: Mapping[str, float],
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
    ):
        missing = set(groups) - set(lrs)
        if missing:
            raise ValueError(f"no learning rate for group(s) {sorted(missing)}")
        self.groups = {g: dict(params) for g, params in groups.items()}
        self.lrs = dict(lrs)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for params in self.groups.values() for name, p in params.items()}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        for params in self.groups.values():
            for name, p in params.items():
                if p not in grads:
                    raise KeyError(f"missing gradient for parameter {name!r}")
        for group, params in self.groups.items():
            lr = self.lrs[group]
            for name, p in params.items():
                v = self.velocity[name]
                v *= self.momentum
                v += grads[p]
                if self.weight_decay:
                    v += self.weight_decay * p.data
                if lr:
                    p.data -= lr * v


def make_optimizer(model: MultiLabelClassifier, config: TrainConfig) -> GroupedSGD:
    return GroupedSGD(
        model.param_groups(),
        {"head": config.head_lr, "backbone": config.backbone_lr},
        config.momentum,
        config.weight_decay,
    )


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best_checkpoint: str | None = None
    skipped_images: list[str] = field(default_factory=list)
    train_size: int = 0
    test_size: int = 0

    @property
    def best_epoch(self) -> int:
        """0-based index of the epoch with the highest test mAP (first on ties)."""
        return int(np.argmax([r.mAP for r in self.reports]))

    @property
    def final_report(self) -> MetricsReport:
        return self.reports[-1]

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "epoch_losses": self.epoch_losses,
            "epoch_metrics": [r.to_dict() for r in self.reports],
            "best_epoch": self.best_epoch if self.reports else None,
            "checkpoints": self.checkpoints,
            "best_checkpoint": self.best_checkpoint,
            "skipped_images": self.skipped_images,
            "config": self.config,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def _batch(images: Sequence[np.ndarray], indices, mode: str, config: TrainConfig, epoch: int, size: int) -> np.ndarray:
    out = []
    for i in indices:
        rng = sample_rng(config.seed, epoch, int(i)) if mode == "train" else None
        out.append(
            preprocess_and_augment(
                images[i], mode, size, rng,
                mean=config.mean, std=config.std,
                hflip_prob=config.hflip_prob, crop_scale=config.crop_scale,
            )
        )
    return np.stack(out)


def predict_probabilities(model: MultiLabelClassifier, batch: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode sigmoid probabilities for a stack of preprocessed images."""
    probs = []
    for start in range(0, len(batch), batch_size):
        logits = model(batch[start : start + batch_size], training=False)
        probs.append(predict_labels(logits)[0])
    return np.concatenate(probs) if probs else np.zeros((0, model.num_classes))


def _preprocessed(images, config: TrainConfig, size: int) -> np.ndarray:
    return _batch(images, range(len(images)), "eval", config, 0, size)


def _last(record: RunRecord) -> Path | None:
    return Path(record.checkpoints[-1]) if record.checkpoints else None


def train_model(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir=None,
    eval_batch_size: int = 32,
) -> RunRecord:
    """Seeded split, then ``config.epochs`` passes of SGD with a test evaluation after each.

    With ``out_dir`` set, a checkpoint per epoch, ``best.npz`` and
    ``run_record.json`` are written there.
    """
    train_set, test_set = split_dataset(manifest, config.train_fraction, config.seed)
    names = list(manifest.vocabulary.names)
    train_images, train_kept, skipped_train = load_images(train_set)
    test_images, test_kept, skipped_test = load_images(test_set)
    if not train_images or not test_images:
        raise ValueError("no decodable images on one side of the split")
    train_labels = train_set.labels[train_kept].astype(np.float64)
    test_labels = test_set.labels[test_kept]
    size = config.image_size
    test_batch = _preprocessed(test_images, config, size)

    model = MultiLabelClassifier(config.backbone, config.heads, names, seed=config.seed)
    params = list(model.parameters().values())
    optimizer = make_optimizer(model, config)
    record = RunRecord(
        config=config.to_dict(),
        config_hash=config.hash(),
        seed=config.seed,
        skipped_images=skipped_train + skipped_test,
        train_size=len(train_images),
        test_size=len(test_images),
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    extra = {"image_size": size, "mean": list(config.mean), "std": list(config.std),
             "config_hash": record.config_hash, "seed": config.seed}

    n = len(train_images)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x = _batch(train_images, idx, "train", config, epoch, size)
            logits = model(x, training=True)
            if not np.all(np.isfinite(logits.data)):
                raise TrainingDiverged(epoch, b, _last(record))
            loss = bce_loss(logits, train_labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, _last(record))
            grads = T.backward(loss, params)
            optimizer.step(grads)
            total += value * len(idx)
        record.epoch_losses.append(total / n)

        probs = predict_probabilities(model, test_batch, eval_batch_size)
        report = evaluate(probs, test_labels, threshold=config.threshold, class_names=names)
        report.extra = {"config_hash": record.config_hash, "seed": config.seed, "epoch": epoch}
        record.reports.append(report)
        logger.info(
            "epoch %d loss %.4f mAP %.4f OF1 %.4f", epoch, record.epoch_losses[-1], report.mAP, report.OF1
        )
        if out is not None:
            ckpt = save_checkpoint(model, out / "checkpoints" / f"epoch_{epoch:03d}.npz", {**extra, "epoch": epoch})
            record.checkpoints.append(str(ckpt))
            if record.best_epoch == epoch:
                best = out / "best.npz"
                shutil.copyfile(ckpt, best)
                record.best_checkpoint = str(best)
            record.write(out / "run_record.json")
    return record


def _load_model(checkpoint) -> tuple[MultiLabelClassifier, dict]:
    if isinstance(checkpoint, MultiLabelClassifier):
        return checkpoint, checkpoint.preprocessing
    model, _ = load_checkpoint(checkpoint)
    return model, model.preprocessing


def _preprocessing(extra: dict, image_size: int | None) -> TrainConfig:
    size = image_size or extra.get("image_size")
    if size is None:
        raise ValueError("image_size unknown: pass it explicitly or use a checkpoint that records it")
    kwargs = {"image_size": int(size)}
    if "mean" in extra:
        kwargs["mean"] = tuple(extra["mean"])
        kwargs["std"] = tuple(extra["std"])
    return TrainConfig(**kwargs)


def evaluate_model(
    checkpoint,
    manifest: DatasetManifest,
    threshold: float = 0.5,
    out_dir=None,
    image_size: int | None = None,
    batch_size: int = 32,
) -> MetricsReport:
    """Eval-mode metrics for ``manifest``; ``checkpoint`` is a path or a model."""
    model, extra = _load_model(checkpoint)
    if manifest.vocabulary.names != tuple(model.class_names):
        if len(manifest.vocabulary) != model.num_classes:
            raise ValueError(
                f"class-count mismatch: checkpoint has {model.num_classes}, manifest has {len(manifest.vocabulary)}"
            )
        raise ValueError(f"class names differ: checkpoint {model.class_names}, manifest {list(manifest.vocabulary.names)}")
    prep = _preprocessing(extra, image_size)
    images, kept, skipped = load_images(manifest)
    probs = predict_probabilities(model, _preprocessed(images, prep, prep.image_size), batch_size)
    report = evaluate(probs, manifest.labels[kept], threshold=threshold, class_names=model.class_names)
    report.extra = {k: extra[k] for k in ("config_hash", "seed") if k in extra}
    if skipped:
        report.warnings.append(f"{len(skipped)} undecodable image(s) skipped")
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class PredictionRow:
    image: str
    ok: bool
    probabilities: np.ndarray | None = None
    labels: np.ndarray | None = None
    error: str | None = None


def predict_images(checkpoint, paths: Sequence, threshold: float = 0.5, image_size: int | None = None) -> list[PredictionRow]:
    model, extra = _load_model(checkpoint)
    prep = _preprocessing(extra, image_size)
    rows = []
    for path in paths:
        try:
            image = load_image(path)
        except ImageDecodeError as e:
            logger.warning("%s", e)
            rows.append(PredictionRow(str(path), False, error=str(e)))
            continue
        x = _preprocessed([image], prep, prep.image_size)
        probs, labels = predict_labels(model(x, training=False), threshold)
        rows.append(PredictionRow(str(path), True, probs[0], labels[0]))
    return rows


def write_predictions(rows: Sequence[PredictionRow], class_names: Sequence[str], target, header: Mapping | None = None):
    """CSV ``image,status,p_<class>...,y_<class>...`` after ``# key: value`` lines.

    ``target`` is a path or an open text stream.
    """
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            return write_predictions(rows, class_names, fh, header)
    for k, v in (header or {}).items():
        target.write(f"# {k}: {v}\n")
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(["image", "status", *(f"p_{c}" for c in class_names), *(f"y_{c}" for c in class_names)])
    for r in rows:
        if r.ok:
            writer.writerow([r.image, "ok", *(repr(float(p)) for p in r.probabilities), *(int(y) for y in r.labels)])
        else:
            writer.writerow([r.image, "failed", *([""] * (2 * len(class_names)))])


def check_model_gradients(
    model: MultiLabelClassifier,
    images,
    truths,
    n_samples: int = 50,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    training: bool = True,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Finite-difference check of the full backbone + head + BCE loss.

    BN running buffers are restored afterwards, so the check leaves the
    model untouched. ``floor`` bounds the denominator of the relative error.
    """
    images = np.asarray(images, dtype=np.float64)
    saved = {k: v.copy() for k, v in model.buffers().items()}

    def loss_fn():
        return bce_loss(model(images, training=training), truths)

    try:
        return T.grad_check(loss_fn, list(model.parameters().values()), step, tolerance, n_samples, seed, floor)
    finally:
        for k, v in model.buffers().items():
            v[...] = saved[k]
