"""Multi-label evaluation: per-class AP, mAP and micro OP / OR / OF1.

AP uses the all-points form: rank items by descending score (stable, ties
keep input order) and average the precision at the rank of every positive.
Classes without positives have no AP; they are flagged and left out of the
mAP. OP / OR / OF1 count individual image-class label slots, and a zero
denominator yields 0 with a warning entry in the report.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

AP_CONVENTION = "all-points"


class UndefinedAPError(ValueError):
    """Raised when AP is requested for a class with no positive items."""


def _binary(a, what: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} must contain only 0/1 entries")
    return arr.astype(np.int64)


def average_precision(scores, truths) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truths = _binary(truths, "truths").ravel()
    if scores.shape != truths.shape:
        raise ValueError(f"scores {scores.shape} and truths {truths.shape} differ in length")
    positives = int(truths.sum())
    if positives == 0:
        raise UndefinedAPError("average precision is undefined without positive items")
    order = np.argsort(-scores, kind="stable")
    hits = truths[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits == 1].sum() / positives)


def per_class_average_precision(scores, truths) -> tuple[np.ndarray, np.ndarray]:
    """AP per column; returns ``(ap, defined)`` with NaN where undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = _binary(truths, "truths")
    if scores.ndim != 2 or scores.shape != truths.shape:
        raise ValueError(f"scores {scores.shape} and truths {truths.shape} must be matching N x C arrays")
    c = scores.shape[1]
    ap = np.full(c, np.nan)
    defined = truths.sum(axis=0) > 0
    for j in np.flatnonzero(defined):
        ap[j] = average_precision(scores[:, j], truths[:, j])
    return ap, defined


def mean_average_precision(scores, truths) -> tuple[float, np.ndarray]:
    ap, defined = per_class_average_precision(scores, truths)
    if not defined.any():
        raise UndefinedAPError("no class has a positive item; mAP is undefined")
    return float(ap[defined].mean()), ap


@dataclass
class OverallMetrics:
    op: float
    or_: float
    of1: float
    tp: int
    predicted_positive: int
    truth_positive: int
    warnings: list[str] = field(default_factory=list)


def overall_metrics(predictions, truths) -> OverallMetrics:
    pred = _binary(predictions, "predictions")
    true = _binary(truths, "truths")
    if pred.shape != true.shape:
        raise ValueError(f"predictions {pred.shape} and truths {true.shape} differ in shape")
    tp = int((pred & true).sum())
    n_pred = int(pred.sum())
    n_true = int(true.sum())
    warnings = []
    if n_pred:
        op = tp / n_pred
    else:
        op = 0.0
        warnings.append("no predicted positives: OP set to 0")
    if n_true:
        or_ = tp / n_true
    else:
        or_ = 0.0
        warnings.append("no ground-truth positives: OR set to 0")
    of1 = 2 * op * or_ / (op + or_) if op + or_ > 0 else 0.0
    return OverallMetrics(op, or_, of1, tp, n_pred, n_true, warnings)


@dataclass
class MetricsReport:
    per_class_ap: np.ndarray
    ap_defined: np.ndarray
    mAP: float
    OP: float
    OR: float
    OF1: float
    tp: int
    predicted_positive: int
    truth_positive: int
    class_names: list[str]
    threshold: float = 0.5
    num_samples: int = 0
    ap_convention: str = AP_CONVENTION
    warnings: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"mAP": self.mAP, "OP": self.OP, "OR": self.OR, "OF1": self.OF1}

    def to_dict(self) -> dict:
        return {
            "ap_convention": self.ap_convention,
            "threshold": self.threshold,
            "num_samples": self.num_samples,
            "mAP": self.mAP,
            "OP": self.OP,
            "OR": self.OR,
            "OF1": self.OF1,
            "tp": self.tp,
            "predicted_positive": self.predicted_positive,
            "truth_positive": self.truth_positive,
            "per_class_ap": {
                name: (float(ap) if ok else None)
                for name, ap, ok in zip(self.class_names, self.per_class_ap, self.ap_defined)
            },
            "warnings": list(self.warnings),
            **self.extra,
        }

    def to_text(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.extra.items()]
        lines += [
            f"ap_convention: {self.ap_convention}",
            f"threshold: {self.threshold}",
            f"num_samples: {self.num_samples}",
            f"mAP: {self.mAP:.6f}",
            f"OP: {self.OP:.6f}",
            f"OR: {self.OR:.6f}",
            f"OF1: {self.OF1:.6f}",
            f"tp: {self.tp}",
            f"predicted_positive: {self.predicted_positive}",
            f"truth_positive: {self.truth_positive}",
        ]
        lines += [f"warning: {w}" for w in self.warnings]
        lines.append("")
        width = max([5] + [len(n) for n in self.class_names])
        lines.append(f"{'class':<{width}}  AP")
        for name, ap, ok in zip(self.class_names, self.per_class_ap, self.ap_defined):
            lines.append(f"{name:<{width}}  {ap:.6f}" if ok else f"{name:<{width}}  undefined (no positives)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "class", "value", "ap_convention"])
        for key in ("mAP", "OP", "OR", "OF1"):
            writer.writerow([key, "", repr(float(getattr(self, key))), self.ap_convention])
        for name, ap, ok in zip(self.class_names, self.per_class_ap, self.ap_defined):
            writer.writerow(["AP", name, repr(float(ap)) if ok else "", self.ap_convention])
        return buf.getvalue()

    def write(self, directory, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text_path = directory / f"{stem}.txt"
        csv_path = directory / f"{stem}.csv"
        text_path.write_text(self.to_text(), encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return text_path, csv_path


def evaluate(
    scores,
    truths,
    predictions=None,
    threshold: float = 0.5,
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    """Full report. ``scores`` rank items for AP; if ``predictions`` is not
    given they are ``scores >= threshold`` (so pass probabilities)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = _binary(truths, "truths")
    if predictions is None:
        predictions = (scores >= threshold).astype(np.int64)
    ap, defined = per_class_average_precision(scores, truths)
    warnings = []
    if not defined.any():
        raise UndefinedAPError("no class has a positive item; mAP is undefined")
    if not defined.all():
        warnings.append(f"{int((~defined).sum())} class(es) without positives excluded from mAP")
    overall = overall_metrics(predictions, truths)
    names = list(class_names) if class_names is not None else [f"class_{j}" for j in range(scores.shape[1])]
    if len(names) != scores.shape[1]:
        raise ValueError(f"{len(names)} class names for {scores.shape[1]} columns")
    return MetricsReport(
        per_class_ap=ap,
        ap_defined=defined,
        mAP=float(ap[defined].mean()),
        OP=overall.op,
        OR=overall.or_,
        OF1=overall.of1,
        tp=overall.tp,
        predicted_positive=overall.predicted_positive,
        truth_positive=overall.truth_positive,
        class_names=names,
        threshold=threshold,
        num_samples=int(scores.shape[0]),
        warnings=warnings + overall.warnings,
    )
