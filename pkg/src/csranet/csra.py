"""Class-specific residual attention (CSRA) head.

For a feature map with locations ``x_k`` and a classifier row ``m_i``:

* scores ``s_ik = m_i . x_k``
* attention ``att_i = softmax_k(T * s_ik)`` (one-hot at the argmax when
  ``T`` is infinite)
* ``g`` is the spatial mean of ``x_k`` and ``a_i = sum_k att_ik x_k``
* ``logit_i = m_i . (g + lam * a_i) + b_i``

Several heads with different ``(T, lam)`` share the classifier and their
logits are averaged. Since ``m_i . g`` is the mean score and
``m_i . a_i = sum_k att_ik s_ik``, the head never materializes ``a_i``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

INF = math.inf


@dataclass(frozen=True)
class AttentionHeadConfig:
    temperature: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        t = float(self.temperature)
        if math.isnan(t) or t <= 0:
            raise ValueError(f"temperature must be > 0 or INF, got {self.temperature}")
        if not (self.lam >= 0) or math.isinf(self.lam):
            raise ValueError(f"lambda must be a finite non-negative real, got {self.lam}")
        object.__setattr__(self, "temperature", t)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def is_max(self) -> bool:
        return math.isinf(self.temperature)

    def to_dict(self) -> dict:
        return {"temperature": "inf" if self.is_max else self.temperature, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionHeadConfig":
        unknown = set(d) - {"temperature", "lambda"}
        if unknown:
            raise ValueError(f"unknown head keys: {sorted(unknown)}")
        t = d.get("temperature", 1.0)
        if isinstance(t, str):
            if t.lower() not in ("inf", "infinity"):
                raise ValueError(f"temperature must be a number or 'inf', got {t!r}")
            t = INF
        return cls(t, d.get("lambda", 0.1))


def default_heads(lam: float = 0.1) -> tuple[AttentionHeadConfig, ...]:
    return tuple(AttentionHeadConfig(t, lam) for t in (1.0, 2.0, 4.0, INF))


def _batched(features) -> tuple[Tensor, bool]:
    x = T.as_tensor(features)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"feature map must be d x h x w or N x d x h x w, got {x.shape}")
    return x, False


def class_score_map(features, classifier) -> Tensor:
    """Per-class, per-location scores ``m_i . x_k``; shape ``[N x] C x h x w``."""
    x, single = _batched(features)
    m = T.as_tensor(classifier)
    n, d, h, w = x.shape
    if m.ndim != 2 or m.shape[1] != d:
        raise ValueError(f"classifier {m.shape} does not match feature dimensionality d={d}")
    s = T.matmul(m, T.reshape(x, (n, d, h * w)))
    s = T.reshape(s, (n, m.shape[0], h, w))
    return T.reshape(s, s.shape[1:]) if single else s


def _flat_attention(scores: Tensor, temperature: float) -> Tensor:
    """Attention over the last axis of ``scores``."""
    if math.isinf(temperature):
        arg = scores.data.argmax(axis=-1)
        T.note_kink(arg)
        onehot = np.zeros(scores.shape)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        return Tensor(onehot)
    return T.softmax(T.mul(scores, temperature), axis=-1)


def spatial_attention(scores, temperature: float) -> Tensor:
    """Attention weights over the trailing ``h x w`` axes of ``scores``.

    Finite temperature gives a softmax of ``temperature * scores``; infinite
    temperature puts weight 1 on the maximum (lowest row-major index on ties).
    The one-hot case is returned as a constant.
    """
    s = T.as_tensor(scores)
    if s.ndim < 2:
        raise ValueError("scores need at least two (spatial) axes")
    lead, (h, w) = s.shape[:-2], s.shape[-2:]
    att = _flat_attention(T.reshape(s, lead + (h * w,)), temperature)
    return T.reshape(att, lead + (h, w))


def attended_features(features, classifier, head: AttentionHeadConfig) -> np.ndarray:
    """Class-specific features ``a_i``; shape ``[N x] C x d``. Forward only."""
    x, single = _batched(features)
    att = spatial_attention(class_score_map(x, classifier), head.temperature).data
    n, d, h, w = x.shape
    a = att.reshape(n, -1, h * w) @ x.data.reshape(n, d, h * w).transpose(0, 2, 1)
    return a[0] if single else a


def _head_logits(scores: Tensor, head: AttentionHeadConfig) -> Tensor:
    # scores: N x C x L
    logits = T.mean(scores, axis=-1)
    if head.lam == 0:
        return logits
    att = _flat_attention(scores, head.temperature)
    residual = T.tensor_sum(T.mul(att, scores), axis=-1)
    return T.add(logits, T.mul(residual, head.lam))


def _flat_scores(features, classifier) -> tuple[Tensor, bool]:
    x, single = _batched(features)
    s = class_score_map(x, classifier)
    n, c, h, w = s.shape
    return T.reshape(s, (n, c, h * w)), single


def _finish(logits: Tensor, bias, single: bool) -> Tensor:
    if bias is not None:
        b = T.as_tensor(bias)
        if b.shape != (logits.shape[-1],):
            raise ValueError(f"bias {b.shape} does not match {logits.shape[-1]} classes")
        logits = T.add(logits, b)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def csra_single_head(features, classifier, head: AttentionHeadConfig, bias=None) -> Tensor:
    """Logits ``[N x] C`` of one attention head."""
    scores, single = _flat_scores(features, classifier)
    return _finish(_head_logits(scores, head), bias, single)


def fuse_heads(features, classifier, heads: Sequence[AttentionHeadConfig], bias=None) -> Tensor:
    """Arithmetic mean of the per-head logits, then the per-class bias."""
    if not heads:
        raise ValueError("at least one attention head is required")
    scores, single = _flat_scores(features, classifier)
    total = None
    for head in heads:
        logits = _head_logits(scores, head)
        total = logits if total is None else T.add(total, logits)
    if len(heads) > 1:
        total = T.mul(total, 1.0 / len(heads))
    return _finish(total, bias, single)


def predict_labels(logits, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid probabilities and inclusive-threshold decisions (``p >= threshold``)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    probs = T._sigmoid(np.asarray(z, dtype=np.float64))
    return probs, (probs >= threshold).astype(np.int8)


class CSRAHead:
    """Classifier matrix, per-class bias and the head configurations."""

    def __init__(self, num_classes: int, feature_dim: int, heads: Sequence[AttentionHeadConfig], seed: int = 0):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not heads:
            raise ValueError("at least one attention head is required")
        rng = np.random.default_rng(seed)
        self.heads = tuple(heads)
        self.classifier = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(num_classes, feature_dim)),
            requires_grad=True,
            name="head.classifier",
        )
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True, name="head.bias")

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([(self.classifier.name, self.classifier), (self.bias.name, self.bias)])

    def __call__(self, features) -> Tensor:
        return fuse_heads(features, self.classifier, self.heads, self.bias)
