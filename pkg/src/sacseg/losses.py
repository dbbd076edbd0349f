"""Class-balanced multi-resolution cross-entropy and the label pyramid it needs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

RESOLUTION_FACTORS = (1, 2, 4, 8, 8)


@dataclass(frozen=True)
class LossConfig:
    num_classes: int = 6
    epsilon: float = 1.02
    ignore_class: int | None = 0
    stage_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if any(w < 0 for w in self.stage_weights):
            raise ValueError("stage weights must be non-negative")
        if self.epsilon <= 1.0:
            raise ValueError(f"epsilon must exceed 1 so that ln(f + epsilon) > 0 for every "
                             f"frequency f >= 0 (inverse-log-frequency convention), got {self.epsilon}")
        if self.ignore_class is not None and not 0 <= self.ignore_class < self.num_classes:
            raise ValueError("ignore_class must be a valid class id or None")

    @classmethod
    def single_head(cls, **kw) -> "LossConfig":
        """Supervise only the full-resolution output."""
        return cls(stage_weights=(1.0, 0.0, 0.0, 0.0, 0.0), **kw)


def _label_arrays(dataset):
    for item in dataset:
        if isinstance(item, np.ndarray):
            yield item
        else:
            labels = getattr(getattr(item, "image", item), "label_map", None)
            if labels is None:
                raise ValueError("dataset item carries no labels")
            yield labels


def class_frequencies(dataset, num_classes: int, ignore_class: int | None = 0) -> np.ndarray:
    """Share of labelled pixels per class; the ignore class gets 0."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in _label_arrays(dataset):
        labels = np.asarray(labels).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"label ids outside [0, {num_classes})")
        counts += np.bincount(labels, minlength=num_classes)
    if ignore_class is not None:
        counts[ignore_class] = 0
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled pixels to count")
    return counts / total


def class_weights(freqs, epsilon: float = 1.02) -> np.ndarray:
    """w_c = 1 / ln(f_c + epsilon)."""
    f = np.asarray(freqs, dtype=np.float64)
    arg = f + epsilon
    if np.any(arg <= 1.0):
        raise ValueError(f"ln(f + epsilon) must be positive: need f + epsilon > 1 for every class "
                         f"(inverse-log-frequency convention), got epsilon={epsilon}")
    return 1.0 / np.log(arg)


def downsample_labels(labels: np.ndarray, factor: int, num_classes: int,
                      ignore_class: int | None = 0) -> np.ndarray:
    """Majority class per factor x factor block; ties go to the smaller id.

    The ignore class only survives where the whole block is ignored.
    """
    labels = np.asarray(labels)
    squeeze = labels.ndim == 2
    if squeeze:
        labels = labels[None]
    n, h, w = labels.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} labels are not divisible by {factor}")
    if factor == 1:
        out = labels.copy()
    else:
        blocks = labels.reshape(n, h // factor, factor, w // factor, factor)
        counts = np.zeros((num_classes, n, h // factor, w // factor), dtype=np.int32)
        for c in range(num_classes):
            if c != ignore_class:
                counts[c] = (blocks == c).sum(axis=(2, 4))
        out = counts.argmax(axis=0)
        if ignore_class is not None:
            out[counts.sum(axis=0) == 0] = ignore_class
    return out[0] if squeeze else out


def label_pyramid(labels: np.ndarray, factors=RESOLUTION_FACTORS, num_classes: int = 6,
                  ignore_class: int | None = 0) -> list[np.ndarray]:
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"label map {h}x{w} must be divisible by 8")
    cache = {}
    for f in factors:
        if f not in cache:
            cache[f] = downsample_labels(labels, f, num_classes, ignore_class)
    return [cache[f] for f in factors]


def _target_weights(labels: np.ndarray, weights: np.ndarray, num_classes: int,
                    ignore_class: int | None, dtype) -> np.ndarray:
    """(N, C, H, W) array holding w_c at the true class of each supervised pixel."""
    n, h, w = labels.shape
    out = np.zeros((n, num_classes, h, w), dtype=dtype)
    for c in range(num_classes):
        if c != ignore_class:
            out[:, c] = (labels == c) * weights[c]
    return out


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights, cfg: LossConfig) -> Tensor:
    """Sum over pixels of -w_c log p_c, divided by N * H * W."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if c != cfg.num_classes:
        raise ShapeError(f"logits have {c} classes, loss expects {cfg.num_classes}")
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label ids outside [0, {c})")
    target = _target_weights(labels, np.asarray(weights, dtype=np.float64), c, cfg.ignore_class,
                             logits.dtype)
    logp = ops.log_softmax(logits, axis=1)
    return ops.mul(ops.sum(ops.mul(logp, Tensor(target))), -1.0 / (n * h * w))


def multi_layer_loss(stage_logits, pyramid, weights, cfg: LossConfig) -> Tensor:
    """Stage-weighted sum of per-level weighted cross-entropies.

    ``stage_logits`` and ``pyramid`` are ordered from full resolution down;
    stages with weight 0 may pass ``None`` logits.
    """
    if len(stage_logits) != len(cfg.stage_weights) or len(pyramid) != len(cfg.stage_weights):
        raise ShapeError(f"need {len(cfg.stage_weights)} logits and label levels, "
                         f"got {len(stage_logits)} and {len(pyramid)}")
    total = None
    for logits, labels, sw in zip(stage_logits, pyramid, cfg.stage_weights):
        if sw == 0:
            continue
        if logits is None:
            raise ValueError("a stage with non-zero weight has no logits")
        term = weighted_cross_entropy(logits, labels, weights, cfg)
        if sw != 1:
            term = ops.mul(term, float(sw))
        total = term if total is None else total + term
    if total is None:
        dtype = next((t.dtype for t in stage_logits if t is not None), np.float64)
        total = Tensor(np.zeros((), dtype=dtype))
    return total

