"""Confusion-matrix accumulation and mean IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .core import IGNORE, ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]``: pixels with ground truth ``t`` predicted as ``p``."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64)
    truth = np.asarray(truth.cpu() if isinstance(truth, torch.Tensor) else truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValidationError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    C = cm.num_classes
    keep = truth != IGNORE
    t, p = truth[keep], pred[keep]
    if ((t < 0) | (t >= C)).any() or ((p < 0) | (p >= C)).any():
        raise ValidationError(f"class index outside [0, {C})")
    counts = np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(cm.counts + counts)


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with non-zero union; per-class IoU is NaN where undefined.

    The mean is NaN when every class has zero union.
    """
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - inter
    per_class = np.full(cm.num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        return float("nan"), per_class
    return float(per_class[present].mean()), per_class


def format_report(cm: ConfusionMatrix, class_names=None) -> str:
    mean, per_class = miou(cm)
    names = class_names or [f"class_{c}" for c in range(cm.num_classes)]
    width = max(len(n) for n in names)
    lines = [f"{'class':<{width}}  IoU"]
    for name, iou in zip(names, per_class):
        lines.append(f"{name:<{width}}  {'n/a' if np.isnan(iou) else f'{iou:.4f}'}")
    lines.append(f"{'mIoU':<{width}}  {mean:.4f}")
    return "\n".join(lines)


def report_record(cm: ConfusionMatrix, **extra) -> str:
    mean, per_class = miou(cm)
    rec = {"type": "eval", **extra, "miou": mean,
           "per_class": [None if np.isnan(v) else float(v) for v in per_class]}
    return json.dumps(rec)
