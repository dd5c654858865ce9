"""Classification and part-segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np


@dataclass
class MetricReport:
    oa: float
    macc: float
    per_class_acc: list[float]
    n_samples: int
    instance_miou: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.oa, self.macc, *self.per_class_acc]
        if self.instance_miou is not None:
            vals.append(self.instance_miou)
        if any(not 0 <= v <= 1 for v in vals):
            raise ValueError(f"metrics must lie in [0, 1]: {vals}")

    def to_dict(self) -> dict:
        return asdict(self)


def overall_accuracy(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.size == 0:
        raise ValueError("no predictions")
    return float((pred == target).mean())


def per_class_accuracy(pred, target, num_classes: int) -> np.ndarray:
    """Accuracy per class over classes present in ``target`` (NaN for absent classes)."""
    pred, target = np.asarray(pred), np.asarray(target)
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        m = target == c
        if m.any():
            acc[c] = (pred[m] == c).mean()
    return acc


def classification_report(pred, target, num_classes: int) -> MetricReport:
    acc = per_class_accuracy(pred, target, num_classes)
    present = acc[~np.isnan(acc)]
    return MetricReport(overall_accuracy(pred, target), float(present.mean()),
                        [float(a) for a in present], int(np.asarray(target).size))


def part_iou(pred, target, parts) -> float:
    """Mean IoU over the candidate ``parts`` of one shape; a part absent from both scores 1."""
    pred, target = np.asarray(pred), np.asarray(target)
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (target == p))
        union = np.sum((pred == p) | (target == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def instance_miou(preds, targets, object_classes, parts_of_class: dict) -> float:
    if len(preds) == 0:
        raise ValueError("no samples")
    return float(np.mean([part_iou(p, t, parts_of_class[c]) for p, t, c in zip(preds, targets, object_classes)]))


def masked_part_prediction(logits: np.ndarray, parts: list[int]) -> np.ndarray:
    """Argmax over the part classes admissible for the object class only."""
    parts = np.asarray(parts)
    return parts[np.argmax(logits[..., parts], axis=-1)]
