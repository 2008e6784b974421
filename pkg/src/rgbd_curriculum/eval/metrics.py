"""Segmentation mIoU and depth δ1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class MetricReport:
    name: str
    value: float
    per_class: dict[int, float] = field(default_factory=dict)
    seed: int = 0
    fingerprint: str = ""


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    for a, what in ((pred, "prediction"), (gt, "ground truth")):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ContractError(f"{what} ids must lie in [0, {num_classes})")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricReport:
    """Mean IoU over classes present in either map; rows of the confusion matrix are ground truth."""
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    per_class = {c: float(tp[c] / union[c]) for c in range(num_classes) if union[c] > 0}
    value = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return MetricReport("miou", value, per_class)


def delta1(pred: np.ndarray, gt: np.ndarray, threshold: float = 1.25) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if (pred <= 0).any() or (gt <= 0).any():
        raise ContractError("depths must be strictly positive")
    ratio = np.maximum(pred / gt, gt / pred)
    return MetricReport("delta1", float((ratio < threshold).mean()))
