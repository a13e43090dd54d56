"""Confusion matrices, IoU, grouped mIoU and forgetting pace."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; out-of-range GT is skipped."""
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    keep = (gt >= 0) & (gt < n_classes)
    if np.any((pred[keep] < 0) | (pred[keep] >= n_classes)):
        raise ValueError("prediction outside the class range")
    idx = gt[keep] * n_classes + pred[keep]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN); NaN marks classes with an empty union."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def _nanmean(values: np.ndarray) -> float | None:
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else None


def grouped_miou(ious: Sequence[float], step_boundaries: Sequence[int]) -> dict[str, float | None]:
    """mIoU of the initial block (background + first step), later steps, and all.

    ``step_boundaries[0]`` is the width of the initial block; only channels
    below ``len(ious)`` are used.  Empty groups come back as ``None``.
    """
    ious = np.asarray(ious, dtype=np.float64)
    first = min(int(step_boundaries[0]), len(ious))
    return {
        "initial": _nanmean(ious[:first]),
        "incremental": _nanmean(ious[first:]),
        "all": _nanmean(ious),
    }


def forgetting_pace(iou_first: Sequence[float], iou_last: Sequence[float]) -> np.ndarray:
    """IoU drop per class between two evaluations; NaN where either is absent."""
    first = np.asarray(iou_first, dtype=np.float64)
    last = np.asarray(iou_last, dtype=np.float64)
    n = min(len(first), len(last))
    pace = np.full(max(len(first), len(last)), np.nan)
    pace[:n] = first[:n] - last[:n]
    return pace
