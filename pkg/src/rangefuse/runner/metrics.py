"""Confusion matrices and per-class intersection-over-union."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DataError
from ..preproc import IGNORE_ID


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_update(cm: np.ndarray, predictions, labels, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Add one count at ``cm[label, prediction]`` per non-ignored point (in place)."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != lab.shape:
        raise DataError(f"{pred.size} predictions for {lab.size} labels")
    c = cm.shape[0]
    keep = lab != ignore_id
    pred, lab = pred[keep], lab[keep]
    if np.any((lab < 0) | (lab >= c)) or np.any((pred < 0) | (pred >= c)):
        raise DataError(f"class ids must lie in [0, {c})")
    cm += np.bincount(lab * c + pred, minlength=c * c).reshape(c, c)
    return cm


def merge_confusion(matrices: Sequence[np.ndarray]) -> np.ndarray:
    if not matrices:
        raise DataError("nothing to merge")
    return np.sum(np.stack(matrices), axis=0)


def compute_miou(cm: np.ndarray) -> tuple[list[float], float]:
    """Per-class IoU (NaN where the class never occurs in labels or predictions)
    and their mean over the defined classes."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    defined = denom > 0
    if not defined.any():
        raise DataError("mIoU is undefined: no class has any ground truth or prediction")
    iou = np.full(cm.shape[0], np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou.tolist(), float(iou[defined].mean())


def point_accuracy(predictions, labels, ignore_id: int = IGNORE_ID) -> float:
    pred = np.asarray(predictions).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    keep = lab != ignore_id
    if not keep.any():
        raise DataError("no labeled points")
    return float(np.mean(pred[keep] == lab[keep]))
