"""Segmentation metrics from a class confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_io import IGNORE


def confusion_matrix(preds, gts, num_classes: int) -> np.ndarray:
    """cm[g, p] counts pixels with ground truth g predicted as p; IGNORE in gt is skipped."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, gt in zip(preds, gts, strict=True):
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction size {pred.size} != ground truth size {gt.size}")
        keep = gt != IGNORE
        if ((gt[keep] >= num_classes) | (pred[keep] >= num_classes)).any():
            raise ValueError(f"label outside [0, {num_classes})")
        cm += np.bincount(num_classes * gt[keep] + pred[keep],
                          minlength=num_classes ** 2).reshape(num_classes, num_classes)
    return cm


@dataclass
class SegScores:
    iou: np.ndarray
    miou: float
    accuracy: float
    recall: np.ndarray
    confusion: np.ndarray


def scores_from_confusion(cm: np.ndarray) -> SegScores:
    total = cm.sum()
    if total == 0:
        raise ValueError("no valid pixels to evaluate")
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    # classes absent from both ground truth and predictions get NaN and drop out of the mean
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(gt_count > 0, tp / gt_count, np.nan)
    return SegScores(iou, float(np.nanmean(iou)), float(tp.sum() / total), recall, cm)


def evaluate_miou(preds, gts, num_classes: int) -> SegScores:
    return scores_from_confusion(confusion_matrix(preds, gts, num_classes))
