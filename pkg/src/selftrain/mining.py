"""Rare-class detection and crop selection biased toward rare classes."""
from __future__ import annotations

import numpy as np

from .tensor_io import IGNORE

RARE_THRESHOLD = 0.001


def class_portions(preds, num_classes: int) -> np.ndarray:
    """Fraction of predicted pixels per class over all maps (IGNORE excluded)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for p in preds:
        p = np.asarray(p).ravel()
        counts += np.bincount(p[p != IGNORE], minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        return np.zeros(num_classes)
    return counts / total


def rare_classes(portions, threshold: float = RARE_THRESHOLD) -> np.ndarray:
    """Indices of classes whose portion is strictly below ``threshold``."""
    return np.flatnonzero(np.asarray(portions) < threshold)


def prioritized_crop(labels, rare, crop: tuple[int, int], rng: np.random.Generator):
    """Pick a (row, col, height, width) crop.

    When ``labels`` contains a pixel of a rare class, a rare pixel is drawn
    uniformly and the crop is drawn uniformly among placements covering it.
    Otherwise the crop position is uniform over the image.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    ch, cw = crop
    if not (1 <= ch <= h and 1 <= cw <= w):
        raise ValueError(f"crop {ch}x{cw} does not fit image {h}x{w}")
    rare = np.asarray(rare, dtype=np.int64)
    hits = np.flatnonzero(np.isin(labels, rare)) if rare.size else np.empty(0, dtype=np.int64)
    if hits.size:
        r, c = divmod(int(hits[rng.integers(hits.size)]), w)
        r0 = rng.integers(max(0, r - ch + 1), min(r, h - ch) + 1)
        c0 = rng.integers(max(0, c - cw + 1), min(c, w - cw) + 1)
    else:
        r0 = rng.integers(0, h - ch + 1)
        c0 = rng.integers(0, w - cw + 1)
    return int(r0), int(c0), ch, cw
