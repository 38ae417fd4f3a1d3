"""Seeded two-domain feature-blob segmentation task.

Each image is a grid of square blocks; every block takes one class, drawn with
an imbalanced class distribution (the last class is the minority). A pixel's
feature vector is its class mean plus isotropic Gaussian noise. Target images
use the same class means moved by a seeded shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticTask:
    source_features: list[np.ndarray]
    source_labels: list[np.ndarray]
    target_features: list[np.ndarray]
    target_labels: list[np.ndarray]  # held out, evaluation only
    num_classes: int
    source_ids: list[str]
    target_ids: list[str]


def class_weights(num_classes: int, minority_fraction: float) -> np.ndarray:
    if not 0 < minority_fraction < 1:
        raise ValueError("minority_fraction must be in (0, 1)")
    w = np.full(num_classes, (1 - minority_fraction) / (num_classes - 1))
    w[-1] = minority_fraction
    return w


def _label_grid(rng, weights, height, width, block, layout):
    rows = -(-height // block)
    cols = -(-width // block)
    c = len(weights)
    if layout > 0:
        # class c prefers the c-th horizontal band, like sky above road
        band = np.clip((np.arange(rows) * c) // rows, 0, c - 1)
        pref = np.eye(c)[band]
        probs = weights[None, :] * (1 + layout * pref)
        probs /= probs.sum(axis=1, keepdims=True)
        grid = np.stack([rng.choice(c, size=cols, p=probs[r]) for r in range(rows)])
    else:
        grid = rng.choice(c, size=(rows, cols), p=weights)
    lab = np.repeat(np.repeat(grid, block, axis=0), block, axis=1)
    return lab[:height, :width].astype(np.uint8)


def make_synthetic_task(seed: int = 0, num_classes: int = 4, feature_dim: int = 8,
                        shift: float = 3.0, minority_fraction: float = 0.05,
                        n_source: int = 20, n_target: int = 20, height: int = 64,
                        width: int = 64, noise: float = 0.6, separation: float = 3.0,
                        block: int = 8, layout: float = 0.0) -> SyntheticTask:
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, feature_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    direction = rng.normal(size=feature_dim)
    direction /= np.linalg.norm(direction)
    jitter = rng.normal(size=(num_classes, feature_dim)) / np.sqrt(feature_dim)
    target_means = means + shift * (direction[None, :] + 0.5 * jitter)
    weights = class_weights(num_classes, minority_fraction)

    def images(n, centers):
        feats, labs = [], []
        for _ in range(n):
            lab = _label_grid(rng, weights, height, width, block, layout)
            x = centers[lab].transpose(2, 0, 1)
            x = x + noise * rng.normal(size=x.shape)
            feats.append(x.astype(np.float32))
            labs.append(lab)
        return feats, labs

    sf, sl = images(n_source, means)
    tf, tl = images(n_target, target_means)
    return SyntheticTask(sf, sl, tf, tl, num_classes,
                         [f"src{i:04d}" for i in range(n_source)],
                         [f"tgt{i:04d}" for i in range(n_target)])
