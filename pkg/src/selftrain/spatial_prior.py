"""Class-frequency spatial priors from source label maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_io import IGNORE, load_prob_map_raw, save_prob_map

DEFAULT_KERNEL_SIZE = 71


@dataclass
class SpatialPrior:
    """Per-class normalized frequency field, float32, shape (C, H, W)."""

    values: np.ndarray
    kernel_size: int = DEFAULT_KERNEL_SIZE
    sigma: float = DEFAULT_KERNEL_SIZE / 6
    absent: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.absent is None:
            self.absent = self.values.reshape(self.values.shape[0], -1).sum(axis=1) == 0

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def accumulate_frequencies(labels, num_classes: int) -> np.ndarray:
    """count[c, r, col] = number of maps labelled c at (r, col). IGNORE counts nowhere."""
    counts = None
    for lab in labels:
        lab = np.asarray(lab)
        if counts is None:
            counts = np.zeros((num_classes,) + lab.shape, dtype=np.int64)
        elif lab.shape != counts.shape[1:]:
            raise ValueError(f"label map shape {lab.shape} differs from {counts.shape[1:]}")
        for c in range(num_classes):
            counts[c] += lab == c
        stray = (lab >= num_classes) & (lab != IGNORE)
        if stray.any():
            raise ValueError(f"label value {lab[stray][0]} out of range for C={num_classes}")
    if counts is None:
        raise ValueError("no label maps to accumulate")
    return counts


def gaussian_weights(kernel_size: int, sigma: float) -> np.ndarray:
    """Truncated 1-D Gaussian of odd length, normalized to sum 1."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _smoothing_matrix(n: int, weights: np.ndarray) -> np.ndarray:
    # row i holds the in-bounds kernel taps around i, renormalized to sum 1
    r = len(weights) // 2
    offsets = np.arange(n)[None, :] - np.arange(n)[:, None]
    inside = np.abs(offsets) <= r
    mat = np.where(inside, weights[np.clip(offsets + r, 0, 2 * r)], 0.0)
    return mat / mat.sum(axis=1, keepdims=True)


def gaussian_smooth(counts, kernel_size: int = DEFAULT_KERNEL_SIZE, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian smoothing of each class plane with edge renormalization.

    Near borders the kernel is renormalized over its in-bounds support, so a
    constant field maps to itself. The 2-D kernel is a product of 1-D kernels
    and the in-bounds support is a rectangle, so renormalizing each 1-D pass
    equals renormalizing the full 2-D kernel.
    """
    x = np.asarray(counts, dtype=np.float64)
    if sigma is None:
        sigma = kernel_size / 6
    weights = gaussian_weights(kernel_size, sigma)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    _, h, w = x.shape
    if kernel_size > h or kernel_size > w:
        raise ValueError(f"kernel {kernel_size}x{kernel_size} larger than image {h}x{w}")
    rows = _smoothing_matrix(h, weights)
    cols = _smoothing_matrix(w, weights)
    out = np.einsum("ij,cjk,lk->cil", rows, x, cols)
    return out[0] if squeeze else out


def normalize_prior(smoothed, kernel_size: int = DEFAULT_KERNEL_SIZE, sigma: float | None = None) -> SpatialPrior:
    """Divide every class plane by its own total; all-zero planes stay zero and are flagged."""
    x = np.asarray(smoothed, dtype=np.float64)
    totals = x.reshape(x.shape[0], -1).sum(axis=1)
    absent = totals <= 0
    if absent.all():
        raise ValueError("all classes have zero frequency (empty source)")
    scale = np.where(absent, 0.0, 1.0 / np.where(absent, 1.0, totals))
    q = x * scale[:, None, None]
    if sigma is None:
        sigma = kernel_size / 6
    return SpatialPrior(q.astype(np.float32), kernel_size, sigma, absent)


def build_prior(labels, num_classes: int, kernel_size: int = DEFAULT_KERNEL_SIZE,
                sigma: float | None = None) -> SpatialPrior:
    """Count, smooth, normalize."""
    counts = accumulate_frequencies(labels, num_classes)
    smoothed = gaussian_smooth(counts, kernel_size, sigma)
    return normalize_prior(smoothed, kernel_size, sigma)


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center aligned linear interpolation weights
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def resample_prior(prior: SpatialPrior, height: int, width: int) -> SpatialPrior:
    """Bilinear resampling to a new resolution, then per-class renormalization."""
    q = prior.values.astype(np.float64)
    _, h, w = q.shape
    if (h, w) == (height, width):
        return prior
    out = np.einsum("ij,cjk,lk->cil", _bilinear_matrix(height, h), q, _bilinear_matrix(width, w))
    res = normalize_prior(out, prior.kernel_size, prior.sigma)
    return res


def save_prior(prior: SpatialPrior, path) -> None:
    save_prob_map(prior.values, path, prior=True)


def load_prior(path) -> SpatialPrior:
    values, is_prior = load_prob_map_raw(path)
    if not is_prior:
        raise ValueError(f"{path}: not a spatial prior file")
    if values.min() < 0:
        raise ValueError(f"{path}: negative prior values")
    return SpatialPrior(values)
