"""Per-pixel pseudo-label solvers and a brute-force reference.

All solvers are pure per-pixel maps. A pixel is kept when its (balanced)
response reaches the reference confidence (``>=``), so thresholds produced by
:func:`selftrain.confidence.determine_k` admit exactly the ranked pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .confidence import GLOBAL, PER_CLASS, ThresholdSet
from .tensor_io import IGNORE

RAW = "raw"
PRIOR_WEIGHTED = "prior_weighted"


@dataclass
class SelectionMetric:
    kind: str = RAW
    prior: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (RAW, PRIOR_WEIGHTED):
            raise ValueError(f"unknown selection metric {self.kind!r}")
        if self.kind == PRIOR_WEIGHTED and self.prior is None:
            raise ValueError("prior_weighted metric needs a prior")

    def potentials(self, m) -> np.ndarray:
        p = np.asarray(m)
        if self.kind == RAW:
            return p
        return prior_potentials(p, self.prior)


def prior_potentials(m, q) -> np.ndarray:
    """q_n(c) * p_n(c), computed in float64."""
    p = np.asarray(m)
    q = np.asarray(q)
    if q.shape != p.shape:
        raise ValueError(f"prior shape {q.shape} does not match map shape {p.shape}")
    return q.astype(np.float64) * p.astype(np.float64)


def _apply_mask(labels: np.ndarray, valid) -> np.ndarray:
    if valid is not None:
        labels[~np.asarray(valid, dtype=bool)] = IGNORE
    return labels


def generate_st(m, t: ThresholdSet, valid=None) -> np.ndarray:
    if t.kind != GLOBAL:
        raise ValueError("generate_st needs a global threshold")
    p = np.asarray(m)
    best = p.argmax(axis=0)
    conf = p.max(axis=0)
    keep = (conf >= t.ref_conf[0]) & (conf > 0)
    labels = np.where(keep, best, IGNORE).astype(np.uint8)
    return _apply_mask(labels, valid)


def balanced_response(m, t: ThresholdSet) -> np.ndarray:
    """p_n(c) / exp(-k_c); inactive classes get -inf."""
    p = np.asarray(m).astype(np.float64)
    if t.kind != PER_CLASS:
        raise ValueError("balanced response needs per-class thresholds")
    if p.shape[0] != t.num_classes:
        raise ValueError(f"map has {p.shape[0]} classes, thresholds have {t.num_classes}")
    ratio = np.full(p.shape, -np.inf)
    for c in np.flatnonzero(t.active):
        ref = t.ref_conf[c]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = p[c] / ref
        # zero potential is never selectable, even against a zero reference
        ratio[c] = np.where(p[c] > 0, r, -np.inf)
    return ratio


def generate_cbst(m, t: ThresholdSet, valid=None) -> np.ndarray:
    ratio = balanced_response(m, t)
    best = ratio.argmax(axis=0)
    top = ratio.max(axis=0)
    labels = np.where(top >= 1.0, best, IGNORE).astype(np.uint8)
    return _apply_mask(labels, valid)


def generate_cbst_sp(m, t: ThresholdSet, q, valid=None) -> np.ndarray:
    """CBST on prior-weighted potentials; ``t`` must come from the same potentials."""
    return generate_cbst(prior_potentials(m, q), t, valid)


def oracle_label(m, t: ThresholdSet, metric: SelectionMetric | None = None) -> np.ndarray:
    """Minimize the pseudo-label subproblem by enumerating every assignment.

    For each pixel the C one-hot choices score ``-log(potential_c) - k_c`` and
    the zero vector scores 0. Ties go to the lowest class index, and the zero
    vector loses every tie.
    """
    metric = metric or SelectionMetric()
    pot = metric.potentials(m).astype(np.float64)
    c_count = pot.shape[0]
    if c_count > 8:
        raise ValueError("oracle_label is for small instances (C <= 8)")
    if t.kind == GLOBAL:
        k = np.full(c_count, float(t.k[0]))
        usable = np.ones(c_count, dtype=bool)
    else:
        k = t.k
        usable = t.active
    scores = np.empty((c_count + 1,) + pot.shape[1:])
    with np.errstate(divide="ignore"):
        for c in range(c_count):
            if usable[c]:
                scores[c] = -np.log(pot[c]) - k[c]
            else:
                scores[c] = np.inf
            scores[c][pot[c] <= 0] = np.inf
    scores[c_count] = 0.0
    choice = scores.argmin(axis=0)
    return np.where(choice == c_count, IGNORE, choice).astype(np.uint8)


def subproblem_objective(m, labels, t: ThresholdSet, metric: SelectionMetric | None = None) -> float:
    """Target + regularizer value of a pseudo-label assignment (lower is better)."""
    metric = metric or SelectionMetric()
    pot = metric.potentials(m).astype(np.float64)
    labels = np.asarray(labels)
    sel = labels != IGNORE
    if not sel.any():
        return 0.0
    cls = labels[sel].astype(np.intp)
    vals = pot[:, sel][cls, np.arange(cls.size)]
    k = np.full(pot.shape[0], float(t.k[0])) if t.kind == GLOBAL else t.k
    kk = k[cls]
    if np.isnan(kk).any():
        raise ValueError("pseudo-label assigned to an inactive class")
    with np.errstate(divide="ignore"):
        return float(np.sum(-np.log(vals) - kk))


def selection_counts(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    labels = labels[labels != IGNORE]
    return np.bincount(labels, minlength=num_classes)[:num_classes]


def generate(m, t: ThresholdSet, variant: str, prior=None, valid=None) -> np.ndarray:
    """Dispatch by variant name: ``st``, ``cbst`` or ``cbst-sp``."""
    variant = variant.lower()
    if variant == "st":
        return generate_st(m, t, valid)
    if variant == "cbst":
        return generate_cbst(m, t, valid)
    if variant == "cbst-sp":
        if prior is None:
            raise ValueError("cbst-sp needs a spatial prior")
        return generate_cbst_sp(m, t, prior, valid)
    raise ValueError(f"unknown variant {variant!r}")
