"""Pixel confidence, portion-based thresholds and the self-paced schedule."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

GLOBAL = "global"
PER_CLASS = "per_class"


@dataclass
class ThresholdSet:
    """Reference confidences exp(-k), global or one per class.

    ``ref_conf`` has length 1 for a global threshold and length C otherwise.
    Inactive classes carry NaN and never select anything.
    """

    kind: str
    ref_conf: np.ndarray
    active: np.ndarray
    pixel_count: np.ndarray

    @property
    def k(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return -np.log(self.ref_conf)

    @property
    def num_classes(self) -> int:
        return len(self.ref_conf)

    @classmethod
    def global_(cls, ref_conf: float, pixel_count: int = 0) -> "ThresholdSet":
        return cls(GLOBAL, np.array([float(ref_conf)]), np.array([True]), np.array([pixel_count]))

    @classmethod
    def per_class(cls, ref_conf, active=None, pixel_count=None) -> "ThresholdSet":
        ref = np.asarray(ref_conf, dtype=np.float64).copy()
        if active is None:
            active = np.isfinite(ref)
        active = np.asarray(active, dtype=bool)
        ref[~active] = np.nan
        if pixel_count is None:
            pixel_count = np.zeros(len(ref), dtype=np.int64)
        return cls(PER_CLASS, ref, active, np.asarray(pixel_count, dtype=np.int64))


@dataclass(frozen=True)
class PaceSchedule:
    p0: float = 0.20
    dp: float = 0.05
    p_max: float = 0.50

    def __post_init__(self):
        if not (0 < self.p0 <= self.p_max <= 1):
            raise ValueError(f"need 0 < p0 <= p_max <= 1, got p0={self.p0}, p_max={self.p_max}")
        if self.dp < 0:
            raise ValueError(f"dp must be >= 0, got {self.dp}")


def portion_at_round(s: PaceSchedule, round_: int) -> float:
    """Portion used in the given 1-based round: p0 + (round-1)*dp, capped at p_max."""
    if round_ < 1:
        raise ValueError(f"round must be >= 1, got {round_}")
    # portions are decimal quantities; drop accumulated binary noise (0.30000000000000004)
    return min(round(s.p0 + (round_ - 1) * s.dp, 12), s.p_max)


def pixel_confidence(m) -> np.ndarray:
    return np.asarray(m).max(axis=0)


def predicted_labels(m) -> np.ndarray:
    """Per-pixel argmax class (np.argmax picks the lowest index on ties)."""
    return np.asarray(m).argmax(axis=0).astype(np.uint8)


def rank_index(p: float, length: int) -> int:
    """1-based rank round(p*length), half away from zero, clamped to [1, length]."""
    x = round(p * length, 9)
    r = int(math.floor(x + 0.5))
    return min(max(r, 1), length)


def kth_largest(values: np.ndarray, rank: int) -> float:
    """Value at 1-based ``rank`` of the descending order, via selection."""
    n = len(values)
    if not 1 <= rank <= n:
        raise ValueError(f"rank {rank} outside [1, {n}]")
    pos = n - rank
    return float(np.partition(values, pos)[pos])


def _check_portion(p: float) -> None:
    if not (0 < p <= 1):
        raise ValueError(f"portion must be in (0, 1], got {p}")


def determine_k(targets: Iterable, p: float) -> ThresholdSet:
    """Global threshold: the confidence ranked at round(p*M) over all target pixels."""
    _check_portion(p)
    chunks = [pixel_confidence(m).ravel().astype(np.float64) for m in targets]
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise ValueError("empty target set")
    conf = np.concatenate(chunks)
    ref = kth_largest(conf, rank_index(p, len(conf)))
    return ThresholdSet.global_(ref, len(conf))


def determine_kc(targets: Iterable, p: float, num_classes: int | None = None) -> ThresholdSet:
    """Per-class thresholds ranked among pixels predicted as each class."""
    _check_portion(p)
    per_class: list[list[np.ndarray]] | None = None
    for m in targets:
        arr = np.asarray(m)
        c = arr.shape[0]
        if per_class is None:
            per_class = [[] for _ in range(num_classes or c)]
        lp = arr.argmax(axis=0)
        mp = arr.max(axis=0).astype(np.float64)
        for cls in range(c):
            sel = mp[lp == cls]
            if sel.size:
                per_class[cls].append(sel)
    if per_class is None:
        if num_classes is None:
            raise ValueError("empty target set and unknown class count")
        per_class = [[] for _ in range(num_classes)]

    n = len(per_class)
    ref = np.full(n, np.nan)
    active = np.zeros(n, dtype=bool)
    counts = np.zeros(n, dtype=np.int64)
    for cls, chunks in enumerate(per_class):
        if not chunks:
            continue
        conf = np.concatenate(chunks)
        counts[cls] = len(conf)
        ref[cls] = kth_largest(conf, rank_index(p, len(conf)))
        active[cls] = True
    return ThresholdSet(PER_CLASS, ref, active, counts)


THRESHOLD_HEADER = ["class", "ref_conf", "k", "active", "pixel_count"]


def write_thresholds(t: ThresholdSet, path) -> None:
    """Write thresholds as CSV. Floats use shortest round-trip repr so reading back is exact."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(THRESHOLD_HEADER)
        k = t.k
        for i in range(len(t.ref_conf)):
            name = "GLOBAL" if t.kind == GLOBAL else str(i)
            if t.active[i]:
                w.writerow([name, repr(float(t.ref_conf[i])), repr(float(k[i])), 1, int(t.pixel_count[i])])
            else:
                w.writerow([name, "", "", 0, int(t.pixel_count[i])])


def read_thresholds(path) -> ThresholdSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != THRESHOLD_HEADER:
        raise ValueError(f"{path}: missing threshold header")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no threshold rows")
    if body[0][0] == "GLOBAL":
        if len(body) != 1:
            raise ValueError(f"{path}: global threshold file must have exactly one row")
        return ThresholdSet.global_(float(body[0][1]), int(body[0][4]))
    ref, active, counts = [], [], []
    for i, row in enumerate(body):
        if row[0] != str(i):
            raise ValueError(f"{path}: expected class {i}, got {row[0]!r}")
        is_active = row[3] == "1"
        active.append(is_active)
        ref.append(float(row[1]) if is_active else np.nan)
        counts.append(int(row[4]))
    return ThresholdSet(PER_CLASS, np.array(ref), np.array(active), np.array(counts, dtype=np.int64))
