"""Self-training objectives and a small per-pixel softmax classifier.

The classifier maps a D-dimensional feature vector at every pixel to C class
probabilities, either linearly or through one tanh hidden layer. Losses are
sums over pixels. Parameters live in float32 between updates so a saved
parameter file reproduces predictions bit for bit.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .confidence import GLOBAL, ThresholdSet
from .tensor_io import IGNORE, FormatError, ProbMap

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ClassifierParams:
    """Layer weights ``(W, b)`` with W shaped (fan_in, fan_out)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    lr: float = 0.1
    seed: int = 0

    @property
    def hidden(self) -> int:
        return 0 if len(self.layers) == 1 else self.layers[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams([(w.copy(), b.copy()) for w, b in self.layers], self.lr, self.seed)

    def flat(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]


def init_params(feature_dim: int, num_classes: int, hidden: int = 0, seed: int = 0,
                lr: float = 0.1) -> ClassifierParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [feature_dim, hidden, num_classes] if hidden else [feature_dim, num_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        layers.append((w, np.zeros(fan_out, dtype=np.float32)))
    return ClassifierParams(layers, lr, seed)


def _pixels(img) -> np.ndarray:
    img = np.asarray(img)
    return img.reshape(img.shape[0], -1).T.astype(np.float64)


def _logits(params: ClassifierParams, x: np.ndarray):
    if x.shape[1] != params.feature_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match params ({params.feature_dim})")
    acts = [x]
    h = x
    for i, (w, b) in enumerate(params.layers):
        z = h @ w.astype(np.float64) + b.astype(np.float64)
        if i < len(params.layers) - 1:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h, acts


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: ClassifierParams, img) -> ProbMap:
    img = np.asarray(img)
    _, h, w = img.shape
    z, _ = _logits(params, _pixels(img))
    p = np.exp(log_softmax(z))
    return ProbMap(p.T.reshape(-1, h, w).astype(np.float32))


def cross_entropy(params: ClassifierParams, img, labels, grad: bool = False):
    """Summed -log p(y) over non-IGNORE pixels; returns (loss, count, grads|None)."""
    labels = np.asarray(labels).ravel()
    x = _pixels(img)
    keep = labels != IGNORE
    n = int(keep.sum())
    if n == 0:
        grads = [np.zeros(a.shape) for a in params.flat()] if grad else None
        return 0.0, 0, grads
    x = x[keep]
    y = labels[keep].astype(np.intp)
    z, acts = _logits(params, x)
    logp = log_softmax(z)
    loss = float(-logp[np.arange(n), y].sum())
    if not grad:
        return loss, n, None

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        a = acts[i]
        grads.append(delta.sum(axis=0))
        grads.append(a.T @ delta)
        if i > 0:
            delta = (delta @ w.astype(np.float64).T) * (1.0 - a ** 2)
    grads.reverse()  # -> W0, b0, W1, b1, ...
    return loss, n, grads


@dataclass
class LossReport:
    total: float = 0.0
    source_term: float = 0.0
    target_term: float = 0.0
    regularizer_term: float = 0.0
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def loss_supervised(params: ClassifierParams, batches: Sequence) -> LossReport:
    total = 0.0
    for img, labels in batches:
        total += cross_entropy(params, img, labels)[0]
    return LossReport(total, total, 0.0, 0.0, np.zeros(params.num_classes, dtype=np.int64))


def loss_selftrain(params: ClassifierParams, source: Sequence, target: Sequence,
                   t: ThresholdSet, priors: Sequence | None = None) -> LossReport:
    """Source cross-entropy + pseudo-labelled target cross-entropy - sum of k over selections.

    ``target`` holds (features, pseudo-labels) pairs. With ``priors`` (one C x H x W
    array per target image) the target term uses -log(q * p); the prior is
    constant in the weights and never reaches the gradients.
    """
    src = loss_supervised(params, source).source_term
    c_count = params.num_classes
    k = np.full(c_count, float(t.k[0])) if t.kind == GLOBAL else t.k
    tgt = 0.0
    reg = 0.0
    selected = np.zeros(c_count, dtype=np.int64)
    for i, (img, labels) in enumerate(target):
        labels = np.asarray(labels)
        sel = labels != IGNORE
        if not sel.any():
            continue
        cls = labels[sel].astype(np.intp)
        if t.kind != GLOBAL and not t.active[cls].all():
            bad = int(cls[~t.active[cls]][0])
            raise ValueError(f"pseudo-label for inactive class {bad}")
        loss, _, _ = cross_entropy(params, img, labels)
        if priors is not None:
            q = np.asarray(priors[i], dtype=np.float64)[:, sel][cls, np.arange(cls.size)]
            with np.errstate(divide="ignore"):
                loss -= float(np.log(q).sum())
        tgt += loss
        reg -= float(k[cls].sum())
        selected += np.bincount(cls, minlength=c_count)
    return LossReport(src + tgt + reg, src, tgt, reg, selected)


def gradients(params: ClassifierParams, batches: Sequence) -> list[np.ndarray]:
    """Gradient of the summed cross-entropy over all labelled pixels in ``batches``."""
    total = [np.zeros(a.shape) for a in params.flat()]
    for img, labels in batches:
        _, _, g = cross_entropy(params, img, labels, grad=True)
        for acc, gi in zip(total, g):
            acc += gi
    return total


def _crop(img, labels, rect):
    if rect is None:
        return img, labels
    r0, c0, h, w = rect
    return np.asarray(img)[:, r0:r0 + h, c0:c0 + w], np.asarray(labels)[r0:r0 + h, c0:c0 + w]


def train_epochs(params: ClassifierParams, batches: Sequence, epochs: int, seed: int,
                 cropper: Callable | None = None,
                 objective: Callable[[ClassifierParams], LossReport] | None = None):
    """Plain SGD, one image per step, in a seeded shuffled order each epoch.

    Each step moves by ``lr / pixels_in_batch`` times the summed gradient.
    ``cropper(index, labels, rng)`` may return a (row, col, h, w) rectangle.
    Returns the updated params and one LossReport per epoch from ``objective``
    (supervised loss over ``batches`` by default).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if objective is None:
        def objective(p):
            return loss_supervised(p, batches)
    rng = np.random.default_rng(seed)
    params = params.copy()
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(batches))
        for idx in order:
            img, labels = batches[idx]
            rect = cropper(int(idx), labels, rng) if cropper is not None else None
            img, labels = _crop(img, labels, rect)
            loss, n, grads = cross_entropy(params, img, labels, grad=True)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"epoch {epoch + 1}: batch {idx} loss {loss!r}")
            if n == 0 or params.lr == 0:
                continue
            step = params.lr / labels.size
            flat = params.flat()
            new = [(a.astype(np.float64) - step * g).astype(a.dtype) for a, g in zip(flat, grads)]
            params.layers = [(new[i], new[i + 1]) for i in range(0, len(new), 2)]
        rep = objective(params)
        if not np.isfinite(rep.total):
            raise TrainingDiverged(f"epoch {epoch + 1}: non-finite objective")
        trace.append(rep)
    return params, trace


_PARAMS_HEADER = struct.Struct("<4sHHdQ")
_DIMS = struct.Struct("<II")


def save_params(params: ClassifierParams, path) -> None:
    with open(path, "wb") as f:
        f.write(_PARAMS_HEADER.pack(b"PRMS", 1, len(params.layers), params.lr, params.seed))
        for w, b in params.layers:
            f.write(_DIMS.pack(*w.shape))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path) -> ClassifierParams:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PARAMS_HEADER.size:
        raise FormatError(f"{path}: truncated params header")
    magic, version, n_layers, lr, seed = _PARAMS_HEADER.unpack_from(data)
    if magic != b"PRMS":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported params version {version}")
    off = _PARAMS_HEADER.size
    layers = []
    for _ in range(n_layers):
        if len(data) < off + _DIMS.size:
            raise FormatError(f"{path}: truncated layer header")
        rows, cols = _DIMS.unpack_from(data, off)
        off += _DIMS.size
        nbytes = 4 * (rows * cols + cols)
        if len(data) < off + nbytes:
            raise FormatError(f"{path}: truncated layer payload")
        w = np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).astype(np.float32)
        off += 4 * rows * cols
        b = np.frombuffer(data, "<f4", cols, off).astype(np.float32)
        off += 4 * cols
        layers.append((w, b))
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return ClassifierParams(layers, lr, seed)


TRACE_HEADER = ["round", "epoch", "total", "source", "target", "regularizer"]


def write_loss_trace(rows, path) -> None:
    """rows: iterable of (round, epoch, LossReport)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for rnd, epoch, rep in rows:
            w.writerow([rnd, epoch] + [f"{v:.6f}" for v in
                       (rep.total, rep.source_term, rep.target_term, rep.regularizer_term)])
