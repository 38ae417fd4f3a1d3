"""Multi-round self-training: pseudo-label generation alternating with retraining.

Run directory layout::

    config.cfg                 config snapshot (key=value)
    report.csv                 one row per round
    data/source/<id>.lmap      source labels
    data/target_gt/<id>.lmap   held-out target labels (evaluation only)
    data/manifest.tsv          source records (input to the prior builder)
    prior.pmap                 spatial prior (cbst-sp only)
    round_00/                  source-only model
        params.bin  report.csv  loss_trace.csv  manifest.tsv  probs/<id>.pmap
    round_NN/                  NN >= 1
        thresholds.csv  labels/<id>.lmap  label_summary.csv
        params.bin  report.csv  loss_trace.csv  manifest.tsv  probs/<id>.pmap

``round_NN/probs`` holds target predictions of ``round_NN/params.bin``; they
feed the pseudo-label step of round NN+1.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import confidence as conf
from .evaluation import SegScores, evaluate_miou
from .mining import class_portions, prioritized_crop, rare_classes
from .pseudolabel import generate, prior_potentials, selection_counts
from .spatial_prior import SpatialPrior, build_prior, save_prior
from .synthetic import SyntheticTask, make_synthetic_task
from .tensor_io import ManifestRecord, save_label_map, save_prob_map, write_manifest
from .trainer import (
    ClassifierParams,
    LossReport,
    forward,
    init_params,
    loss_selftrain,
    loss_supervised,
    save_params,
    train_epochs,
    write_loss_trace,
)

log = logging.getLogger(__name__)

VARIANTS = ("st", "cbst", "cbst-sp")


@dataclass
class RunConfig:
    variant: str = "cbst"
    p0: float = 0.20
    dp: float = 0.05
    p_max: float = 0.50
    rounds: int = 3
    epochs_per_round: int = 2
    pretrain_epochs: int = 10
    lr: float = 0.5
    hidden: int = 0
    seed: int = 0
    mining: bool = False
    rare_threshold: float = 0.001
    crop_height: int = 32
    crop_width: int = 32
    kernel_size: int = 71
    sigma: float = 0.0  # 0 -> kernel_size / 6
    num_classes: int = 4
    feature_dim: int = 8
    height: int = 64
    width: int = 64
    n_source: int = 20
    n_target: int = 20
    shift: float = 3.0
    noise: float = 0.6
    separation: float = 3.0
    minority_fraction: float = 0.05
    block: int = 8
    layout: float = 0.0

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.epochs_per_round < 1 or self.pretrain_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if not 0 <= self.rare_threshold <= 1:
            raise ValueError("rare_threshold must be in [0, 1]")
        if self.mining and not (1 <= self.crop_height <= self.height and 1 <= self.crop_width <= self.width):
            raise ValueError("crop does not fit image")
        if self.variant == "cbst-sp" and self.kernel_size > min(self.height, self.width):
            raise ValueError(f"kernel_size {self.kernel_size} larger than image "
                             f"{self.height}x{self.width}; set kernel_size <= {min(self.height, self.width)}")
        self.schedule  # validates portions

    @property
    def schedule(self) -> conf.PaceSchedule:
        return conf.PaceSchedule(self.p0, self.dp, self.p_max)

    @property
    def smoothing_sigma(self) -> float:
        return self.sigma if self.sigma > 0 else self.kernel_size / 6

    def task(self) -> SyntheticTask:
        return make_synthetic_task(
            seed=self.seed, num_classes=self.num_classes, feature_dim=self.feature_dim,
            shift=self.shift, minority_fraction=self.minority_fraction,
            n_source=self.n_source, n_target=self.n_target, height=self.height,
            width=self.width, noise=self.noise, separation=self.separation,
            block=self.block, layout=self.layout)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse flat key=value text; unknown keys and bad values raise ValueError."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            if key in kwargs:
                raise ValueError(f"line {lineno}: duplicate config key {key!r}")
            kwargs[key] = _parse_value(key, types[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_value(key, typ, value):
    try:
        if typ == "bool":
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"bad value for {key}: {value!r} (expected {typ})") from None


CONFIG_SCHEMA = {f.name: f.type for f in dataclasses.fields(RunConfig)}


@dataclass
class RoundReport:
    round: int
    portion: float
    thresholds: conf.ThresholdSet | None
    selected: np.ndarray
    predicted: np.ndarray
    scores: SegScores
    trace: list[LossReport] = field(default_factory=list)

    @property
    def selected_portion(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.predicted > 0, self.selected / np.maximum(self.predicted, 1), np.nan)


@dataclass
class RunState:
    config: RunConfig
    task: SyntheticTask
    params: ClassifierParams
    probs: list[np.ndarray]
    prior: SpatialPrior | None = None
    round: int = 0


def train_seed(config: RunConfig, round_: int) -> int:
    return config.seed * 1000 + round_


def predict_all(params: ClassifierParams, images, workers: int = 1) -> list[np.ndarray]:
    """Target probability maps, one per image; order-stable for any worker count."""
    def one(img):
        return forward(params, img).values
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, images))
    return [one(img) for img in images]


def source_batches(task: SyntheticTask):
    return list(zip(task.source_features, task.source_labels))


def pretrain(config: RunConfig, task: SyntheticTask):
    params = init_params(config.feature_dim, config.num_classes, config.hidden, config.seed, config.lr)
    batches = source_batches(task)
    return train_epochs(params, batches, config.pretrain_epochs, train_seed(config, 0))


def make_prior(config: RunConfig, task: SyntheticTask) -> SpatialPrior | None:
    if config.variant != "cbst-sp":
        return None
    return build_prior(task.source_labels, config.num_classes, config.kernel_size, config.smoothing_sigma)


def initial_state(config: RunConfig, workers: int = 1):
    task = config.task()
    params, trace = pretrain(config, task)
    probs = predict_all(params, task.target_features, workers)
    state = RunState(config, task, params, probs, make_prior(config, task), 0)
    report = RoundReport(0, 0.0, None, np.zeros(config.num_classes, dtype=np.int64),
                         _predicted_counts(probs, config.num_classes),
                         _score(probs, task, config.num_classes), trace)
    return state, report


def _predicted_counts(probs, num_classes):
    return np.sum([np.bincount(conf.predicted_labels(p).ravel(), minlength=num_classes)
                   for p in probs], axis=0)


def _score(probs, task, num_classes) -> SegScores:
    preds = [conf.predicted_labels(p) for p in probs]
    return evaluate_miou(preds, task.target_labels, num_classes)


def selection_potentials(probs, prior: SpatialPrior | None):
    if prior is None:
        return probs
    return [prior_potentials(p, prior.values) for p in probs]


def compute_thresholds(variant: str, probs, portion: float, num_classes: int,
                       prior: SpatialPrior | None = None) -> conf.ThresholdSet:
    if variant == "st":
        return conf.determine_k(probs, portion)
    return conf.determine_kc(selection_potentials(probs, prior), portion, num_classes)


def pseudo_label(variant: str, probs, t: conf.ThresholdSet, prior: SpatialPrior | None = None):
    q = prior.values if prior is not None else None
    return [generate(p, t, variant, q) for p in probs]


def step_a(state: RunState, round_: int):
    """Thresholds at this round's portion and the pseudo-labels they induce."""
    cfg = state.config
    portion = conf.portion_at_round(cfg.schedule, round_)
    t = compute_thresholds(cfg.variant, state.probs, portion, cfg.num_classes, state.prior)
    labels = pseudo_label(cfg.variant, state.probs, t, state.prior)
    return portion, t, labels


def step_b(config: RunConfig, task: SyntheticTask, params: ClassifierParams, probs,
           t: conf.ThresholdSet, labels, round_: int, prior: SpatialPrior | None = None):
    """Retrain on source plus pseudo-labelled target for ``epochs_per_round`` epochs."""
    src = source_batches(task)
    tgt = list(zip(task.target_features, labels))
    batches = src + tgt
    cropper = None
    if config.mining:
        preds = [conf.predicted_labels(p) for p in probs]
        rare = rare_classes(class_portions(preds, config.num_classes), config.rare_threshold)
        n_src = len(src)
        crop = (config.crop_height, config.crop_width)

        def cropper(idx, _labels, rng):
            if idx < n_src:
                return None
            return prioritized_crop(preds[idx - n_src], rare, crop, rng)

    priors = [prior.values] * len(tgt) if prior is not None else None

    def objective(p):
        return loss_selftrain(p, src, tgt, t, priors)

    return train_epochs(params, batches, config.epochs_per_round, train_seed(config, round_),
                        cropper, objective)


def run_round(state: RunState, workers: int = 1):
    """One round: (a) pseudo-label with fresh thresholds, (b) retrain, then evaluate."""
    cfg = state.config
    r = state.round + 1
    _, t, labels = step_a(state, r)
    selected = np.sum([selection_counts(lab, cfg.num_classes) for lab in labels], axis=0)
    if selected.sum() == 0:
        log.warning("round %d: no pseudo-labels selected; training on source only", r)
    new_state, report = retrain(state, t, labels, r, workers)
    return new_state, report, labels


def retrain(state: RunState, t: conf.ThresholdSet, labels, round_: int, workers: int = 1):
    """Step (b) of ``round_`` from a state holding the step-(a) predictions."""
    cfg = state.config
    params, trace = step_b(cfg, state.task, state.params, state.probs, t, labels, round_, state.prior)
    selected = np.sum([selection_counts(lab, cfg.num_classes) for lab in labels], axis=0)
    predicted = _predicted_counts(state.probs, cfg.num_classes)
    probs = predict_all(params, state.task.target_features, workers)
    portion = conf.portion_at_round(cfg.schedule, round_)
    report = RoundReport(round_, portion, t, selected, predicted,
                         _score(probs, state.task, cfg.num_classes), trace)
    return dataclasses.replace(state, params=params, probs=probs, round=round_), report


def run_self_training(config: RunConfig, out_dir=None, workers: int = 1,
                      include_baseline: bool = False) -> list[RoundReport]:
    """Run every round; with ``out_dir`` all artifacts are persisted for audit."""
    state, base = initial_state(config, workers)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        persist_setup(out, config, state)
        persist_round(out / "round_00", state, base, None)
    reports = [base] if include_baseline else []
    for _ in range(config.rounds):
        state, report, labels = run_round(state, workers)
        if out is not None:
            persist_round(out / f"round_{state.round:02d}", state, report, labels)
        reports.append(report)
    if out is not None:
        write_report([r for r in reports if r.round > 0], out / "report.csv", config.num_classes)
    return reports


# persistence ---------------------------------------------------------------

def persist_setup(out: Path, config: RunConfig, state: RunState) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    task = state.task
    for sub, ids, labs in (("source", task.source_ids, task.source_labels),
                           ("target_gt", task.target_ids, task.target_labels)):
        d = out / "data" / sub
        d.mkdir(parents=True, exist_ok=True)
        for i, lab in zip(ids, labs):
            save_label_map(lab, d / f"{i}.lmap", config.num_classes)
    records = [ManifestRecord(i, "source", None, out / "data" / "source" / f"{i}.lmap")
               for i in task.source_ids]
    write_manifest(out / "data" / "manifest.tsv", records)
    if state.prior is not None:
        save_prior(state.prior, out / "prior.pmap")


def persist_predictions(rdir: Path, task: SyntheticTask, params: ClassifierParams, probs) -> None:
    rdir.mkdir(parents=True, exist_ok=True)
    save_params(params, rdir / "params.bin")
    pdir = rdir / "probs"
    pdir.mkdir(exist_ok=True)
    records = []
    for i, p in zip(task.target_ids, probs):
        save_prob_map(p, pdir / f"{i}.pmap")
        records.append(ManifestRecord(i, "target", pdir / f"{i}.pmap", None))
    write_manifest(rdir / "manifest.tsv", records)


def persist_labels(rdir: Path, ids, labels, num_classes: int) -> None:
    ldir = rdir / "labels"
    ldir.mkdir(parents=True, exist_ok=True)
    for i, lab in zip(ids, labels):
        save_label_map(lab, ldir / f"{i}.lmap", num_classes)
    write_label_summary(labels, rdir / "label_summary.csv", num_classes)


def persist_round(rdir: Path, state: RunState, report: RoundReport, labels) -> None:
    rdir.mkdir(parents=True, exist_ok=True)
    if report.thresholds is not None:
        conf.write_thresholds(report.thresholds, rdir / "thresholds.csv")
        persist_labels(rdir, state.task.target_ids, labels, state.config.num_classes)
    persist_training(rdir, state, report)


def persist_training(rdir: Path, state: RunState, report: RoundReport) -> None:
    """Artifacts of step (b): params, target predictions, loss trace, round report."""
    cfg = state.config
    persist_predictions(rdir, state.task, state.params, state.probs)
    write_loss_trace([(report.round, e + 1, rep) for e, rep in enumerate(report.trace)],
                     rdir / "loss_trace.csv")
    write_report([report], rdir / "report.csv", cfg.num_classes)


LABEL_SUMMARY_HEADER = ["class", "selected", "target_pixels", "portion"]


def write_label_summary(labels, path, num_classes: int) -> None:
    """Per-class selected-pixel counts and their share of all target pixels."""
    counts = np.sum([selection_counts(lab, num_classes) for lab in labels], axis=0)
    total = sum(np.asarray(lab).size for lab in labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LABEL_SUMMARY_HEADER)
        for c in range(num_classes):
            w.writerow([c, int(counts[c]), total, f"{counts[c] / total:.6f}"])
        w.writerow(["ALL", int(counts.sum()), total, f"{counts.sum() / total:.6f}"])


def report_header(num_classes: int | None) -> list[str]:
    cols = ["round", "portion", "selected_fraction", "miou", "accuracy",
            "loss_total", "loss_source", "loss_target", "loss_regularizer"]
    if num_classes:
        for prefix in ("iou", "recall", "selected_portion", "ref_conf"):
            cols += [f"{prefix}_{c}" for c in range(num_classes)]
    return cols


def _fmt(v) -> str:
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.6f}"


def report_row(r: RoundReport, num_classes: int) -> list[str]:
    last = r.trace[-1] if r.trace else LossReport()
    total_pred = r.predicted.sum()
    sel_frac = r.selected.sum() / total_pred if total_pred else 0.0
    if r.thresholds is None:
        ref = np.full(num_classes, np.nan)
    elif r.thresholds.kind == conf.GLOBAL:
        ref = np.full(num_classes, r.thresholds.ref_conf[0])
    else:
        ref = r.thresholds.ref_conf
    row = [str(r.round)] + [_fmt(v) for v in (
        r.portion, sel_frac, r.scores.miou, r.scores.accuracy,
        last.total, last.source_term, last.target_term, last.regularizer_term)]
    for arr in (r.scores.iou, r.scores.recall, r.selected_portion, ref):
        row += [_fmt(v) for v in arr]
    return row


def write_report(reports, path, num_classes: int) -> None:
    """One CSV row per round with fixed six-decimal formatting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if not reports:
            log.warning("no round reports; writing header only to %s", path)
            w.writerow(report_header(None))
            return
        w.writerow(report_header(num_classes))
        for r in reports:
            w.writerow(report_row(r, num_classes))


def train_stage(config: RunConfig, out_dir, round_: int = 0, init=None, labels_dir=None,
                thresholds=None, prior=None, workers: int = 1) -> RoundReport:
    """Step (b) driven by files, writing the same artifacts as the matching run round.

    Round 0 pretrains on source. Later rounds load ``init`` params, the
    pseudo-labels in ``labels_dir`` and the thresholds CSV that produced them.
    """
    from .spatial_prior import load_prior
    from .tensor_io import load_label_map
    from .trainer import load_params

    out = Path(out_dir)
    if round_ == 0:
        state, report = initial_state(config, workers)
        persist_training(out, state, report)
        return report
    if init is None or labels_dir is None or thresholds is None:
        raise ValueError("rounds >= 1 need init params, pseudo-labels and thresholds")
    task = config.task()
    params = load_params(init)
    q = load_prior(prior) if prior is not None else None
    if config.variant == "cbst-sp" and q is None:
        raise ValueError("cbst-sp training needs --prior")
    state = RunState(config, task, params, predict_all(params, task.target_features, workers),
                     q, round_ - 1)
    t = conf.read_thresholds(thresholds)
    labels = [load_label_map(Path(labels_dir) / f"{i}.lmap", config.num_classes)
              for i in task.target_ids]
    state, report = retrain(state, t, labels, round_, workers)
    persist_training(out, state, report)
    return report


# audit ---------------------------------------------------------------------

def replay(run_dir) -> list[str]:
    """Recompute every round's step (a) from persisted params; return mismatch descriptions."""
    from .tensor_io import load_label_map
    from .trainer import load_params
    from .spatial_prior import load_prior

    run_dir = Path(run_dir)
    config = RunConfig.load(run_dir / "config.cfg")
    task = config.task()
    prior = load_prior(run_dir / "prior.pmap") if config.variant == "cbst-sp" else None
    problems = []
    for r in range(1, config.rounds + 1):
        prev = run_dir / f"round_{r - 1:02d}"
        cur = run_dir / f"round_{r:02d}"
        params = load_params(prev / "params.bin")
        probs = predict_all(params, task.target_features)
        portion = conf.portion_at_round(config.schedule, r)
        t = compute_thresholds(config.variant, probs, portion, config.num_classes, prior)
        stored = conf.read_thresholds(cur / "thresholds.csv")
        if not (np.array_equal(stored.ref_conf, t.ref_conf, equal_nan=True)
                and np.array_equal(stored.active, t.active)):
            problems.append(f"round {r}: thresholds differ")
        labels = pseudo_label(config.variant, probs, t, prior)
        for i, lab in zip(task.target_ids, labels):
            saved = load_label_map(cur / "labels" / f"{i}.lmap")
            if not np.array_equal(saved, lab):
                problems.append(f"round {r}: pseudo-labels differ for {i}")
    return problems


# sweeps --------------------------------------------------------------------

SWEEP_HEADER = ["p0", "dp", "rounds", "miou", "accuracy", "selected_fraction"]


def sweep(base: RunConfig, p0_values, dp_values, workers: int = 1):
    """Run one self-training per (p0, dp) cell; returns rows of final-round metrics."""
    if not p0_values or not dp_values:
        raise ValueError("sweep grid is empty")
    rows = []
    for p0 in p0_values:
        for dp in dp_values:
            cfg = dataclasses.replace(base, p0=p0, dp=dp, p_max=max(base.p_max, p0))
            final = run_self_training(cfg, workers=workers)[-1]
            total = final.predicted.sum()
            rows.append((p0, dp, cfg.rounds, final.scores.miou, final.scores.accuracy,
                         final.selected.sum() / total if total else 0.0))
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p0, dp, rounds, miou, acc, sel in rows:
            w.writerow([_fmt(p0), _fmt(dp), rounds, _fmt(miou), _fmt(acc), _fmt(sel)])
