"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Failures
print one JSON line ``{"error": kind, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import confidence as conf
from . import orchestrator as orch
from .evaluation import evaluate_miou
from .pseudolabel import generate
from .spatial_prior import build_prior, load_prior, resample_prior, save_prior
from .tensor_io import FormatError, IGNORE, label_map_classes, load_label_map, load_prob_map, read_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.HelpFormatter):
    # fixed width so help text does not depend on the terminal
    def __init__(self, prog):
        super().__init__(prog, width=88, max_help_position=32)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selftrain", formatter_class=_Formatter,
                description="Class-balanced self-training for unsupervised domain adaptation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=1, help="parallel workers for per-image stages")

    sp = add("threshold", "Compute pseudo-label thresholds from target probability maps.")
    sp.add_argument("--manifest", required=True, help="manifest listing target probability maps")
    sp.add_argument("--variant", required=True, choices=orch.VARIANTS, help="st: global k; cbst/cbst-sp: per-class k_c")
    sp.add_argument("--portion", required=True, type=float, help="selection portion p in (0, 1]")
    sp.add_argument("--prior", help="spatial prior file (required for cbst-sp)")
    sp.add_argument("--out", required=True, help="output thresholds CSV")
    workers(sp)

    sp = add("label", "Generate pseudo-label maps for every target record.")
    sp.add_argument("--manifest", required=True, help="manifest listing target probability maps")
    sp.add_argument("--thresholds", required=True, help="thresholds CSV from the threshold command")
    sp.add_argument("--prior", help="spatial prior file; selects cbst-sp with per-class thresholds")
    sp.add_argument("--out", required=True, help="output directory (labels/*.lmap, label_summary.csv)")
    workers(sp)

    sp = add("prior", "Build a spatial prior from the source label maps of a manifest.")
    sp.add_argument("--manifest", required=True, help="manifest with source label maps")
    sp.add_argument("--kernel-size", type=int, default=71, help="odd Gaussian kernel size in pixels (default 71)")
    sp.add_argument("--sigma", type=float, default=0.0, help="Gaussian sigma in pixels (default kernel-size/6)")
    sp.add_argument("--height", type=int, help="resample to this target height")
    sp.add_argument("--width", type=int, help="resample to this target width")
    sp.add_argument("--out", required=True, help="output prior file (PMAP with prior flag)")
    sp.add_argument("--csv", help="also export the class planes as long-format CSV")

    sp = add("train", "Run one training stage (round 0 pretraining or step b of a round).")
    sp.add_argument("--config", required=True, help="run config file (key=value)")
    sp.add_argument("--out", required=True, help="output round directory")
    sp.add_argument("--round", type=int, default=0, help="round index; 0 pretrains on source")
    sp.add_argument("--init", help="params.bin of the previous round")
    sp.add_argument("--labels", help="directory of pseudo-label maps for this round")
    sp.add_argument("--thresholds", help="thresholds CSV used to produce the pseudo-labels")
    sp.add_argument("--prior", help="spatial prior file (cbst-sp)")
    workers(sp)

    sp = add("run", "Run the full self-training loop and persist every round.")
    sp.add_argument("--config", required=True, help="run config file (key=value)")
    sp.add_argument("--out", help="run directory (default: <config stem>_run)")
    workers(sp)

    sp = add("eval", "Per-class IoU and mIoU of predictions against ground truth.")
    sp.add_argument("--pred", required=True, help="directory of predicted .lmap or .pmap files")
    sp.add_argument("--gt", required=True, help="directory of ground-truth .lmap files")
    sp.add_argument("--num-classes", type=int, help="class count (default: from ground-truth headers)")
    sp.add_argument("--out", help="per-class IoU CSV (default: stdout)")

    sp = add("sweep", "Grid over initial portion p0 and per-round increment dp.")
    sp.add_argument("--config", required=True, help="base run config file")
    sp.add_argument("--p0", required=True, type=_floats, help="comma-separated p0 values")
    sp.add_argument("--dp", required=True, type=_floats, help="comma-separated dp values")
    sp.add_argument("--out", required=True, help="output CSV, one row per (p0, dp)")
    workers(sp)

    sp = add("replay", "Recompute step (a) of every round from persisted params and compare.")
    sp.add_argument("--run", required=True, help="run directory")
    return p


def _targets(manifest):
    recs = [r for r in manifest.by_role("target") if r.prob_path is not None]
    if not recs:
        raise FormatError("manifest has no target probability maps")
    return recs


def cmd_threshold(args) -> int:
    m = read_manifest(args.manifest)
    probs = [load_prob_map(r.prob_path).values for r in _targets(m)]
    prior = None
    if args.variant == "cbst-sp":
        if not args.prior:
            raise UsageError("threshold: --prior is required for cbst-sp")
        prior = load_prior(args.prior)
    t = orch.compute_thresholds(args.variant, probs, args.portion, m.num_classes, prior)
    conf.write_thresholds(t, args.out)
    return EXIT_OK


def cmd_label(args) -> int:
    m = read_manifest(args.manifest)
    recs = _targets(m)
    t = conf.read_thresholds(args.thresholds)
    prior = load_prior(args.prior) if args.prior else None
    if t.kind == conf.GLOBAL:
        if prior is not None:
            raise UsageError("label: a prior needs per-class thresholds")
        variant = "st"
    else:
        variant = "cbst-sp" if prior is not None else "cbst"
    q = prior.values if prior is not None else None
    labels = [generate(load_prob_map(r.prob_path).values, t, variant, q) for r in recs]
    orch.persist_labels(Path(args.out), [r.id for r in recs], labels, m.num_classes)
    return EXIT_OK


def cmd_prior(args) -> int:
    m = read_manifest(args.manifest)
    recs = [r for r in m.by_role("source") if r.label_path is not None]
    if not recs:
        raise FormatError("manifest has no source label maps")
    labels = [load_label_map(r.label_path, m.num_classes) for r in recs]
    sigma = args.sigma if args.sigma > 0 else None
    prior = build_prior(labels, m.num_classes, args.kernel_size, sigma)
    if args.height or args.width:
        _, h, w = prior.shape
        prior = resample_prior(prior, args.height or h, args.width or w)
    save_prior(prior, args.out)
    if args.csv:
        c, h, w = prior.shape
        with open(args.csv, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["class", "row", "col", "q"])
            for ci in range(c):
                for r in range(h):
                    for col in range(w):
                        wr.writerow([ci, r, col, f"{prior.values[ci, r, col]:.9e}"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = orch.RunConfig.load(args.config)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.round < 0:
        raise UsageError("train: --round must be >= 0")
    if args.round > 0 and not (args.init and args.labels and args.thresholds):
        raise UsageError("train: rounds >= 1 need --init, --labels and --thresholds")
    orch.train_stage(cfg, args.out, args.round, args.init, args.labels, args.thresholds,
                     args.prior, args.workers)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = orch.RunConfig.load(args.config)
    out = args.out or f"{Path(args.config).stem}_run"
    orch.run_self_training(cfg, out, workers=args.workers)
    return EXIT_OK


def _load_pred(path: Path) -> np.ndarray:
    if path.suffix == ".pmap":
        return conf.predicted_labels(load_prob_map(path).values)
    return load_label_map(path)


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(gt_dir.glob("*.lmap"))
    if not gt_files:
        raise FormatError(f"no .lmap files in {gt_dir}")
    preds, gts = [], []
    for g in gt_files:
        cands = [pred_dir / f"{g.stem}.lmap", pred_dir / f"{g.stem}.pmap"]
        found = [c for c in cands if c.exists()]
        if not found:
            raise FormatError(f"no prediction for {g.stem} in {pred_dir}")
        preds.append(_load_pred(found[0]))
        gts.append(load_label_map(g, args.num_classes))
    c = args.num_classes or label_map_classes(gt_files[0])
    if not c:
        raise UsageError("eval: class count unknown; pass --num-classes")
    preds = [np.where(p == IGNORE, IGNORE, p) for p in preds]
    s = evaluate_miou(preds, gts, c)
    cm = s.confusion
    rows = [["class", "iou", "tp", "fp", "fn"]]
    for k in range(c):
        tp = cm[k, k]
        rows.append([k, orch._fmt(s.iou[k]), tp, cm[:, k].sum() - tp, cm[k, :].sum() - tp])
    rows.append(["mIoU", orch._fmt(s.miou), "", "", ""])
    if args.out:
        with open(args.out, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    print(f"mIoU {s.miou:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = orch.RunConfig.load(args.config)
    rows = orch.sweep(cfg, args.p0, args.dp, workers=args.workers)
    orch.write_sweep(rows, args.out)
    return EXIT_OK


def cmd_replay(args) -> int:
    problems = orch.replay(args.run)
    if problems:
        raise ValueError("; ".join(problems))
    print(f"replay ok: {args.run}")
    return EXIT_OK


COMMANDS = {
    "threshold": cmd_threshold, "label": cmd_label, "prior": cmd_prior, "train": cmd_train,
    "run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep, "replay": cmd_replay,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except (ValueError, FormatError, OSError) as e:
        return _fail("data", str(e), EXIT_DATA)


def main() -> None:
    sys.exit(dispatch())
