"""Command-line entry point: ``run``, ``eval`` and ``compare``.

Exit codes: 0 success, 1 configuration or input-file error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import metrics as M
from .clustering import generate_pseudo_labels
from .core import validate_matrix
from .learner import run_training
from .synth import (
    FeatureFileError, LabelFileError, generate, read_features, read_labels,
    write_features, write_labels,
)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2

RUN_FILES = ("config.snapshot", "epochs.csv", "final_features.bin", "final_labels.csv", "summary.json")
# metrics that only exist for a training run or with query samples
TRAINING_ONLY = ("mean_loss",)
RETRIEVAL = ("map", "top1", "top5", "top10")


class InputError(Exception):
    """Bad user input: reported with exit code 1."""


def format_value(x):
    if x is None:
        return "nan"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def parse_value(text):
    if text == "nan":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def write_epochs_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(M.METRIC_COLUMNS)
        for row in history:
            d = row.to_dict()
            w.writerow([format_value(d[c]) for c in M.METRIC_COLUMNS])


def read_epochs_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not rows or tuple(rows[0]) != M.METRIC_COLUMNS:
        raise InputError(f"{path}: header does not match the metric columns")
    try:
        return [dict(zip(M.METRIC_COLUMNS, map(parse_value, r))) for r in rows[1:] if r]
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_pseudo_labels(path, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample_id", "pseudo_label"))
        w.writerows(enumerate(labels.assignment.tolist()))


def _json_ready(d):
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


# ------------------------------------------------------------------ run


def execute_run(cfg, out_dir):
    """Train one configuration and write its run directory. Returns the history."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    dataset = generate(cfg.synth)
    if not cfg["metrics.retrieval"]:
        dataset = replace(dataset, query_mask=np.zeros(len(dataset), dtype=bool))
    train = cfg.train
    started = time.perf_counter()
    state, labels, history = run_training(dataset, train, np.random.default_rng(cfg.seed))
    elapsed = time.perf_counter() - started

    write_epochs_csv(out / "epochs.csv", history)
    write_features(out / "final_features.bin", state.memory.rows)
    write_labels(out / "final_labels.csv", dataset.gt)
    write_pseudo_labels(out / "final_pseudo_labels.csv", labels)
    write_features(out / "final_params.bin", np.hstack([state.params.W, state.params.b[:, None]]))
    summary = {
        "seed": cfg.seed,
        "epochs": train.epochs,
        "num_samples": len(dataset),
        "num_identities": cfg.synth.num_identities,
        "sampler": train.sampler.kind,
        "loss_mode": train.loss_mode,
        "final": _json_ready(history[-1].to_dict()) if history else None,
        "seconds": round(elapsed, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return history


def cmd_run(args):
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(run__seed=args.seed)
    history = execute_run(cfg, args.out)
    if history:
        last = history[-1]
        print(f"epochs={len(history)} K={last.num_clusters} outliers={last.num_outliers} "
              f"nmi={format_value(last.nmi)} map={format_value(last.map)}")
    print(f"wrote {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- eval


def read_query_ids(path, n):
    """Query list: CSV with a ``sample_id`` header, one id per line."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not rows or [h.strip() for h in rows[0]] != ["sample_id"]:
        raise InputError(f"{path}: header must be sample_id")
    try:
        ids = [int(r[0]) for r in rows[1:] if r]
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    mask = np.zeros(n, dtype=bool)
    for i in ids:
        if not 0 <= i < n:
            raise InputError(f"{path}: sample_id {i} out of range for {n} samples")
        mask[i] = True
    return mask


def evaluate_features(F, gt, cfg, query_mask=None):
    """Cluster ``F`` as the training loop would and report the metric row."""
    train = cfg.train
    labels = generate_pseudo_labels(F, train.k, train.dbscan)
    row = M.clustering_metrics(F, labels, gt).to_dict()
    result = {k: v for k, v in row.items() if k not in TRAINING_ONLY + RETRIEVAL}
    if query_mask is not None:
        q, g = query_mask, ~query_mask
        try:
            mAP, cmc, skipped = M.retrieval_eval(F[q], gt.subset(q), F[g], gt.subset(g))
        except M.NoValidQueries as exc:
            raise InputError(str(exc)) from None
        result.update(map=mAP, top1=cmc[1], top5=cmc[5], top10=cmc[10], skipped_queries=skipped)
    return result


def cmd_eval(args):
    cfg = C.load(args.config)
    try:
        F = validate_matrix(read_features(args.features), normalized=True)
        gt = read_labels(args.labels)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if len(gt) != F.shape[0]:
        raise InputError(f"{args.features} has {F.shape[0]} rows but {args.labels} has {len(gt)} labels")
    mask = read_query_ids(args.queries, len(gt)) if args.queries else None
    print(json.dumps(_json_ready(evaluate_features(F, gt, cfg, mask))))
    return EXIT_OK


# -------------------------------------------------------------- compare


def final_row(run_dir):
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise InputError(f"{run_dir}: not a directory")
    rows = read_epochs_csv(run_dir / "epochs.csv")
    if not rows:
        raise InputError(f"{run_dir / 'epochs.csv'}: no epoch rows")
    return rows[-1]


def compare_rows(a, b):
    """``(column, a, b, b - a)`` for every metric column except the epoch."""
    out = []
    for c in M.METRIC_COLUMNS[1:]:
        va, vb = a[c], b[c]
        delta = None if va is None or vb is None else vb - va
        out.append((c, va, vb, delta))
    return out


def cmd_compare(args):
    table = compare_rows(final_row(args.run_a), final_row(args.run_b))
    print(f"{'metric':<16} {'a':>12} {'b':>12} {'b - a':>12}")
    for c, va, vb, d in table:
        cells = ["nan" if x is None else (f"{x:12.6f}" if isinstance(x, float) else f"{x:12d}")
                 for x in (va, vb, d)]
        print(f"{c:<16} " + " ".join(f"{x:>12}" for x in cells))
    return EXIT_OK


# ----------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="gsreid", description="Self-training experiments on synthetic identities.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration and write a run directory")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="cluster a feature dump and print its metrics as JSON")
    e.add_argument("--features", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--queries", default=None, help="CSV of query sample ids (enables mAP/CMC)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="final-epoch metric deltas between two runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (C.ConfigError, InputError, FeatureFileError, LabelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
