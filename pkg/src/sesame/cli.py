"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from .data import (
    HEURISTICS,
    SUBSETS,
    cell_counts,
    gen_hans_style,
    gen_local_pattern_task,
    label_counts,
    read_corpus,
    write_corpus,
)
from .encoder import check_shapes, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, DivergenceError, FormatError, InputError
from .gradcheck import SCOPES, THRESHOLD, run_scope
from .model import param_shapes
from .training import Metrics, SweepCell, best_cell, cell_train_config, evaluate, run_experiment, sweep_cell, weights_rows

log = logging.getLogger("sesame")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers: fixed formatting so reruns are byte-identical
# ---------------------------------------------------------------------------


def _num(x) -> str:
    # 17 significant digits round-trip every float64
    return "" if x is None else format(float(x), ".17g")


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def metrics_payload(run: config_mod.RunConfig, metrics: Metrics) -> dict:
    out = metrics.to_dict()
    out["config"] = run.to_dict()
    return out


def write_heuristic_csv(path: Path, table: list[dict]) -> None:
    write_csv(path, ["heuristic", "subset", "accuracy"], [[r["heuristic"], r["subset"], _num(r["accuracy"])] for r in table])


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _split_summary(name: str, cases) -> dict:
    return {"file": f"{name}.tsv", "count": len(cases), "labels": label_counts(cases), "cells": cell_counts(cases)}


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.task == "hans-style":
        corpus = gen_hans_style(args.seed, args.per_case, train_size=args.train_size, dev_size=args.dev_size)
        splits = {"train": corpus.train, "dev": corpus.dev, "diagnostic": corpus.diagnostic}
    else:
        train_size = args.train_size if args.train_size is not None else 1000
        dev_size = args.dev_size if args.dev_size is not None else 200
        dev_seed = int(np.random.default_rng([args.seed, 2]).integers(2**31))
        splits = {
            "train": gen_local_pattern_task(args.seed, train_size),
            "dev": gen_local_pattern_task(dev_seed, dev_size),
        }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, cases in splits.items():
            write_corpus(out / f"{name}.tsv", cases)
        manifest = {
            "task": args.task,
            "seed": args.seed,
            "splits": {name: _split_summary(name, cases) for name, cases in splits.items()},
        }
        write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise ConfigurationError(f"cannot write to {out}: {exc.strerror or exc}") from None
    print(f"wrote {', '.join(f'{n} ({len(c)})' for n, c in splits.items())} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval / sweep
# ---------------------------------------------------------------------------


def _read(path: Path | None, key: str, required: bool = True):
    if path is None:
        if required:
            raise ConfigurationError(f"config key {key!r} is required for this command")
        return []
    try:
        cases = read_corpus(path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {key} {path}: {exc.strerror or exc}") from None
    if required and not cases:
        raise InputError(f"{key} {path} is empty")
    return cases


def _eval_splits(run: config_mod.RunConfig) -> dict:
    splits = {}
    for key, name in (("dev_data", "dev"), ("diagnostic_data", "diagnostic")):
        cases = _read(getattr(run, key), key, required=False)
        if cases:
            splits[name] = cases
    return splits


def cmd_train(args) -> int:
    run = config_mod.load(args.config)
    train_cases = _read(run.train_data, "train_data")
    splits = _eval_splits(run)
    result = run_experiment(run.model, run.train, train_cases, splits, run.task)
    out = run.out_dir
    write_json(out / "metrics.json", metrics_payload(run, result.metrics))
    save_checkpoint(out / "model.bin", result.params, {"config": run.to_dict()})
    if result.metrics.heuristic_table:
        write_heuristic_csv(out / "heuristics.csv", result.metrics.heuristic_table)
    for name, acc in result.metrics.split_accuracies.items():
        print(f"{name} accuracy {acc:.4f}")
    print(f"wrote {out / 'metrics.json'} and {out / 'model.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = config_mod.load(args.config)
    try:
        params, _ = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from None
    problems = check_shapes(params, param_shapes(run.model))
    if problems:
        raise ConfigurationError("checkpoint does not match the configured model:\n  " + "\n  ".join(problems))
    splits = _eval_splits(run)
    if not splits:
        raise ConfigurationError("config sets neither 'dev_data' nor 'diagnostic_data'; nothing to evaluate")
    metrics = Metrics()
    for name, cases in splits.items():
        ev = evaluate(params, run.model, cases, run.task)
        metrics.split_accuracies[name] = ev.accuracy
        if name == "diagnostic" or metrics.heuristic_table is None:
            metrics.heuristic_table = ev.heuristic_table
            metrics.layer_weights = weights_rows(ev.layer_weights)
        print(f"{name} accuracy {ev.accuracy:.4f}")
    out = run.out_dir
    write_json(out / "eval_metrics.json", metrics_payload(run, metrics))
    if metrics.heuristic_table:
        write_heuristic_csv(out / "heuristics.csv", metrics.heuristic_table)
    print(f"wrote {out / 'eval_metrics.json'}")
    return EXIT_OK


def _cell_dir(out: Path, index: int, sigma: float) -> Path:
    return out / f"cell{index}_sigma{sigma!r}"


def _sweep_job(job) -> tuple[str, float | None, str | None]:
    run, index, sigma, train_cases, dev_cases, extra = job
    tcfg = cell_train_config(run.train, index)
    cell = sweep_cell(run.model, tcfg, sigma, train_cases, dev_cases, run.task, extra)
    target = _cell_dir(run.out_dir, index, sigma)
    if cell.result is not None:
        cell_run = replace(run, model=replace(run.model, sigma=float(sigma)), train=tcfg)
        write_json(target / "metrics.json", metrics_payload(cell_run, cell.result.metrics))
        save_checkpoint(target / "model.bin", cell.result.params, {"config": cell_run.to_dict()})
    else:
        write_json(target / "failed.json", {"sigma": sigma, "error": cell.error})
    return cell.status, cell.dev_accuracy, cell.error


def sweep_workers() -> int:
    raw = os.environ.get("SESAME_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"SESAME_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError(f"SESAME_THREADS must be a positive integer, got {raw!r}")
    return value


def cmd_sweep(args) -> int:
    run = config_mod.load(args.config)
    if run.model.blur_mode == "none":
        raise ConfigurationError("a sigma sweep needs blur_mode on_outputs or on_values")
    train_cases = _read(run.train_data, "train_data")
    dev_cases = _read(run.dev_data, "dev_data")
    extra = {}
    if run.diagnostic_data is not None:
        extra["diagnostic"] = _read(run.diagnostic_data, "diagnostic_data")
    for sigma in run.sigma_grid:
        replace(run.model, sigma=sigma)  # validate every grid value before any training
    jobs = [(run, i, s, train_cases, dev_cases, extra) for i, s in enumerate(run.sigma_grid)]
    workers = min(sweep_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))
    else:
        outcomes = [_sweep_job(job) for job in jobs]
    cells = [SweepCell(sigma=s, status=st, dev_accuracy=acc, error=err) for s, (st, acc, err) in zip(run.sigma_grid, outcomes)]
    best = best_cell(cells)
    rows = [
        [_num(c.sigma), c.status, _num(c.dev_accuracy), "yes" if c is best else "no", _cell_dir(run.out_dir, i, c.sigma).name]
        for i, c in enumerate(cells)
    ]
    write_csv(run.out_dir / "sweep_summary.csv", ["sigma", "status", "dev_accuracy", "selected", "cell"], rows)
    for c in cells:
        acc = "failed" if c.dev_accuracy is None else f"{c.dev_accuracy:.4f}"
        print(f"sigma {c.sigma:g}: dev {acc}")
    print("selected sigma " + ("none (every cell failed)" if best is None else f"{best.sigma:g}"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failed = []
    for scope in scopes:
        report = run_scope(scope, seed=args.seed, inject_fault=args.inject_fault)
        status = "ok" if report.passed else "FAIL"
        print(f"{scope}: max relative error {report.max_error:.3e} ({report.worst}) {status} [{report.seconds:.1f}s]")
        if not report.passed:
            failed.append(f"{scope}: {report.worst} has relative error {report.max_error:.3e} >= {THRESHOLD:g}")
    if failed:
        raise CheckFailed("; ".join(failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _load_metrics(root: Path) -> list[tuple[str, dict]]:
    if not root.is_dir():
        raise ConfigurationError(f"metrics directory {root} does not exist")
    found = []
    for path in sorted(root.rglob("*metrics.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(payload, dict) or "split_accuracies" not in payload:
            continue
        found.append((path.relative_to(root).as_posix(), payload))
    if not found:
        raise ConfigurationError(f"no metrics files under {root}")
    return found


def cmd_report(args) -> int:
    root = Path(args.metrics)
    runs = _load_metrics(root)
    out = Path(args.out) if args.out else root

    weights: dict[int, list[float]] = {}
    for _, m in runs:
        for row in m.get("layer_weights") or []:
            weights.setdefault(int(row["layer"]), []).append(float(row["weight"]))
    write_csv(
        out / "layer_weights.csv",
        ["layer", "weight", "std", "runs"],
        [[k, _num(np.mean(v)), _num(np.std(v)), len(v)] for k, v in sorted(weights.items())],
    )

    cells: dict[tuple[str, str], list[float]] = {(h, s): [] for h in HEURISTICS for s in SUBSETS}
    for _, m in runs:
        for row in m.get("heuristic_table") or []:
            if row["accuracy"] is not None:
                cells[(row["heuristic"], row["subset"])].append(float(row["accuracy"]))
    write_csv(
        out / "heuristics.csv",
        ["heuristic", "subset", "accuracy", "std", "runs"],
        [
            [h, s, _num(np.mean(v)) if v else "", _num(np.std(v)) if v else "", len(v)]
            for (h, s), v in cells.items()
        ],
    )

    write_csv(
        out / "loss_curves.csv",
        ["run", "step", "loss"],
        [[name, step, _num(loss)] for name, m in runs for step, loss in enumerate(m.get("per_step_loss") or [])],
    )
    print(f"wrote layer_weights.csv, heuristics.csv, loss_curves.csv to {out} from {len(runs)} metrics file(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sesame", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its manifest")
    p.add_argument("--task", choices=config_mod.TASKS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--per-case", type=int, default=100, help="diagnostic cases per cell (hans-style)")
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--dev-size", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train, evaluate and save a checkpoint")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured splits")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train one model per blur sigma and select by dev accuracy")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="compare tape gradients with central differences")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="turn metrics files into plot-ready CSVs")
    p.add_argument("--metrics", required=True, help="directory searched recursively for *metrics.json")
    p.add_argument("--out", default=None, help="output directory (default: the metrics directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigurationError, InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
