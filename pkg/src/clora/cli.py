"""Command line: ``clora run | sweep | report | analyze-interference``.

Exit codes: 0 success, 2 bad input (config, sweep parameter, data file,
missing metrics), 3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics as M
from . import runio
from .config import ConfigError, ExperimentConfig, load
from .train import (LAMBDA_GRID, LR_GRID, RANK_GRID, SWEEP_PARAMS, NonFiniteLoss, UnsupportedMethod,
                    run_experiment, sweep_configs)
from .workloads.ingest import IngestError

EXIT_OK, EXIT_INPUT, EXIT_NONFINITE = 0, 2, 3
DEFAULT_GRIDS = {"lambda": LAMBDA_GRID, "rank": RANK_GRID, "lr": LR_GRID}


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_config(path) -> ExperimentConfig:
    try:
        cfg = load(path)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except TypeError as exc:  # wrong value type for a nested block
        raise InputError(f"config: {exc}") from None
    return cfg


def _parse_seeds(text):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"--seeds: cannot parse {text!r}") from None


def _run_one(cfg: ExperimentConfig, out: Path) -> dict:
    res = run_experiment(cfg)
    runio.write_run(res, out)
    return res.metrics


# ---------------------------------------------------------------------- run


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out or cfg.out_dir or "runs/run")
    jobs = [(cfg, out)] if seeds is None else [
        (dataclasses.replace(cfg, seed=s), out / f"seed_{s}") for s in seeds]
    for c, _ in jobs:
        c.resolved()  # fail fast before any training
    for c, d in jobs:
        print(runio.metrics_line(_run_one(c, d)))
    return EXIT_OK


# -------------------------------------------------------------------- sweep


def _parse_grid(param: str, text):
    if text is None:
        return list(DEFAULT_GRIDS[param])
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--grid: cannot parse {text!r}") from None
    if not vals:
        raise InputError("--grid is empty")
    if param == "rank":
        if any(v != int(v) for v in vals):
            raise InputError("--grid: ranks must be integers")
        vals = [int(v) for v in vals]
    return vals


def _threads() -> int:
    raw = os.environ.get("CLORA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"CLORA_THREADS must be an integer, got {raw!r}") from None


def _sweep_job(job):
    cfg, out = job
    return _run_one(cfg, out)


SWEEP_COLUMNS = {
    "diffusion": ("value", "a_mmd", "f_mmd", "interference_magnitude", "final_task_loss"),
    "classification": ("value", "a_n", "f_n", "interference_magnitude", "final_task_loss"),
}


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise InputError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    base = _load_config(args.config)
    grid = _parse_grid(args.param, args.grid)
    cfgs = sweep_configs(base, args.param, grid)
    for c in cfgs:
        try:
            c.resolved()
        except ConfigError as exc:
            raise ConfigError(exc.key, f"grid value rejected: {exc}") from None
    out = Path(args.out or base.out_dir or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(c, out / f"{args.param}_{v!r}") for v, c in zip(grid, cfgs)]
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    cols = SWEEP_COLUMNS[cfgs[0].resolved().workload]
    rows = [[v] + [m[c] for c in cols[1:]] for v, m in zip(grid, results)]
    runio.write_csv(out / "sweep.csv", list(cols), rows)
    sys.stdout.write((out / "sweep.csv").read_text())
    return EXIT_OK


# ------------------------------------------------------------------- report


def config_hash(config: dict) -> str:
    """Hash of a run's config with the per-run fields (seed, out_dir) removed."""
    keep = {k: v for k, v in config.items() if k not in ("seed", "out_dir")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:10]


REPORT_METRICS = {"diffusion": ("a_mmd", "f_mmd"), "classification": ("a_n", "f_n")}


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def build_report(run_dirs) -> dict[str, list[dict]]:
    groups: dict = {}
    for d in run_dirs:
        m = runio.read_metrics(d)
        cfg_path = Path(d) / "config.json"
        cfg = json.loads(cfg_path.read_text()) if cfg_path.is_file() else {}
        key = (m["workload"], m["method"], config_hash(cfg))
        groups.setdefault(key, []).append(m)
    tables: dict[str, list[dict]] = {}
    for (workload, method, h), runs in sorted(groups.items()):
        row = {"method": method, "config_hash": h, "n_runs": len(runs),
               "seeds": " ".join(str(r["seed"]) for r in runs)}
        for k in ("n_param_train_pct", "n_param_store_pct") + REPORT_METRICS[workload]:
            row[k + "_mean"], row[k + "_std"] = _stats(r.get(k) for r in runs)
        tables.setdefault(workload, []).append(row)
    return tables


def cmd_report(args) -> int:
    missing = [d for d in args.run_dirs if not (Path(d) / "metrics.json").is_file()]
    if missing:
        raise InputError(f"no metrics.json in {missing[0]}")
    tables = build_report(args.run_dirs)
    if args.format == "json":
        sys.stdout.write(runio.dumps(tables))
        return EXIT_OK
    chunks = []
    for workload, rows in tables.items():
        header = ["workload"] + list(rows[0])
        chunks.append(runio._csv_text(header, [[workload] + list(r.values()) for r in rows]))
    sys.stdout.write("\r\n".join(chunks))
    return EXIT_OK


# ----------------------------------------------------- analyze-interference


def cmd_analyze_interference(args) -> int:
    ck_dir = Path(args.run_dir) / "checkpoints"
    paths = sorted(ck_dir.glob("task_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise InputError(f"no checkpoints in {ck_dir}")
    deltas = [runio.load_checkpoint(p).delta for p in paths]
    rows = []
    for pair in M.sequence_interference(deltas):
        rows.append([pair.prev_task, pair.task, "all", pair.opposite_fraction, pair.opposite_magnitude])
        for site in sorted(deltas[pair.task - 1]):
            frac, mag = M.interference_stats(deltas[pair.prev_task - 1][site], deltas[pair.task - 1][site])
            rows.append([pair.prev_task, pair.task, site, frac, mag])
    text = runio._csv_text(["prev_task", "task", "site", "opposite_fraction", "opposite_magnitude"], rows)
    if args.out:
        Path(args.out).write_text(text, newline="")
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clora", description="Continual low-rank adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one task sequence and write a run directory")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seeds", help="comma-separated seeds; one sub-directory each")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="rerun the sequence over a grid of one hyperparameter")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True)
    s.add_argument("--grid", help="comma-separated values (default: the standard grid)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="mean and std per (method, config) across seeds")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.set_defaults(func=cmd_report)

    a = sub.add_parser("analyze-interference", help="opposite-sign update statistics from checkpoints")
    a.add_argument("run_dir")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_interference)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INPUT
    except (InputError, IngestError, runio.MissingMetrics, UnsupportedMethod) as exc:
        _err(str(exc))
        return EXIT_INPUT
    except NonFiniteLoss as exc:
        _err(str(exc))
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
