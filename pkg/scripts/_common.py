"""Shared bits for the experiment scripts."""

import argparse
import json
import sys
from pathlib import Path

from clora import runio
from clora.cli import build_report
from clora.train import run_experiment


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--out", default=None, help="root directory for run directories")
    p.add_argument("--quick", action="store_true", help="tiny budgets, for a smoke test")
    return p


def seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


QUICK = dict(steps_per_task=30, pretrain_steps=60, samples_per_snapshot=50)


def run_and_save(cfg, out_dir: Path) -> dict:
    res = run_experiment(cfg)
    runio.write_run(res, out_dir)
    print(runio.metrics_line(res.metrics), flush=True)
    return res.metrics


def print_report(run_dirs) -> None:
    sys.stdout.write(runio.dumps(build_report([str(d) for d in run_dirs])))


def dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
