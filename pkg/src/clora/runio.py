"""Run directories: writing, checkpoint loading and metric files.

Layout::

    config.json                 resolved config
    checkpoints/task_k.json     everything learned up to task k
    snapshots/task_k_samples.csv    X_{k,k} (generation)
    snapshots/task_k_accuracy.csv   row A_{k,.} (classification)
    metrics.json
    log.txt

JSON floats are written with ``repr`` (shortest round-trip decimal), so
every float64 reads back bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import to_dict
from .lora import AdapterStack, LoraPair


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def write_csv(path, header: list[str], rows) -> None:
    Path(path).write_text(_csv_text(header, rows), newline="")


def write_run(result, out_dir) -> Path:
    """Write the full run directory for a ``train.RunResult``."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(exist_ok=True)
    state = result.state
    (out / "config.json").write_text(dumps(to_dict(result.cfg)))
    for k, ck in enumerate(state.checkpoints, start=1):
        (out / "checkpoints" / f"task_{k}.json").write_text(dumps(ck))
    if result.cfg.workload == "diffusion":
        for k, x in sorted(state.own_samples.items()):
            write_csv(out / "snapshots" / f"task_{k}_samples.csv", ["x0", "x1"], x.tolist())
    else:
        for k, row in enumerate(state.accuracy, start=1):
            write_csv(out / "snapshots" / f"task_{k}_accuracy.csv", ["task", "accuracy"],
                      [(j, float(a)) for j, a in enumerate(row, start=1)])
    (out / "metrics.json").write_text(dumps(result.metrics))
    (out / "log.txt").write_text("".join(line + "\n" for line in state.log_lines))
    return out


class MissingMetrics(FileNotFoundError):
    pass


def read_metrics(run_dir) -> dict:
    path = Path(run_dir) / "metrics.json"
    if not path.is_file():
        raise MissingMetrics(f"{run_dir}: no metrics.json")
    return json.loads(path.read_text())


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    task: int
    method: str
    workload: str
    stacks: dict[str, AdapterStack]
    rank: Optional[int] = None
    dense: dict[str, np.ndarray] = field(default_factory=dict)
    tokens: dict[int, np.ndarray] = field(default_factory=dict)
    head: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    delta: dict[str, np.ndarray] = field(default_factory=dict)


def _arr(values, shape) -> np.ndarray:
    return np.array(values, dtype=np.float64).reshape(shape)


def checkpoint_from_dict(data: dict) -> Checkpoint:
    stacks = {}
    rank = None
    for site, info in data["sites"].items():
        d1, d2 = info["dims"]
        rank = info["rank"]
        pairs = []
        for p in info["pairs"]:
            a = _arr(p["a"], (d1, -1))
            b = _arr(p["b"], (a.shape[1], d2))
            a.flags.writeable = b.flags.writeable = False
            pairs.append(LoraPair(a, b, p["task_id"], frozen=True))
        stacks[site] = AdapterStack(site, _arr(info["w_init"], (d1, d2)), past=pairs)
    ck = Checkpoint(data["task"], data["method"], data["workload"], stacks, rank)
    for name, d in data.get("dense", {}).items():
        ck.dense[name] = _arr(d["data"], d["shape"])
    for name, d in data.get("delta", {}).items():
        ck.delta[name] = _arr(d["data"], d["shape"])
    for k, v in data.get("tokens", {}).items():
        ck.tokens[int(k)] = _arr(v, (1, -1))
    for k, h in data.get("head", {}).items():
        w = _arr(h["w"], h["shape"])
        ck.head[int(k)] = (w, _arr(h["b"], (1, w.shape[1])))
    return ck


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- summaries

LINE_KEYS = ("method", "seed", "workload", "a_mmd", "f_mmd", "a_n", "f_n",
             "n_param_train_pct", "n_param_store_pct", "interference_magnitude", "final_task_loss")


def metrics_line(metrics: dict) -> str:
    """One-line summary; keys with no value for the workload are skipped."""
    parts = []
    for k in LINE_KEYS:
        v = metrics.get(k)
        if v is None:
            continue
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)
