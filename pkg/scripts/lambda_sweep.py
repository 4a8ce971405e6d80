"""Penalty-weight sweep: interference magnitude and final-task loss vs lambda.

    python scripts/lambda_sweep.py --grid 0,1e4,1e6,1e8,1e10 --out runs/lambda
"""

import dataclasses
from pathlib import Path

from _common import QUICK, base_parser, seeds

from clora import runio
from clora.config import ExperimentConfig
from clora.train import hyper_sweep

COLUMNS = ["seed", "lambda", "a_mmd", "f_mmd", "interference_magnitude", "final_task_loss"]


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--grid", default="0,1e4,1e6,1e8")
    args = p.parse_args()
    grid = [float(v) for v in args.grid.split(",")]
    rows = []
    for seed in seeds(args.seeds):
        cfg = ExperimentConfig(seed=seed)
        if args.quick:
            cfg = dataclasses.replace(cfg, **QUICK)
        for r in hyper_sweep(cfg, "lambda", grid):
            rows.append([seed, r["value"]] + [r[c] for c in COLUMNS[2:]])
            print(" ".join(f"{c}={v!r}" for c, v in zip(COLUMNS, rows[-1])), flush=True)
    out = Path(args.out or "runs/lambda") / "lambda_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    runio.write_csv(out, COLUMNS, rows)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
