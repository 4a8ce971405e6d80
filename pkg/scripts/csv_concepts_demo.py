"""Train on concepts read from a CSV file instead of the built-in generator.

Writes ``concepts.csv`` (header ``x0,x1,concept_id``) with a few hand-placed
clusters, then runs C-LoRA on it. Point ``--csv`` at your own file to use
real 2-D data.

    python scripts/csv_concepts_demo.py --out runs/csv_demo
"""

import dataclasses
from pathlib import Path

import numpy as np
from _common import QUICK, base_parser, run_and_save

from clora import runio
from clora.config import ExperimentConfig

CENTERS = {"ring": (0.0, 3.0), "pair": (-3.0, -1.5), "spot": (2.5, -2.5)}


def write_demo(path: Path, n: int = 32, seed: int = 0) -> None:
    g = np.random.default_rng(seed)
    rows = []
    for name, (cx, cy) in CENTERS.items():
        for x, y in g.normal((cx, cy), 0.4, size=(n, 2)):
            rows.append([float(x), float(y), name])
    runio.write_csv(path, ["x0", "x1", "concept_id"], rows)


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--csv", default=None, help="concept file; a demo file is written when omitted")
    args = p.parse_args()
    root = Path(args.out or "runs/csv_demo")
    root.mkdir(parents=True, exist_ok=True)
    path = Path(args.csv) if args.csv else root / "concepts.csv"
    if not args.csv:
        write_demo(path)
    n_tasks = len({line.rsplit(",", 1)[1] for line in path.read_text().splitlines()[1:] if line})
    cfg = ExperimentConfig(data_csv=str(path), n_tasks=n_tasks, seed=int(args.seeds.split(",")[0]))
    if args.quick:
        cfg = dataclasses.replace(cfg, **QUICK)
    run_and_save(cfg, root / "run")


if __name__ == "__main__":
    main()
