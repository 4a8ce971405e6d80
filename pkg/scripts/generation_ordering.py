"""Method comparison on the 5-concept generation sequence.

Trains every method on each seed, writes one run directory per (method,
seed) and prints mean/std of A_mmd and F_mmd per method.

    python scripts/generation_ordering.py --out runs/ordering
"""

import dataclasses
from pathlib import Path

from _common import QUICK, base_parser, print_report, run_and_save, seeds

from clora.config import ExperimentConfig

METHODS = ("clora", "lora_seq", "full_ft_seq", "gen_replay", "token_only")


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--methods", default=",".join(METHODS))
    args = p.parse_args()
    root = Path(args.out or "runs/ordering")
    dirs = []
    for seed in seeds(args.seeds):
        for method in args.methods.split(","):
            cfg = ExperimentConfig(method=method, seed=seed)
            if args.quick:
                cfg = dataclasses.replace(cfg, **QUICK)
            out = root / method / f"seed_{seed}"
            run_and_save(cfg, out)
            dirs.append(out)
    print_report(dirs)


if __name__ == "__main__":
    main()
