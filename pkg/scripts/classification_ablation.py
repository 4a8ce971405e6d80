"""Class-incremental toy sequence: C-LoRA with and without its penalty term,
plus the sequential baselines.

    python scripts/classification_ablation.py --out runs/classification
"""

import dataclasses
from pathlib import Path

from _common import QUICK, base_parser, print_report, run_and_save, seeds

from clora.config import Ablations, ExperimentConfig

VARIANTS = {
    "clora": dict(method="clora"),
    "clora_no_penalty": dict(method="clora", ablations=Ablations(eq3=True)),
    "lora_seq": dict(method="lora_seq"),
    "ewc": dict(method="ewc"),
    "full_ft_seq": dict(method="full_ft_seq"),
}


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--variants", default="clora,clora_no_penalty")
    args = p.parse_args()
    root = Path(args.out or "runs/classification")
    dirs = []
    for seed in seeds(args.seeds):
        for name in args.variants.split(","):
            cfg = ExperimentConfig(workload="classification", seed=seed, **VARIANTS[name])
            if args.quick:
                cfg = dataclasses.replace(cfg, **QUICK)
            out = root / name / f"seed_{seed}"
            run_and_save(cfg, out)
            dirs.append(out)
    print_report(dirs)


if __name__ == "__main__":
    main()
