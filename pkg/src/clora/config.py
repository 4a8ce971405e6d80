"""Experiment configuration: dataclasses, defaults and strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .workloads import classification as cls
from .workloads import diffusion as dif

METHODS = ("clora", "lora_seq", "full_ft_seq", "ewc", "gen_replay", "token_only")
WORKLOADS = ("diffusion", "classification")
PENALIZED = {"clora", "ewc"}
ADAPTER_METHODS = {"clora", "lora_seq"}

DEFAULT_LAMBDA = {"clora": 1e8, "ewc": 1e6}
DEFAULT_RANK = {"diffusion": 16, "classification": 8}
DEFAULT_STEPS = {"diffusion": 1500, "classification": 500}
DEFAULT_TASKS = {"diffusion": 5, "classification": 10}
# min(D1, D2) of the adapted projections
MAX_RANK = {"diffusion": min(dif.D_C, dif.D_F), "classification": cls.D_MODEL}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Ablations:
    token_init: bool = False  # (i) initialize concept tokens from the object word
    prompt_concept: bool = False  # (ii) keep the object token in the condition
    eq3: bool = False  # (iii) drop the forgetting penalty, keep the adapter stacks


@dataclass
class KernelConfig:
    degree: int = 3
    coef0: float = 1.0
    scale: Optional[float] = None
    unbiased: bool = False


@dataclass
class TrainConfig:
    method: str = "clora"
    workload: str = "diffusion"
    lam: Optional[float] = None
    rank: Optional[int] = None
    learning_rate: float = 5e-4
    steps_per_task: Optional[int] = None
    batch_size: int = 64
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)
    mix_ratio: float = 0.5
    prior_preservation: bool = False
    fisher_batches: int = 20
    pretrain_steps: Optional[int] = None


@dataclass
class ExperimentConfig(TrainConfig):
    n_tasks: Optional[int] = None
    samples_per_snapshot: int = 200
    n_train: int = 32  # few-shot concepts
    classes_per_task: int = 5
    class_radius: float = 5.0
    base_concepts: int = 64
    kernel: KernelConfig = field(default_factory=KernelConfig)
    embedder: str = "identity"
    forgetting: str = "max"
    out_dir: Optional[str] = None
    data_csv: Optional[str] = None  # replaces the synthetic task generator

    def resolved(self) -> "ExperimentConfig":
        """Copy with every workload-dependent default filled in and validated."""
        cfg = dataclasses.replace(self, ablations=dataclasses.replace(self.ablations),
                                  kernel=dataclasses.replace(self.kernel))
        if cfg.method not in METHODS:
            raise ConfigError("method", f"unknown method {cfg.method!r}")
        if cfg.workload not in WORKLOADS:
            raise ConfigError("workload", f"unknown workload {cfg.workload!r}")
        if cfg.method == "gen_replay" and cfg.workload != "diffusion":
            raise ConfigError("method", "gen_replay is only supported on the diffusion workload")
        if cfg.rank is None:
            cfg.rank = DEFAULT_RANK[cfg.workload]
        if cfg.steps_per_task is None:
            cfg.steps_per_task = DEFAULT_STEPS[cfg.workload]
        if cfg.n_tasks is None:
            cfg.n_tasks = DEFAULT_TASKS[cfg.workload]
        if cfg.pretrain_steps is None:
            cfg.pretrain_steps = 4000 if cfg.workload == "diffusion" else 3000
        if cfg.method in PENALIZED:
            if cfg.lam is None:
                cfg.lam = DEFAULT_LAMBDA[cfg.method]
        else:
            cfg.lam = 0.0
        if cfg.lam < 0:
            raise ConfigError("lambda", "must be >= 0")
        if cfg.n_tasks < 1:
            raise ConfigError("n_tasks", "must be >= 1")
        if cfg.workload == "classification" and cfg.n_tasks < 2:
            raise ConfigError("n_tasks", "classification needs at least two tasks")
        if not 1 <= cfg.rank <= MAX_RANK[cfg.workload]:
            raise ConfigError("rank", f"must lie in [1, {MAX_RANK[cfg.workload]}] for the {cfg.workload} sites")
        if not 0.0 <= cfg.mix_ratio < 1.0:
            raise ConfigError("mix_ratio", "must lie in [0, 1)")
        if cfg.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        if cfg.forgetting not in ("max", "diag"):
            raise ConfigError("forgetting", "must be 'max' or 'diag'")
        if cfg.embedder not in ("identity", "frozen_random_map"):
            raise ConfigError("embedder", f"unknown embedder {cfg.embedder!r}")
        return cfg

    @property
    def effective_lambda(self) -> float:
        if self.method == "clora" and self.ablations.eq3:
            return 0.0
        return float(self.lam or 0.0)


# JSON uses "lambda"; the attribute is ``lam``.
_RENAMES = {"lambda": "lam"}
_NESTED = {"ablations": Ablations, "kernel": KernelConfig}


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    out["lambda"] = out.pop("lam")
    return out


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build a config from a mapping, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, val in data.items():
        attr = _RENAMES.get(key, key)
        if attr == "lam" and key != "lambda":
            raise ConfigError(key, "unknown key")
        if attr not in names:
            raise ConfigError(key, "unknown key")
        if attr in _NESTED:
            kind = _NESTED[attr]
            if not isinstance(val, dict):
                raise ConfigError(key, "expected an object")
            sub = {f.name for f in dataclasses.fields(kind)}
            for k in val:
                if k not in sub:
                    raise ConfigError(f"{key}.{k}", "unknown key")
            val = kind(**val)
        kwargs[attr] = val
    return ExperimentConfig(**kwargs)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be an object")
    return from_dict(data)
