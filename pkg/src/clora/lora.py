"""Per-task low-rank weight deltas stacked on a frozen base matrix.

The weight at a projection site after task ``t`` is

    W_t = W_init + sum_{t' < t} A_t' B_t' + A_t B_t

and the active pair is discouraged from touching entries already edited by
earlier tasks through ``|| |sum_{t'<t} A_t' B_t'| * (A_t B_t) ||_F^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import numkit as nk
from .numkit import Operand

INIT_STD = 0.02


class LifecycleError(RuntimeError):
    """An adapter operation was called in the wrong lifecycle state."""


@dataclass
class LoraPair:
    a: np.ndarray  # D1 x r
    b: np.ndarray  # r x D2
    task_id: int
    frozen: bool = False

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.a @ self.b


@dataclass
class AdapterStack:
    site_id: str
    w_init: np.ndarray
    past: list = field(default_factory=list)
    active: Optional[LoraPair] = None

    def __post_init__(self):
        self.w_init = nk.as_matrix(self.w_init).copy()
        self.w_init.flags.writeable = False
        self.cached_past_sum = np.zeros_like(self.w_init)
        self.cached_past_abs = np.zeros_like(self.w_init)
        if self.past:
            self._refresh_cache()

    @property
    def shape(self):
        return self.w_init.shape

    def _refresh_cache(self):
        total = np.zeros_like(self.w_init)
        for p in self.past:
            total += p.a @ p.b
        self.cached_past_sum = total
        self.cached_past_abs = np.abs(total)

    def next_task_id(self) -> int:
        ids = [p.task_id for p in self.past]
        if self.active is not None:
            ids.append(self.active.task_id)
        return max(ids, default=0) + 1


def new_task_pair(stack: AdapterStack, r: int, seed, task_id: Optional[int] = None) -> LoraPair:
    """Install a fresh active pair: A ~ N(0, 0.02^2), B = 0."""
    if stack.active is not None:
        raise LifecycleError(f"site {stack.site_id}: active pair already present")
    d1, d2 = stack.shape
    if not 1 <= r <= min(d1, d2):
        raise ValueError(f"rank {r} outside [1, {min(d1, d2)}] for site {stack.site_id}")
    if task_id is None:
        task_id = stack.next_task_id()
    elif stack.past and task_id <= stack.past[-1].task_id:
        raise LifecycleError(f"task id {task_id} does not exceed past ids")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pair = LoraPair(a=gen.normal(0.0, INIT_STD, size=(d1, r)), b=np.zeros((r, d2)), task_id=task_id)
    stack.active = pair
    return pair


def _active_factors(stack, a, b):
    if a is None and b is None:
        if stack.active is None:
            return None
        return stack.active.a, stack.active.b
    return (stack.active.a if a is None else a), (stack.active.b if b is None else b)


def effective_weight(stack: AdapterStack, a: Optional[Operand] = None, b: Optional[Operand] = None) -> Operand:
    """``W_init + past sum (+ A B)``.

    ``a``/``b`` substitute tape nodes for the active factors during training.
    """
    base = stack.w_init + stack.cached_past_sum
    factors = _active_factors(stack, a, b)
    if factors is None:
        return base
    return nk.add(base, nk.matmul(*factors))


def forgetting_penalty(stack: AdapterStack, a: Optional[Operand] = None, b: Optional[Operand] = None) -> Operand:
    if stack.active is None:
        raise LifecycleError(f"site {stack.site_id}: no active pair to penalize")
    a, b = _active_factors(stack, a, b)
    return nk.frobenius_sq(nk.hadamard(stack.cached_past_abs, nk.matmul(a, b)))


def freeze_task(stack: AdapterStack) -> AdapterStack:
    if stack.active is None:
        raise LifecycleError(f"site {stack.site_id}: nothing to freeze")
    pair = stack.active
    pair.a = np.array(pair.a, copy=True)
    pair.b = np.array(pair.b, copy=True)
    pair.a.flags.writeable = False
    pair.b.flags.writeable = False
    pair.frozen = True
    stack.past.append(pair)
    stack.active = None
    stack.cached_past_sum = stack.cached_past_sum + pair.a @ pair.b
    stack.cached_past_abs = np.abs(stack.cached_past_sum)
    return stack


def fold_in(stack: AdapterStack) -> np.ndarray:
    """Collapse every frozen delta into one dense, read-only matrix."""
    if stack.active is not None:
        raise LifecycleError(f"site {stack.site_id}: fold_in with an unfrozen active pair")
    w = stack.w_init + stack.cached_past_sum
    w.flags.writeable = False
    return w


# ------------------------------------------------------------ storage budget


@dataclass(frozen=True)
class StoragePlan:
    per_task_params: int
    full_delta_params: int
    tasks_so_far: int
    stored_params: int
    backbone_params: int
    trained_fraction: float
    stored_fraction: float

    @property
    def trained_pct(self) -> float:
        return 100.0 * self.trained_fraction

    @property
    def stored_pct(self) -> float:
        return 100.0 * self.stored_fraction


def per_task_cost(d1: int, d2: int, r: int) -> int:
    return 2 * r * (d1 + d2)


def storage_plan(
    stacks: Iterable[AdapterStack],
    backbone_params: int,
    tasks_so_far: Optional[int] = None,
    rank: Optional[int] = None,
) -> StoragePlan:
    """Parameter accounting for stored adapters.

    Adapters are kept individually until their count exceeds the size of the
    summed delta matrices; past that point only the summed matrices are kept.
    ``stored_fraction`` includes the backbone itself (1.0 == backbone only).
    """
    if backbone_params <= 0:
        raise ValueError("backbone_params must be positive")
    stacks = list(stacks)
    per_task = 0
    full = 0
    for s in stacks:
        d1, d2 = s.shape
        r = rank
        if r is None:
            pair = s.active or (s.past[-1] if s.past else None)
            if pair is None:
                raise ValueError(f"site {s.site_id}: rank unknown without any pair")
            r = pair.rank
        per_task += per_task_cost(d1, d2, r)
        full += d1 * d2
    if tasks_so_far is None:
        tasks_so_far = max((len(s.past) for s in stacks), default=0)
    stored = min(tasks_so_far * per_task, full)
    return StoragePlan(
        per_task_params=per_task,
        full_delta_params=full,
        tasks_so_far=tasks_so_far,
        stored_params=stored,
        backbone_params=backbone_params,
        trained_fraction=per_task / backbone_params,
        stored_fraction=(backbone_params + stored) / backbone_params,
    )
