"""Evaluation: polynomial-kernel MMD, generation and classification scores,
and sequential-update interference statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .numkit import ShapeError

REPORT_SCALE = 1e3


class MetricError(ValueError):
    """Metric inputs are missing or the metric is undefined."""


@dataclass(frozen=True)
class PolyKernel:
    degree: int = 3
    coef0: float = 1.0
    scale: Optional[float] = None  # None -> 1 / dim

    def gram(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = 1.0 / x.shape[1] if self.scale is None else self.scale
        return (s * (x @ y.T) + self.coef0) ** self.degree


def _check_sets(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) == 0 or len(y) == 0:
        raise MetricError("MMD needs two nonempty sample matrices")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"MMD sample dims differ: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def mmd2(x, y, kernel: PolyKernel = PolyKernel(), unbiased: bool = False) -> float:
    """Squared MMD between sample sets ``x`` and ``y``.

    The default biased V-statistic is exactly zero for identical sets. The
    unbiased U-statistic drops the diagonal terms and is clamped at 0.
    """
    x, y = _check_sets(x, y)
    kxx, kyy, kxy = kernel.gram(x, x), kernel.gram(y, y), kernel.gram(x, y)
    if not unbiased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise MetricError("unbiased MMD needs at least two samples per set")
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return max(0.0, float(a + b - 2.0 * kxy.mean()))


class FeatureEmbedder:
    """Frozen map applied to samples before MMD (identity or random linear)."""

    def __init__(self, kind: str = "identity", in_dim: int = 2, out_dim: int = 16, seed: int = 0):
        self.kind = kind
        if kind == "identity":
            self.matrix = None
        elif kind == "frozen_random_map":
            m = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
            m.flags.writeable = False
            self.matrix = m
        else:
            raise ValueError(f"unknown embedder kind {kind!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x.copy() if self.matrix is None else x @ self.matrix


def a_mmd(finals: Mapping[int, np.ndarray], references: Mapping[int, np.ndarray],
          embedder: Optional[FeatureEmbedder] = None, kernel: PolyKernel = PolyKernel(),
          unbiased: bool = False) -> float:
    """Mean over tasks of MMD(F(X_{D,j}), F(X_{N,j})), unscaled."""
    embedder = embedder or FeatureEmbedder()
    if not references:
        raise MetricError("no tasks to score")
    vals = []
    for j in sorted(references):
        if j not in finals:
            raise MetricError(f"missing final samples for task {j}")
        vals.append(mmd2(embedder(references[j]), embedder(finals[j]), kernel, unbiased))
    return float(np.mean(vals))


def f_mmd(own: Mapping[int, np.ndarray], finals: Mapping[int, np.ndarray],
          embedder: Optional[FeatureEmbedder] = None, kernel: PolyKernel = PolyKernel(),
          unbiased: bool = False) -> float:
    """Mean over j < N of MMD(F(X_{j,j}), F(X_{N,j})), unscaled."""
    embedder = embedder or FeatureEmbedder()
    n = len(finals)
    if n < 2:
        raise MetricError("forgetting is undefined for a single task")
    tasks = sorted(finals)[:-1]
    vals = []
    for j in tasks:
        if j not in own:
            raise MetricError(f"missing snapshot X_{{{j},{j}}} for task {j}")
        vals.append(mmd2(embedder(own[j]), embedder(finals[j]), kernel, unbiased))
    return float(np.mean(vals))


def a_n_f_n(acc, forgetting: str = "max") -> tuple[float, float]:
    """Average final accuracy and average forgetting from a lower-triangular
    accuracy matrix ``acc[i][j]`` (task ``j`` after training task ``i``).

    ``forgetting="max"`` measures the drop from the best accuracy ever seen on
    a task; ``"diag"`` measures the drop from the accuracy right after it was
    learned.
    """
    a = np.asarray(acc, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise MetricError(f"accuracy matrix must be square, got shape {a.shape}")
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1):
            if not np.isfinite(a[i, j]):
                raise MetricError(f"accuracy matrix incomplete at ({i}, {j})")
    a_n = float(a[n - 1].mean())
    if n == 1:
        return a_n, 0.0
    drops = []
    for j in range(n - 1):
        if forgetting == "max":
            best = a[j:, j].max()
        elif forgetting == "diag":
            best = a[j, j]
        else:
            raise ValueError(f"unknown forgetting mode {forgetting!r}")
        drops.append(best - a[n - 1, j])
    return a_n, float(np.mean(drops))


@dataclass(frozen=True)
class InterferencePair:
    prev_task: int
    task: int
    opposite_fraction: float
    opposite_magnitude: float


def interference_stats(prev_delta, delta) -> tuple[float, float]:
    """Percent of entries updated against the previous task's direction, and
    the mean |delta| over those entries (0 when there are none)."""
    prev = np.asarray(prev_delta, dtype=np.float64)
    cur = np.asarray(delta, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ShapeError(f"delta shapes differ: {prev.shape} vs {cur.shape}")
    opposite = (prev * cur) < 0
    count = int(opposite.sum())
    frac = 100.0 * count / cur.size
    mag = float(np.abs(cur[opposite]).mean()) if count else 0.0
    return frac, mag


def sequence_interference(deltas: Sequence[Mapping[str, np.ndarray]]) -> list[InterferencePair]:
    """Interference for every consecutive task pair, pooled over sites.

    ``deltas[k]`` maps site id -> weight delta of task ``k + 1``. Entries of all
    sites are pooled before computing the fraction and magnitude.
    """
    out = []
    for k in range(1, len(deltas)):
        prev, cur = deltas[k - 1], deltas[k]
        if set(prev) != set(cur):
            raise ShapeError("delta site sets differ between tasks")
        sites = sorted(cur)
        p = np.concatenate([np.ravel(prev[s]) for s in sites])
        c = np.concatenate([np.ravel(cur[s]) for s in sites])
        frac, mag = interference_stats(p, c)
        out.append(InterferencePair(k, k + 1, frac, mag))
    return out
