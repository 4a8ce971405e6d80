"""Toy conditional DDPM on 2-D Gaussian mixtures.

The denoiser embeds ``(x_t, timestep)`` into one latent row ``f``, lets it
cross-attend to the concept condition ``c``, and maps the result to an
epsilon prediction. Only the cross-attention K/V projections carry adapter
stacks.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .. import numkit as nk
from .. import seeding
from ..attention import AttentionWeights, cross_attention
from ..lora import AdapterStack
from ..optim import Adam
from .tokens import OBJECT_ID, RANDOM_STD, TokenTable

D_F = 32
D_C = 16
HIDDEN = 64
TEMB = 8
SITES = ("xattn.k", "xattn.v")
X0_CLIP = 6.0  # concept means lie in [-4, 4]^2 with std ~0.45


# ------------------------------------------------------------------ data


@dataclass
class ConceptTask:
    task_id: int
    seed: int
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    n_train: int = 512

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must sum to 1")
        for cov in self.covs:
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError("mixture covariances must be SPD")

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def make_concept(task_id: int, seed: int, n_train: int = 512, spread: float = 4.0,
                 var: float = 0.2) -> ConceptTask:
    """2-3 component mixture with means in [-spread, spread]^2 and cov var*I."""
    gen = seeding.rng(seed, "concept", task_id)
    k = int(gen.integers(2, 4))
    means = gen.uniform(-spread, spread, size=(k, 2))
    covs = np.repeat((var * np.eye(2))[None], k, axis=0)
    return ConceptTask(task_id, seed, means, covs, np.full(k, 1.0 / k), n_train)


def make_concept_sequence(n_tasks: int, seed: int, n_train: int = 512) -> list[ConceptTask]:
    return [make_concept(t, seed, n_train) for t in range(1, n_tasks + 1)]


def sample_concept(task: ConceptTask, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = gen.choice(len(task.weights), size=n, p=task.weights)
    z = gen.standard_normal((n, 2))
    chol = np.linalg.cholesky(task.covs)
    return task.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def standard_normal_task(task_id: int = 0) -> ConceptTask:
    return ConceptTask(task_id, 0, np.zeros((1, 2)), np.eye(2)[None], np.ones(1))


# -------------------------------------------------------------- schedule


@dataclass
class DiffusionSchedule:
    """Linear beta schedule.

    ``beta_start``/``beta_end`` are quoted for a 1000-step chain and rescaled
    by ``1000 / steps`` (when ``rescale``) so a short chain still ends near
    pure noise.
    """

    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rescale: bool = True
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = 1000.0 / self.steps if self.rescale else 1.0
        if self.steps == 1:
            self.betas = np.array([self.beta_start * k])
        else:
            self.betas = np.linspace(self.beta_start * k, self.beta_end * k, self.steps)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)


def q_sample(schedule: DiffusionSchedule, x0: np.ndarray, u: np.ndarray, eps: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bars[u][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(u: np.ndarray, steps: int) -> np.ndarray:
    phase = 2.0 * np.pi * (np.asarray(u, dtype=np.float64)[:, None] / steps)
    freqs = 2.0 ** np.arange(TEMB // 2)
    return np.concatenate([np.sin(phase * freqs), np.cos(phase * freqs)], axis=1)


# ----------------------------------------------------------------- model


def init_backbone(seed) -> dict[str, np.ndarray]:
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def dense(i, o):
        return gen.normal(0.0, 1.0 / np.sqrt(i), size=(i, o))

    return {
        "in.w1": dense(2 + TEMB, HIDDEN),
        "in.b1": np.zeros((1, HIDDEN)),
        "in.w2": dense(HIDDEN, D_F),
        "in.b2": np.zeros((1, D_F)),
        "attn.q": dense(D_F, D_F),
        "attn.k": dense(D_C, D_F),
        "attn.v": dense(D_C, D_F),
        "out.w1": dense(D_F, HIDDEN),
        "out.b1": np.zeros((1, HIDDEN)),
        "out.w2": dense(HIDDEN, 2) * 0.1,
        "out.b2": np.zeros((1, 2)),
    }


class Denoiser:
    """Epsilon-prediction network with adapter stacks on the K/V projections.

    ``leaves`` passed to :meth:`predict` override stored values by name:
    backbone keys (``"attn.v"``, ``"out.w1"``, ...) or live adapter factors
    (``"xattn.v.A"``, ``"xattn.v.B"``).
    """

    def __init__(self, backbone: Mapping[str, np.ndarray], steps: int):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in backbone.items()}
        for v in self.params.values():
            v.flags.writeable = False
        self.steps = steps
        self.stacks = {
            "xattn.k": AdapterStack("xattn.k", self.params["attn.k"]),
            "xattn.v": AdapterStack("xattn.v", self.params["attn.v"]),
        }

    def replace_dense(self, updates: Mapping[str, np.ndarray]):
        """Overwrite backbone entries; the K/V stacks are rebuilt on the new base."""
        for k, v in updates.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            self.params[k] = arr
        for name, site in (("attn.k", "xattn.k"), ("attn.v", "xattn.v")):
            if name in updates:
                old = self.stacks[site]
                if old.past or old.active is not None:
                    raise RuntimeError(f"cannot replace base of {site} while adapters exist")
                self.stacks[site] = AdapterStack(site, self.params[name])

    @property
    def attention(self) -> AttentionWeights:
        return AttentionWeights(self.params["attn.q"], self.stacks["xattn.k"], self.stacks["xattn.v"])

    def backbone_size(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def predict(self, x_t, u, cond, leaves: Optional[Mapping] = None):
        leaves = leaves or {}

        def p(name):
            return leaves.get(name, self.params[name])

        live = {s: (leaves[s + ".A"], leaves[s + ".B"]) for s in SITES if s + ".A" in leaves}
        override = {k[5:]: leaves[k] for k in ("attn.q", "attn.k", "attn.v") if k in leaves}
        inp = np.concatenate([nk.value(x_t), time_embedding(u, self.steps)], axis=1)
        h = nk.silu(nk.add(nk.matmul(inp, p("in.w1")), p("in.b1")))
        f = nk.add(nk.matmul(h, p("in.w2")), p("in.b2"))
        att = cross_attention(f, nk.rms_norm_rows(cond), self.attention, live=live, override=override)
        h = nk.silu(nk.add(nk.matmul(nk.add(f, att), p("out.w1")), p("out.b1")))
        return nk.add(nk.matmul(h, p("out.w2")), p("out.b2"))


def diffusion_loss(model, schedule: DiffusionSchedule, batch: np.ndarray, condition, seed,
                   leaves: Optional[Mapping] = None, timesteps: Optional[np.ndarray] = None):
    """Epsilon-prediction MSE averaged over every coordinate of the batch.

    Timesteps are drawn uniformly per row unless ``timesteps`` fixes them.
    """
    batch = nk.as_matrix(batch)
    if batch.shape[1] != 2:
        raise nk.ShapeError(f"batch rows must be 2-vectors, got {batch.shape}")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if timesteps is None:
        u = gen.integers(0, schedule.steps, size=batch.shape[0])
    else:
        u = np.asarray(timesteps)
        if u.shape != (batch.shape[0],):
            raise nk.ShapeError(f"{u.shape} timesteps for {batch.shape[0]} rows")
    eps = gen.standard_normal(batch.shape)
    x_t = q_sample(schedule, batch, u, eps)
    pred = model.predict(x_t, u, condition, leaves)
    return nk.scale(nk.frobenius_sq(nk.sub(pred, eps)), 1.0 / eps.size)


def ddpm_sample(model, schedule: DiffusionSchedule, condition, n: int, seed,
                clip: Optional[float] = X0_CLIP) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) with sigma_t^2 = beta_t.

    Each step goes through the x0 estimate, clipped to ``[-clip, clip]``
    (the usual DDPM data-range clipping); ``clip=None`` gives the plain
    epsilon-form update.
    """
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = gen.standard_normal((n, 2))
    for u in reversed(range(schedule.steps)):
        eps = nk.value(model.predict(x, np.full(n, u), condition))
        beta, ab = schedule.betas[u], schedule.alpha_bars[u]
        ab_prev = schedule.alpha_bars[u - 1] if u > 0 else 1.0
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
        x = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(schedule.alphas[u]) * (1.0 - ab_prev) * x) / (1.0 - ab)
        if u > 0:
            x = x + np.sqrt(beta) * gen.standard_normal((n, 2))
    return x


# ------------------------------------------------------------ pretraining


@dataclass(frozen=True)
class PretrainSpec:
    seed: int
    steps: int = 4000
    batch_size: int = 128
    lr: float = 2e-3
    base_concepts: int = 64
    concepts_per_step: int = 8
    schedule_steps: int = 50


@functools.lru_cache(maxsize=8)
def _pretrain_cached(spec: PretrainSpec):
    schedule = DiffusionSchedule(spec.schedule_steps)
    gen = seeding.rng(spec.seed, "pretrain")
    params = init_backbone(seeding.rng(spec.seed, "backbone-init"))
    tasks = [standard_normal_task(0)]
    tasks += [make_concept(-(i + 1), seeding.derive(spec.seed, "base-concept"), 10**6)
              for i in range(spec.base_concepts)]
    tokens = {i: gen.normal(0.0, RANDOM_STD, size=(1, D_C)) for i in range(len(tasks))}
    trainable = dict(params)
    trainable.update({f"tok.{i}": v for i, v in tokens.items()})
    opt = Adam(spec.lr)
    model = Denoiser(params, schedule.steps)
    n_pick = min(spec.concepts_per_step, len(tasks))
    per = max(1, spec.batch_size // n_pick)
    for _ in range(spec.steps):
        tape = nk.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in trainable.items()}
        total = None
        # the base distribution is in every batch; the rest is a random subset
        picked = [0] + sorted(gen.choice(np.arange(1, len(tasks)), size=n_pick - 1, replace=False).tolist())
        for i in picked:
            x0 = sample_concept(tasks[i], per, gen)
            term = diffusion_loss(model, schedule, x0, leaves[f"tok.{i}"], gen, leaves)
            total = term if total is None else nk.add(total, term)
        loss = nk.scale(total, 1.0 / len(picked))
        trainable = opt.step(trainable, tape.backward(loss))
    backbone = {k: trainable[k] for k in params}
    return backbone, trainable["tok.0"]


def pretrain(spec: PretrainSpec) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Train the whole backbone (plus the object token) on the base distribution.

    The object token conditions the standard normal; ``base_concepts``
    extra random mixtures with their own throwaway tokens make the frozen
    backbone responsive to its condition. Results are cached per spec.
    """
    backbone, obj = _pretrain_cached(spec)
    return {k: v.copy() for k, v in backbone.items()}, obj.copy()


def new_token_table(object_embedding: np.ndarray) -> TokenTable:
    table = TokenTable(D_C)
    table.embeddings[OBJECT_ID] = np.asarray(object_embedding, dtype=np.float64).reshape(1, D_C)
    table.freeze(OBJECT_ID)
    return table
