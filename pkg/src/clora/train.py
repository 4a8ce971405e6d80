"""Continual training: per-task optimization, baselines, snapshots and sweeps.

Every method shares one loop. What differs is the set of trainable arrays
(adapter factors, dense projections, the whole backbone, or only the task's
token / head block) and the extra loss term:

* ``clora``       adapters + lambda * sum of per-site forgetting penalties
* ``lora_seq``    adapters, no penalty
* ``full_ft_seq`` whole backbone, no penalty
* ``ewc``         dense attention projections + lambda * Fisher-weighted anchor
* ``gen_replay``  dense K/V, batches mixed with samples the model generates
                  for earlier concepts (diffusion only)
* ``token_only``  frozen backbone; only the new token / head block trains
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import metrics as M
from . import numkit as nk
from . import seeding
from .config import ADAPTER_METHODS, ExperimentConfig
from .lora import forgetting_penalty, freeze_task, new_task_pair, storage_plan
from .optim import Adam
from .workloads import classification as cls
from .workloads import diffusion as dif
from .workloads import ingest
from .workloads.tokens import compose_condition, init_concept_token

log = logging.getLogger(__name__)

LOG_EVERY = 50
EVAL_NOISE = 8


class NonFiniteLoss(ArithmeticError):
    def __init__(self, task: int, step: int, loss: float, grad_norm: float):
        super().__init__(f"non-finite loss at task {task} step {step}: loss={loss} grad_norm={grad_norm}")
        self.task, self.step, self.loss, self.grad_norm = task, step, loss, grad_norm


class UnsupportedMethod(ValueError):
    pass


# --------------------------------------------------------------------- EWC


@dataclass
class EWCState:
    fisher: dict = field(default_factory=dict)
    anchor: dict = field(default_factory=dict)


def ewc_penalty(params: dict, ewc: EWCState):
    """sum_i F_i (theta_i - theta*_i)^2 over every anchored array."""
    total = None
    for name, f in ewc.fisher.items():
        if name not in params:
            continue
        d = nk.sub(params[name], ewc.anchor[name])
        term = nk.total(nk.hadamard(f, nk.hadamard(d, d)))
        total = term if total is None else nk.add(total, term)
    return np.zeros((1, 1)) if total is None else total


def ewc_prepare(ewc: EWCState, params: dict, grad_fn: Callable[[dict, int], dict], n_batches: int) -> EWCState:
    """Add this task's squared-gradient Fisher diagonal and move the anchors.

    ``grad_fn(params, k)`` returns workload-loss gradients on batch ``k``.
    """
    if n_batches < 1:
        raise ValueError("EWC needs at least one batch of task data")
    acc = {k: np.zeros_like(v) for k, v in params.items()}
    for k in range(n_batches):
        g = grad_fn(params, k)
        for name in acc:
            acc[name] += g[name] ** 2
    for name, s in acc.items():
        prev = ewc.fisher.get(name)
        f = s / n_batches
        ewc.fisher[name] = f if prev is None else prev + f
        ewc.anchor[name] = params[name].copy()
    return ewc


# ---------------------------------------------------------------- run state


@dataclass
class RunState:
    cfg: ExperimentConfig
    model: object
    tasks: list
    tokens: Optional[object] = None
    ewc: EWCState = field(default_factory=EWCState)
    own_samples: dict = field(default_factory=dict)  # X_{j,j}
    accuracy: list = field(default_factory=list)  # rows A_{i,.}
    deltas: list = field(default_factory=list)  # per task: site -> delta
    task_losses: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    storage: list = field(default_factory=list)
    replay_pool: dict = field(default_factory=dict)
    trained: int = 0


class Workload:
    """Hooks the generic loop calls; one subclass per workload."""

    sites: tuple = ()
    dense_keys: dict = {}

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    # names of dense arrays each dense method trains
    def dense_trainables(self, state) -> list[str]:
        m = self.cfg.method
        if m == "full_ft_seq":
            return sorted(state.model.params)
        if m in ("ewc", "gen_replay"):
            return sorted(self.dense_keys.values())
        return []


# ---------------------------------------------------------------- diffusion


class DiffusionWorkload(Workload):
    sites = dif.SITES
    dense_keys = {"xattn.k": "attn.k", "xattn.v": "attn.v"}

    def setup(self) -> RunState:
        cfg = self.cfg
        self.schedule = dif.DiffusionSchedule()
        backbone, obj = dif.pretrain(dif.PretrainSpec(seed=cfg.seed, steps=cfg.pretrain_steps,
                                                      base_concepts=cfg.base_concepts,
                                                      schedule_steps=self.schedule.steps))
        model = dif.Denoiser(backbone, self.schedule.steps)
        if cfg.data_csv:
            tasks = _take(ingest.load_concepts(cfg.data_csv), cfg.n_tasks, cfg.data_csv)
            self.train_data = {t.task_id: t.points for t in tasks}
        else:
            tasks = dif.make_concept_sequence(cfg.n_tasks, seeding.derive(cfg.seed, "concepts"), cfg.n_train)
            self.train_data = {t.task_id: dif.sample_concept(t, t.n_train, seeding.rng(cfg.seed, "train", t.task_id))
                               for t in tasks}
        self.base_data = dif.sample_concept(dif.standard_normal_task(), cfg.n_train, seeding.rng(cfg.seed, "prior"))
        return RunState(cfg, model, tasks, tokens=dif.new_token_table(obj))

    def condition(self, state, t, token=None):
        return compose_condition(state.tokens, t, self.cfg.ablations.prompt_concept, token=token)

    def begin_task(self, state, t):
        strategy = "word-init" if self.cfg.ablations.token_init else "random"
        init_concept_token(state.tokens, t, seeding.rng(self.cfg.seed, "token", t), strategy)
        if self.cfg.method == "gen_replay" and t > 1:
            state.replay_pool = {j: self.sample(state, j, self.cfg.n_train, seeding.derive(self.cfg.seed, "replay", t, j))
                                 for j in range(1, t)}

    def head_trainables(self, state, t):
        return {f"tok.{t}": state.tokens.get(t)}

    def data_loss(self, state, t, leaves, gen):
        cfg = self.cfg
        model = state.model
        data = self.train_data[t]
        b = cfg.batch_size
        n_rep = int(math.floor(cfg.mix_ratio * b)) if (cfg.method == "gen_replay" and t > 1) else 0
        batch = data[gen.integers(0, len(data), size=b - n_rep)]
        terms = [(dif.diffusion_loss(model, self.schedule, batch, self.condition(state, t, leaves.get(f"tok.{t}")),
                                     gen, leaves), len(batch))]
        if n_rep:
            owners = gen.integers(1, t, size=n_rep)
            for j in range(1, t):
                k = int((owners == j).sum())
                if k == 0:
                    continue
                pool = state.replay_pool[j]
                rows = pool[gen.integers(0, len(pool), size=k)]
                terms.append((dif.diffusion_loss(model, self.schedule, rows, self.condition(state, j), gen, leaves), k))
        total_rows = sum(k for _, k in terms)
        loss = None
        for term, k in terms:
            part = nk.scale(term, k / total_rows)
            loss = part if loss is None else nk.add(loss, part)
        if cfg.prior_preservation:
            prior = self.base_data[gen.integers(0, len(self.base_data), size=b)]
            obj = state.tokens.get(state.tokens.object_id)
            loss = nk.add(loss, dif.diffusion_loss(model, self.schedule, prior, obj, gen, leaves))
        return loss

    def commit_head(self, state, t, values):
        state.tokens.set(t, values[f"tok.{t}"])

    def after_task(self, state, t):
        state.tokens.freeze(t)
        state.own_samples[t] = self.sample(state, t)

    def sample(self, state, t, n=None, seed=None):
        n = n or self.cfg.samples_per_snapshot
        seed = seeding.derive(self.cfg.seed, "sample", t) if seed is None else seed
        return dif.ddpm_sample(state.model, self.schedule, self.condition(state, t), n, seed)

    def eval_loss(self, state, t):
        # every training point at every timestep, EVAL_NOISE noise draws each
        data = self.train_data[t]
        steps = self.schedule.steps
        rows = np.repeat(data, steps * EVAL_NOISE, axis=0)
        u = np.tile(np.arange(steps), len(data) * EVAL_NOISE)
        return nk.scalar(dif.diffusion_loss(state.model, self.schedule, rows, self.condition(state, t),
                                            seeding.derive(self.cfg.seed, "eval-loss"), timesteps=u))

    def head_checkpoint(self, state):
        return {"tokens": {str(k): v.ravel().tolist() for k, v in sorted(state.tokens.embeddings.items())}}

    def reference(self, task):
        """Held-out draws of the true concept (all points for ingested data)."""
        if isinstance(task, ingest.EmpiricalConcept):
            return task.points
        return dif.sample_concept(task, self.cfg.samples_per_snapshot,
                                  seeding.rng(self.cfg.seed, "reference", task.task_id))

    def score(self, state) -> dict:
        cfg = self.cfg
        kernel = M.PolyKernel(cfg.kernel.degree, cfg.kernel.coef0, cfg.kernel.scale)
        emb = M.FeatureEmbedder(cfg.embedder, 2, 16, seeding.derive(cfg.seed, "embedder"))
        finals = {t.task_id: self.sample(state, t.task_id) for t in state.tasks}
        refs = {t.task_id: self.reference(t) for t in state.tasks}
        state.final_samples = finals
        out = {"a_mmd": M.REPORT_SCALE * M.a_mmd(finals, refs, emb, kernel, cfg.kernel.unbiased),
               "f_mmd": None, "a_n": None, "f_n": None}
        if len(finals) > 1:
            out["f_mmd"] = M.REPORT_SCALE * M.f_mmd(state.own_samples, finals, emb, kernel, cfg.kernel.unbiased)
        return out


# ----------------------------------------------------------- classification


class ClassificationWorkload(Workload):
    sites = cls.SITES
    dense_keys = {"sattn.q": "attn.q", "sattn.k": "attn.k", "sattn.v": "attn.v"}

    def setup(self) -> RunState:
        cfg = self.cfg
        if cfg.method == "gen_replay":
            raise UnsupportedMethod("gen_replay is only defined for the diffusion workload")
        backbone, input_map = cls.pretrain(cls.PretrainSpec(seed=cfg.seed, steps=cfg.pretrain_steps,
                                                            radius=cfg.class_radius))
        model = cls.Classifier(backbone, input_map)
        if cfg.data_csv:
            tasks = _take(ingest.load_class_tasks(cfg.data_csv, cfg.seed), cfg.n_tasks, cfg.data_csv)
        else:
            tasks = cls.make_classification_tasks(cfg.n_tasks, cfg.classes_per_task, cls.DIM,
                                                  seeding.derive(cfg.seed, "tasks"), cfg.class_radius)
        return RunState(cfg, model, tasks)

    def begin_task(self, state, t):
        task = state.tasks[t - 1]
        state.model.add_head(t, task.classes, seeding.rng(self.cfg.seed, "head", t))

    def head_trainables(self, state, t):
        w, b = state.model.head[t]
        return {f"head.w.{t}": w, f"head.b.{t}": b}

    def data_loss(self, state, t, leaves, gen):
        task = state.tasks[t - 1]
        idx = gen.integers(0, len(task.y_train), size=self.cfg.batch_size)
        targets = task.y_train[idx] - task.classes[0]
        return cls.cross_entropy(state.model.logits(task.x_train[idx], [t], leaves), targets)

    def commit_head(self, state, t, values):
        state.model.head[t] = (values[f"head.w.{t}"], values[f"head.b.{t}"])

    def accuracy(self, state, j, upto):
        task = state.tasks[j - 1]
        seen = list(range(1, upto + 1))
        preds = np.concatenate([state.model.predict(task.x_test[k:k + 256], seen)
                                for k in range(0, len(task.y_test), 256)])
        return float(np.mean(preds == task.y_test))

    def after_task(self, state, t):
        w, b = state.model.head[t]
        w, b = w.copy(), b.copy()
        w.flags.writeable = b.flags.writeable = False
        state.model.head[t] = (w, b)
        state.accuracy.append([self.accuracy(state, j, t) for j in range(1, t + 1)])

    def eval_loss(self, state, t):
        task = state.tasks[t - 1]
        return nk.scalar(cls.cross_entropy(state.model.logits(task.x_train, [t]), task.y_train - task.classes[0]))

    def head_checkpoint(self, state):
        return {"head": {str(t): {"w": w.ravel().tolist(), "b": b.ravel().tolist(), "shape": list(w.shape)}
                         for t, (w, b) in sorted(state.model.head.items())}}

    def score(self, state) -> dict:
        n = len(state.accuracy)
        acc = np.full((n, n), np.nan)
        for i, row in enumerate(state.accuracy):
            acc[i, : len(row)] = row
        a_n, f_n = M.a_n_f_n(acc, self.cfg.forgetting)
        return {"a_mmd": None, "f_mmd": None, "a_n": 100.0 * a_n, "f_n": 100.0 * f_n}


WORKLOADS = {"diffusion": DiffusionWorkload, "classification": ClassificationWorkload}


def _take(tasks, n, path):
    if n > len(tasks):
        raise ingest.IngestError(f"{path} holds {len(tasks)} tasks, config asks for {n}")
    return tasks[:n]


# ------------------------------------------------------------- the loop


def train_task(state: RunState, wl: Workload, t: int) -> RunState:
    """Optimize task ``t`` then freeze it and record snapshots / accuracies."""
    cfg = state.cfg
    model = state.model
    method = cfg.method
    wl.begin_task(state, t)
    if method in ADAPTER_METHODS:
        for s in wl.sites:
            new_task_pair(model.stacks[s], cfg.rank, seeding.rng(cfg.seed, "lora", s, t), task_id=t)
    dense_names = wl.dense_trainables(state)
    before = {s: model.stacks[s].w_init.copy() for s in wl.sites}

    values = dict(wl.head_trainables(state, t))
    if method in ADAPTER_METHODS:
        for s in wl.sites:
            values[s + ".A"] = model.stacks[s].active.a
            values[s + ".B"] = model.stacks[s].active.b
    for name in dense_names:
        values[name] = model.params[name]

    lam = cfg.effective_lambda
    opt = Adam(cfg.learning_rate)
    gen = seeding.rng(cfg.seed, "batch", t)
    last = float("nan")
    for step in range(cfg.steps_per_task):
        tape = nk.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        data = wl.data_loss(state, t, leaves, gen)
        pen = np.zeros((1, 1))
        if method == "clora" and lam > 0:
            pen = None
            for s in wl.sites:
                term = forgetting_penalty(model.stacks[s], leaves[s + ".A"], leaves[s + ".B"])
                pen = term if pen is None else nk.add(pen, term)
        elif method == "ewc" and lam > 0:
            pen = ewc_penalty(leaves, state.ewc)
        loss = nk.add(data, nk.scale(pen, lam)) if isinstance(pen, nk.Node) else data
        grads = tape.backward(loss)
        loss_val = nk.scalar(loss)
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not (math.isfinite(loss_val) and math.isfinite(gnorm)):
            raise NonFiniteLoss(t, step, loss_val, gnorm)
        last = nk.scalar(data)
        if step % LOG_EVERY == 0 or step == cfg.steps_per_task - 1:
            state.log_lines.append(
                f"task={t} step={step} loss={loss_val!r} penalty={nk.scalar(pen)!r} grad_norm={gnorm!r}")
        values = opt.step(values, grads)

    wl.commit_head(state, t, values)
    if method in ADAPTER_METHODS:
        deltas = {}
        for s in wl.sites:
            stack = model.stacks[s]
            stack.active.a, stack.active.b = values[s + ".A"], values[s + ".B"]
            deltas[s] = stack.active.delta()
            freeze_task(stack)
    else:
        if dense_names:
            model.replace_dense({n: values[n] for n in dense_names})
        deltas = {s: model.stacks[s].w_init - before[s] for s in wl.sites}
    state.deltas.append(deltas)

    if method == "ewc":
        names = dense_names
        fisher_gen = seeding.rng(cfg.seed, "fisher", t)

        def grad_fn(params, _k):
            tape = nk.Tape()
            leaves = {k: tape.leaf(v, k) for k, v in params.items()}
            return tape.backward(wl.data_loss(state, t, leaves, fisher_gen))

        ewc_prepare(state.ewc, {n: model.params[n] for n in names}, grad_fn, cfg.fisher_batches)

    wl.after_task(state, t)
    state.task_losses.append(last)
    state.trained = t
    state.storage.append(param_accounting(state, wl))
    state.checkpoints.append(checkpoint(state, wl, t))
    return state


def param_accounting(state: RunState, wl: Workload) -> dict:
    """Trained / stored parameter percentages of the backbone, per method."""
    cfg = state.cfg
    model = state.model
    backbone = model.backbone_size()
    method = cfg.method
    if method in ADAPTER_METHODS:
        plan = storage_plan([model.stacks[s] for s in wl.sites], backbone, tasks_so_far=state.trained, rank=cfg.rank)
        store = plan.stored_pct if method == "clora" else 100.0
        return {"train_pct": plan.trained_pct, "store_pct": store, "stored_params": plan.stored_params,
                "per_task_params": plan.per_task_params}
    dense = sum(model.params[n].size for n in wl.dense_trainables(state))
    train = 100.0 * dense / backbone
    store = 100.0 + (train if method == "ewc" else 0.0)
    return {"train_pct": train, "store_pct": store, "stored_params": dense if method == "ewc" else 0,
            "per_task_params": dense}


def checkpoint(state: RunState, wl: Workload, t: int) -> dict:
    """JSON-ready snapshot of everything learned up to task ``t``."""
    cfg = state.cfg
    model = state.model
    sites = {}
    for s in wl.sites:
        stack = model.stacks[s]
        sites[s] = {
            "dims": list(stack.shape),
            "w_init": stack.w_init.ravel().tolist(),
            "rank": cfg.rank,
            "pairs": [{"task_id": p.task_id, "a": p.a.ravel().tolist(), "b": p.b.ravel().tolist()} for p in stack.past],
        }
    out = {"task": t, "method": cfg.method, "workload": cfg.workload, "sites": sites}
    # this task's weight delta per site (A B, or W_after - W_before for dense methods)
    out["delta"] = {s: {"shape": list(d.shape), "data": d.ravel().tolist()} for s, d in state.deltas[t - 1].items()}
    dense = wl.dense_trainables(state)
    if dense:
        out["dense"] = {n: {"shape": list(model.params[n].shape), "data": model.params[n].ravel().tolist()}
                        for n in dense}
    out.update(wl.head_checkpoint(state))
    return out


@dataclass
class RunResult:
    cfg: ExperimentConfig
    state: RunState
    metrics: dict


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    cfg = cfg.resolved()
    wl = WORKLOADS[cfg.workload](cfg)
    state = wl.setup()
    for task in state.tasks:
        train_task(state, wl, task.task_id)
        log.info("task %d done: loss %.5f", task.task_id, state.task_losses[-1])
    scores = wl.score(state)
    inter = M.sequence_interference(state.deltas)
    acct = state.storage[-1]
    metrics = {
        "method": cfg.method,
        "seed": cfg.seed,
        "workload": cfg.workload,
        **scores,
        "n_param_train_pct": acct["train_pct"],
        "n_param_store_pct": acct["store_pct"],
        "interference": [dataclasses.asdict(p) for p in inter],
        "interference_magnitude": float(np.mean([p.opposite_magnitude for p in inter])) if inter else 0.0,
        "final_task_loss": wl.eval_loss(state, state.tasks[-1].task_id),
    }
    return RunResult(cfg, state, metrics)


# ------------------------------------------------------------------ sweeps

SWEEP_PARAMS = {"lambda": "lam", "rank": "rank", "lr": "learning_rate"}
LR_GRID = (5e-2, 5e-3, 5e-4, 5e-5, 5e-6, 5e-7, 5e-8)
RANK_GRID = (8, 16, 32, 64, 128)
LAMBDA_GRID = (0.0, 1e4, 1e6, 1e8, 1e10)


def sweep_configs(base: ExperimentConfig, param: str, grid) -> list[ExperimentConfig]:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    attr = SWEEP_PARAMS[param]
    cast = int if param == "rank" else float
    return [dataclasses.replace(base, **{attr: cast(v)}) for v in grid]


def hyper_sweep(base: ExperimentConfig, param: str, grid) -> list[dict]:
    """Run the whole task sequence once per grid value; one metrics row each."""
    rows = []
    for value, cfg in zip(grid, sweep_configs(base, param, grid)):
        res = run_experiment(cfg)
        rows.append({"value": value, **res.metrics})
    return rows
