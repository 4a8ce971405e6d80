"""Toy class-incremental classification with a self-attention backbone.

Inputs (dim 32) pass through a frozen random orthogonal map, are cut into 4
chunks, and each chunk is embedded by its own pretrained matrix to form a
4-token sequence. One self-attention block (adapters on Q, K and V) is
mean-pooled and read out by a head that grows by one block of rows per task.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .. import numkit as nk
from .. import seeding
from ..attention import AttentionWeights, self_attention_qkv
from ..lora import AdapterStack
from ..optim import Adam

DIM = 32
N_CHUNKS = 4
D_MODEL = 16
SITES = ("sattn.q", "sattn.k", "sattn.v")


@dataclass
class ClassTask:
    task_id: int
    classes: list
    means: np.ndarray  # one row per class
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _class_means(gen, n, dim, radius):
    m = gen.standard_normal((n, dim))
    return radius * m / np.linalg.norm(m, axis=1, keepdims=True)


def _draw(gen, means, labels, n_per):
    xs, ys = [], []
    for mu, lab in zip(means, labels):
        xs.append(mu + gen.standard_normal((n_per, len(mu))))
        ys.append(np.full(n_per, lab))
    return np.concatenate(xs), np.concatenate(ys)


def make_classification_tasks(n_tasks: int, classes_per_task: int, dim: int = DIM, seed: int = 0,
                              radius: float = 3.0, n_train: int = 100, n_test: int = 100,
                              first_class: int = 0) -> list[ClassTask]:
    """Class-incremental tasks with disjoint labels.

    Each class is an identity-covariance Gaussian whose mean lies on a
    sphere of the given radius.
    """
    if n_tasks < 2:
        raise ValueError("need at least two tasks")
    gen = seeding.rng(seed, "classification", first_class)
    tasks = []
    for t in range(n_tasks):
        labels = list(range(first_class + t * classes_per_task, first_class + (t + 1) * classes_per_task))
        means = _class_means(gen, classes_per_task, dim, radius)
        x_tr, y_tr = _draw(gen, means, labels, n_train)
        x_te, y_te = _draw(gen, means, labels, n_test)
        tasks.append(ClassTask(t + 1, labels, means, x_tr, y_tr, x_te, y_te))
    return tasks


def init_backbone(seed) -> dict[str, np.ndarray]:
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunk = DIM // N_CHUNKS
    out = {f"embed.{k}": gen.normal(0.0, 1.0 / np.sqrt(chunk), size=(chunk, D_MODEL)) for k in range(N_CHUNKS)}
    for name in ("q", "k", "v"):
        out[f"attn.{name}"] = gen.normal(0.0, 1.0 / np.sqrt(D_MODEL), size=(D_MODEL, D_MODEL))
    return out


def random_input_map(seed) -> np.ndarray:
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(gen.standard_normal((DIM, DIM)))
    q = q * np.sign(np.diag(r))
    q.flags.writeable = False
    return q


class Classifier:
    """Self-attention classifier; see the module docstring for the layout.

    As with the diffusion denoiser, ``leaves`` override stored values by
    name: backbone keys, live adapter factors (``"sattn.q.A"``) or head
    blocks (``"head.w.3"``, ``"head.b.3"``).
    """

    def __init__(self, backbone: Mapping[str, np.ndarray], input_map: np.ndarray):
        self.params = {}
        self.input_map = input_map
        self.head: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.head_labels: dict[int, np.ndarray] = {}
        self.stacks = {}
        self.replace_dense(backbone, rebuild_all=True)

    def replace_dense(self, updates, rebuild_all=False):
        for k, v in updates.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            self.params[k] = arr
        for name in ("q", "k", "v"):
            site = f"sattn.{name}"
            if rebuild_all or f"attn.{name}" in updates:
                old = self.stacks.get(site)
                if old is not None and (old.past or old.active is not None):
                    raise RuntimeError(f"cannot replace base of {site} while adapters exist")
                self.stacks[site] = AdapterStack(site, self.params[f"attn.{name}"])

    @property
    def attention(self) -> AttentionWeights:
        return AttentionWeights(self.stacks["sattn.q"], self.stacks["sattn.k"], self.stacks["sattn.v"])

    def backbone_size(self) -> int:
        return int(sum(v.size for v in self.params.values()) + self.input_map.size)

    def add_head(self, task_id: int, labels, seed):
        gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = len(labels)
        self.head[task_id] = (gen.normal(0.0, 0.01, size=(D_MODEL, n)), np.zeros((1, n)))
        self.head_labels[task_id] = np.asarray(labels)

    def features(self, x, leaves: Optional[Mapping] = None):
        leaves = leaves or {}
        x = nk.as_matrix(x)
        b = x.shape[0]
        z = x @ self.input_map
        chunk = DIM // N_CHUNKS
        toks = [nk.matmul(z[:, k * chunk:(k + 1) * chunk], leaves.get(f"embed.{k}", self.params[f"embed.{k}"]))
                for k in range(N_CHUNKS)]
        # chunk-major rows: row k*b + i is chunk k of sample i
        seq = nk.concat_rows(toks)
        live = {s: (leaves[s + ".A"], leaves[s + ".B"]) for s in SITES if s + ".A" in leaves}
        override = {k[5:]: leaves[k] for k in ("attn.q", "attn.k", "attn.v") if k in leaves}
        att = self_attention_qkv(seq, self.attention, live=live, override=override,
                                 groups=np.tile(np.arange(b), N_CHUNKS))
        pool = np.tile(np.eye(b), (1, N_CHUNKS)) / N_CHUNKS
        return nk.matmul(pool, att)

    def logits(self, x, task_ids, leaves: Optional[Mapping] = None):
        leaves = leaves or {}
        feats = self.features(x, leaves)
        blocks = []
        for t in task_ids:
            w = leaves.get(f"head.w.{t}", self.head[t][0])
            bias = leaves.get(f"head.b.{t}", self.head[t][1])
            blocks.append(nk.add(nk.matmul(feats, w), bias))
        return blocks[0] if len(blocks) == 1 else nk.concat_cols(blocks)

    def predict(self, x, task_ids) -> np.ndarray:
        """Class ids predicted over every class of ``task_ids``."""
        labels = np.concatenate([self.head_labels[t] for t in task_ids])
        return labels[np.argmax(nk.value(self.logits(x, task_ids)), axis=1)]


def cross_entropy(logits, targets: np.ndarray):
    """Mean negative log-likelihood; ``targets`` are column indices."""
    lv = nk.value(logits)
    onehot = np.zeros_like(lv)
    onehot[np.arange(len(targets)), targets] = 1.0
    return nk.scale(nk.total(nk.hadamard(nk.log_softmax(logits), onehot)), -1.0 / len(targets))


@dataclass(frozen=True)
class PretrainSpec:
    seed: int
    steps: int = 3000
    batch_size: int = 128
    lr: float = 2e-3
    base_classes: int = 100
    radius: float = 3.0


@functools.lru_cache(maxsize=8)
def _pretrain_cached(spec: PretrainSpec):
    input_map = random_input_map(seeding.rng(spec.seed, "input-map"))
    gen = seeding.rng(spec.seed, "pretrain")
    base = make_classification_tasks(2, spec.base_classes, DIM, seeding.derive(spec.seed, "base-classes"),
                                     spec.radius, n_train=200, n_test=1, first_class=10**6)[0]
    params = init_backbone(seeding.rng(spec.seed, "backbone-init"))
    model = Classifier(params, input_map)
    model.add_head(0, base.classes, gen)
    trainable = dict(params)
    trainable["head.w.0"], trainable["head.b.0"] = model.head[0]
    targets = base.y_train - base.classes[0]
    opt = Adam(spec.lr)
    for _ in range(spec.steps):
        idx = gen.integers(0, len(targets), size=spec.batch_size)
        tape = nk.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in trainable.items()}
        loss = cross_entropy(model.logits(base.x_train[idx], [0], leaves), targets[idx])
        trainable = opt.step(trainable, tape.backward(loss))
    return {k: trainable[k] for k in params}, input_map


def pretrain(spec: PretrainSpec) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Train chunk embeddings and Q/K/V on disjoint base classes; cached per spec."""
    backbone, input_map = _pretrain_cached(spec)
    return {k: v.copy() for k, v in backbone.items()}, input_map
