"""CSV ingestion so real desk-scale data can replace the synthetic generators.

Generation files have the header ``x0,x1,concept_id``; every distinct
concept id becomes one task, ordered by first appearance. Classification
files have ``f0..f31,label,task_id``; tasks are ordered by id and each
class is split in half (train / test) with a seeded permutation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .. import seeding
from .classification import DIM, ClassTask


class IngestError(ValueError):
    pass


@dataclass
class EmpiricalConcept:
    """A concept known only through its points."""

    task_id: int
    points: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.points)


def _read(path, header: list[str]) -> list[list[str]]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if [h.strip() for h in got] != header:
            raise IngestError(f"{path}: expected header {','.join(header)}")
        rows = [r for r in reader if r]
    if not rows:
        raise IngestError(f"{path}: no data rows")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise IngestError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return rows


def _num(text, cast, path):
    try:
        return cast(text)
    except ValueError:
        raise IngestError(f"{path}: not a number: {text!r}") from None


def load_concepts(path) -> list[EmpiricalConcept]:
    rows = _read(path, ["x0", "x1", "concept_id"])
    order: list[str] = []
    points: dict[str, list] = {}
    for x0, x1, cid in rows:
        cid = cid.strip()
        if cid not in points:
            order.append(cid)
            points[cid] = []
        points[cid].append((_num(x0, float, path), _num(x1, float, path)))
    return [EmpiricalConcept(t, np.array(points[cid])) for t, cid in enumerate(order, start=1)]


def load_class_tasks(path, seed: int = 0) -> list[ClassTask]:
    header = [f"f{i}" for i in range(DIM)] + ["label", "task_id"]
    rows = _read(path, header)
    feats = np.array([[_num(v, float, path) for v in r[:DIM]] for r in rows])
    labels = np.array([_num(r[DIM], int, path) for r in rows])
    task_ids = np.array([_num(r[DIM + 1], int, path) for r in rows])
    tasks = []
    seen: set = set()
    for k, tid in enumerate(sorted(set(task_ids.tolist())), start=1):
        sel = task_ids == tid
        classes = sorted(set(labels[sel].tolist()))
        if seen & set(classes):
            raise IngestError(f"{path}: task {tid} reuses a class id from an earlier task")
        seen |= set(classes)
        if classes != list(range(classes[0], classes[0] + len(classes))):
            raise IngestError(f"{path}: class ids of task {tid} must be contiguous")
        gen = seeding.rng(seed, "split", k)
        tr, te = [], []
        for c in classes:
            idx = np.flatnonzero(sel & (labels == c))
            if len(idx) < 2:
                raise IngestError(f"{path}: class {c} needs at least two rows")
            idx = gen.permutation(idx)
            half = len(idx) // 2
            tr.append(idx[:half])
            te.append(idx[half:])
        tr, te = np.concatenate(tr), np.concatenate(te)
        means = np.stack([feats[sel & (labels == c)].mean(axis=0) for c in classes])
        tasks.append(ClassTask(k, classes, means, feats[tr], labels[tr], feats[te], labels[te]))
    if len(tasks) < 2:
        raise IngestError(f"{path}: need at least two tasks")
    return tasks
