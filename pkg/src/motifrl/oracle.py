"""Deterministic synthetic property oracles and reward shaping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, KindMismatch, UnknownTask
from .molgraph import MolGraph, descriptors

REGRESSION = "regression"
CLASSIFICATION = "classification"


def _ring_count(g: MolGraph) -> float:
    return float(descriptors(g)[2])


def _heteroatom_fraction(g: MolGraph) -> float:
    d = descriptors(g)
    return float(d[1] / d[0])


def _size_score(g: MolGraph) -> float:
    d = descriptors(g)
    return float(d[0] + 2.0 * d[2])


DESCRIPTOR_FUNCTIONS = {
    "ring_count": _ring_count,
    "heteroatom_fraction": _heteroatom_fraction,
    "size_score": _size_score,
}


@dataclass(frozen=True)
class TaskSpec:
    """One conditional task: identity, kind, descriptor and shaping parameters."""

    task_id: int
    name: str
    kind: str = REGRESSION
    descriptor: str = "ring_count"
    mean: float = 0.0
    std: float = 1.0
    sigma: float = 0.5
    threshold: float = 0.0
    slope: float = 2.0

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"task kind {self.kind!r}")
        if self.descriptor not in DESCRIPTOR_FUNCTIONS:
            raise ConfigError(f"unknown descriptor {self.descriptor!r}")
        if self.kind == REGRESSION and not self.std > 0:
            raise ConfigError("regression std must be positive")
        if not (self.sigma > 0 and self.slope > 0):
            raise ConfigError("sigma and slope must be positive")

    def normalize(self, y: float) -> float:
        """Target-encoder input: z-score for regression, {-1, +1} for labels."""
        if self.kind == REGRESSION:
            return (y - self.mean) / self.std
        return 2.0 * float(y) - 1.0


def fit_normalization(task: TaskSpec, train: Sequence[MolGraph]) -> TaskSpec:
    """Copy of ``task`` with mean/std fitted on raw descriptor values of ``train``."""
    if task.kind != REGRESSION:
        return task
    vals = np.array([DESCRIPTOR_FUNCTIONS[task.descriptor](g) for g in train])
    std = float(vals.std())
    return replace(task, mean=float(vals.mean()), std=std if std > 0 else 1.0)


def evaluate(g: MolGraph, task: TaskSpec) -> float:
    if task.descriptor not in DESCRIPTOR_FUNCTIONS:
        raise UnknownTask(f"task {task.name!r} uses unknown descriptor")
    value = DESCRIPTOR_FUNCTIONS[task.descriptor](g)
    if task.kind == REGRESSION:
        return value
    return 1.0 / (1.0 + math.exp(-task.slope * (value - task.threshold)))


def label(g: MolGraph, task: TaskSpec) -> float:
    """Condition value describing ``g`` itself (used to build SFT pairs)."""
    out = evaluate(g, task)
    if task.kind == CLASSIFICATION:
        return float(out >= 0.5)
    return out


def discrepancy(o_hat: float, target: float, task: TaskSpec, kind: str | None = None) -> float:
    if kind is not None and kind != task.kind:
        raise KindMismatch(f"{kind} output for {task.kind} task {task.name!r}")
    if task.kind == REGRESSION:
        return abs((o_hat - task.mean) / task.std - (target - task.mean) / task.std)
    if target not in (0, 1):
        raise KindMismatch(f"classification target must be 0 or 1, got {target!r}")
    return abs(o_hat - target)


def shape(d: float, task: TaskSpec) -> float:
    if task.kind == REGRESSION:
        return math.exp(-((d / task.sigma) ** 2))
    return 1.0 - d


# -- registry files -----------------------------------------------------------


def save_registry(tasks: Sequence[TaskSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"tasks": [asdict(t) for t in tasks]}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def tasks_from_obj(obj) -> list[TaskSpec]:
    records = obj["tasks"] if isinstance(obj, dict) else obj
    tasks = []
    for k, rec in enumerate(records):
        rec = dict(rec)
        rec.setdefault("task_id", k)
        tasks.append(TaskSpec(**rec))
    if [t.task_id for t in tasks] != list(range(len(tasks))):
        raise ConfigError("task ids must be dense and ordered from 0")
    return tasks


def load_registry(path) -> list[TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        return tasks_from_obj(json.load(fh))
