"""Set-level evaluation of generated molecules against a reference set and their conditions."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptySet, LengthMismatch
from .molgraph import MolGraph, canonical_key, check_validity, descriptors
from .oracle import REGRESSION, TaskSpec, discrepancy, evaluate

N_BUCKETS = 512


@dataclass
class EvalReport:
    validity: float
    diversity: float
    similarity: float
    distance: float
    n_samples: int
    per_task: dict[str, float] = field(default_factory=dict)  # ordered as the task registry
    uniqueness: float = 0.0
    novelty: float | None = None

    def columns(self) -> list[str]:
        return ["validity", "diversity", "similarity", "distance", *self.per_task]

    def row(self) -> list[float]:
        return [self.validity, self.diversity, self.similarity, self.distance, *self.per_task.values()]

    def to_dict(self) -> dict:
        return {
            "validity": self.validity,
            "diversity": self.diversity,
            "similarity": self.similarity,
            "distance": self.distance,
            "n_samples": self.n_samples,
            "per_task": dict(self.per_task),
            "uniqueness": self.uniqueness,
            "novelty": self.novelty,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.columns())
        w.writerow([repr(float(v)) for v in self.row()])
        return buf.getvalue()


# --------------------------------------------------------------------------
# fragments


def fragments(g: MolGraph) -> list[str]:
    """Canonical keys of every connected induced subgraph on 1 to 3 atoms."""
    nbrs = g.neighbors()
    sets: set[tuple[int, ...]] = {(a,) for a in range(g.n_atoms)}
    sets.update((i, j) for i, j, _ in g.bonds)
    for a in range(g.n_atoms):
        around = sorted(b for b, _ in nbrs[a])
        for x in range(len(around)):
            for y in range(x + 1, len(around)):
                sets.add(tuple(sorted((a, around[x], around[y]))))
    return [canonical_key(g.subgraph(list(s))) for s in sorted(sets)]


def bucket(key: str) -> int:
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest()[:8], 16) % N_BUCKETS


def fragment_vector(g: MolGraph) -> np.ndarray:
    v = np.zeros(N_BUCKETS)
    for key in fragments(g):
        v[bucket(key)] += 1.0
    return v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


def internal_diversity(vectors: np.ndarray) -> float:
    """``1 - mean pairwise cosine`` over distinct pairs; 0 for fewer than two vectors."""
    n = len(vectors)
    if n < 2:
        return 0.0
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.where(norms > 0, norms, 1.0)
    sims = unit @ unit.T
    mean = (sims.sum() - np.trace(sims)) / (n * (n - 1))
    return float(np.clip(1.0 - mean, 0.0, 1.0))


# --------------------------------------------------------------------------
# Frechet distance


def sqrtm_psd_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Square root of ``a @ b`` for PSD ``a``, ``b`` via ``a^{1/2} b a^{1/2}``.

    ``a @ b`` is similar to the symmetric matrix ``a^{1/2} b a^{1/2}``, so the
    trace of the root (all the distance needs) is the trace of its root.
    """
    ra = _psd_sqrt(a)
    return _psd_sqrt(ra @ b @ ra)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    # rounding noise around zero eigenvalues would otherwise leak in as sqrt(eps)
    tol = len(w) * np.finfo(float).eps * max(float(np.abs(w).max(initial=0.0)), 1e-300)
    w = np.where(w > tol, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False) if len(x) > 1 else np.zeros((x.shape[1], x.shape[1]))
    return mu, np.atleast_2d(cov)


def frechet_distance(x: np.ndarray, y: np.ndarray) -> float:
    mu1, s1 = gaussian_fit(x)
    mu2, s2 = gaussian_fit(y)
    root = sqrtm_psd_product(s1, s2)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(root))
    return max(d, 0.0)


# --------------------------------------------------------------------------
# set evaluation


def _cond(c) -> tuple[int, float]:
    if hasattr(c, "task"):
        return int(c.task), float(c.target)
    k, y = c
    return int(k), float(y)


def _valid(g) -> bool:
    return g is not None and check_validity(g).is_valid


def property_metrics(
    generated: Sequence[MolGraph | None], conditions: Sequence, tasks: Sequence[TaskSpec]
) -> dict[str, float]:
    """MAE (normalized units) or accuracy per task, in registry order; NaN for tasks without valid samples."""
    errs: dict[int, list[float]] = {t.task_id: [] for t in tasks}
    for g, c in zip(generated, conditions):
        if not _valid(g):
            continue
        k, y = _cond(c)
        task = tasks[k]
        o = evaluate(g, task)
        if task.kind == REGRESSION:
            errs[k].append(discrepancy(o, y, task))
        else:
            errs[k].append(float((1.0 if o >= 0.5 else 0.0) == y))
    out = {}
    for t in tasks:
        prefix = "mae" if t.kind == REGRESSION else "accuracy"
        vals = errs[t.task_id]
        out[f"{prefix}_{t.name}"] = float(np.mean(vals)) if vals else float("nan")
    return out


def evaluate_set(
    generated: Sequence[MolGraph | None],
    reference: Sequence[MolGraph],
    conditions: Sequence | None = None,
    tasks: Sequence[TaskSpec] = (),
    training: Sequence[MolGraph] | None = None,
) -> EvalReport:
    """Metrics of a generated set; ``None`` entries stand for failed decodes.

    Set-level metrics use only valid samples. With no valid samples at all,
    similarity and diversity are 0 and distance is NaN.
    """
    if len(generated) == 0:
        raise EmptySet("generated set is empty")
    if len(reference) == 0:
        raise EmptySet("reference set is empty")
    if conditions is not None and len(conditions) != len(generated):
        raise LengthMismatch(f"{len(conditions)} conditions for {len(generated)} samples")
    valid = [g for g in generated if _valid(g)]
    validity = len(valid) / len(generated)
    ref_vecs = np.stack([fragment_vector(g) for g in reference])
    if valid:
        gen_vecs = np.stack([fragment_vector(g) for g in valid])
        similarity = cosine(gen_vecs.sum(0), ref_vecs.sum(0))
        diversity = internal_diversity(gen_vecs)
        distance = frechet_distance(
            np.stack([descriptors(g) for g in valid]), np.stack([descriptors(g) for g in reference])
        )
        keys = [canonical_key(g) for g in valid]
        uniqueness = len(set(keys)) / len(keys)
    else:
        similarity, diversity, distance, keys, uniqueness = 0.0, 0.0, math.nan, [], 0.0
    novelty = None
    if training is not None and keys:
        seen = {canonical_key(g) for g in training}
        novelty = sum(k not in seen for k in keys) / len(keys)
    per_task = property_metrics(generated, conditions, tasks) if conditions is not None else {}
    return EvalReport(
        validity=validity,
        diversity=diversity,
        similarity=similarity,
        distance=distance,
        n_samples=len(generated),
        per_task=per_task,
        uniqueness=uniqueness,
        novelty=novelty,
    )
