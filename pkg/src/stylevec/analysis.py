"""Parameter-space probes over task vectors and fine-tuning trajectories.

All reductions run in f64 and sum per key in lexicographic key order, so
reports are reproducible regardless of thread count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _parallel, rng
from .checkpoint import Checkpoint
from .errors import (
    DegenerateTrajectory,
    EmptyIntersection,
    KeyNotFound,
    KeyNotInBase,
    KeySetMismatch,
    ShapeMismatch,
)
from .lora import TINY
from .taskvector import TaskVector
from .tensor import Tensor, frobenius_norm, round_f32_to
from .topology import LayerClass, ModelTopology, classify_layer


# -- directional consistency -------------------------------------------------


@dataclass
class ConsistencyReport:
    labels: list[str]
    cosine: list[list[float | None]]
    undefined: list[str]
    keys_compared: int
    per_layer: dict[str, list[list[float | None]]] | None = None

    def to_json(self) -> dict:
        doc = {
            "labels": self.labels,
            "cosine": self.cosine,
            "undefined": self.undefined,
            "keys_compared": self.keys_compared,
        }
        if self.per_layer is not None:
            doc["per_layer"] = self.per_layer
        return doc


def _cosines(gram: np.ndarray) -> list[list[float | None]]:
    norms = np.sqrt(np.diag(gram))
    m = len(norms)
    out: list[list[float | None]] = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            if norms[i] > 0 and norms[j] > 0:
                c = 1.0 if i == j else gram[i, j] / (norms[i] * norms[j])
                out[i][j] = float(min(1.0, max(-1.0, c)))
    return out


def direction_consistency(
    vectors: Sequence[TaskVector],
    labels: Sequence[str] | None = None,
    *,
    per_layer: bool = False,
) -> ConsistencyReport:
    """Pairwise cosine similarity of task vectors over their shared keys.

    A zero vector has no direction: its row and column are ``None`` and its
    label is listed in ``undefined``.
    """
    if len(vectors) < 2:
        raise ValueError("need at least two vectors")
    labels = list(labels) if labels is not None else [v.id for v in vectors]
    keys = sorted(set.intersection(*(set(v.keys()) for v in vectors)))
    if not keys:
        raise EmptyIntersection("vectors share no keys")

    def key_gram(k: str) -> np.ndarray:
        shapes = {v[k].shape for v in vectors}
        if len(shapes) != 1:
            raise ShapeMismatch(f"{k}: shapes differ across vectors")
        x = np.stack([v[k].to_f64().ravel() for v in vectors])
        return x @ x.T

    grams = _parallel.pmap(key_gram, keys)
    total = np.zeros((len(vectors), len(vectors)))
    for g in grams:
        total += g
    undefined = [labels[i] for i in range(len(vectors)) if total[i, i] == 0.0]
    layers = {k: _cosines(g) for k, g in zip(keys, grams)} if per_layer else None
    return ConsistencyReport(labels, _cosines(total), undefined, len(keys), layers)


# -- perturbation ------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    sigma: float
    seed: int
    target_keys: tuple[str, ...] | None = None
    layer_class: LayerClass | None = None
    topology: ModelTopology | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and non-negative, got {self.sigma}")
        if (self.target_keys is None) == (self.layer_class is None):
            raise ValueError("give exactly one of target_keys or layer_class")
        if self.layer_class is not None and self.topology is None:
            raise ValueError("a layer_class selector needs a topology")

    def resolve(self, ckpt: Checkpoint) -> list[str]:
        if self.target_keys is not None:
            missing = [k for k in self.target_keys if k not in ckpt]
            if missing:
                raise KeyNotFound(f"perturbation target {missing[0]!r} not in checkpoint")
            return sorted(set(self.target_keys))
        return [k for k in ckpt.keys() if classify_layer(k, self.topology) is self.layer_class]


def gaussian_noise(seed: int, key: str, shape: Sequence[int], sigma: float) -> np.ndarray:
    """The f64 noise ``perturb`` adds to tensor ``key``."""
    n = math.prod(shape)
    return (rng.normal(seed, key, n) * sigma).reshape(tuple(shape))


def perturb(ckpt: Checkpoint, spec: PerturbationSpec) -> Checkpoint:
    """Add seeded N(0, sigma^2) noise to the targeted tensors."""
    targets = spec.resolve(ckpt)
    if spec.sigma == 0.0:
        return ckpt

    def noisy(k: str) -> Tensor:
        t = ckpt[k]
        noise = gaussian_noise(spec.seed, k, t.shape, spec.sigma).astype(np.float32)
        return Tensor(t.dtype, round_f32_to(t.to_f32() + noise, t.dtype))

    out = dict(ckpt.entries)
    out.update(zip(targets, _parallel.pmap(noisy, targets)))
    record = {"sigma": spec.sigma, "seed": spec.seed, "keys": len(targets)}
    meta = {**ckpt.metadata, "stylevec.perturb": json.dumps(record, sort_keys=True, separators=(",", ":"))}
    return Checkpoint(out, meta)


# -- per-layer variation -----------------------------------------------------


@dataclass
class LayerStats:
    rows: list[dict]
    groups: dict[str, dict] | None
    total_numel: int

    def to_json(self) -> dict:
        doc = {"total_numel": self.total_numel, "rows": self.rows}
        if self.groups is not None:
            doc["groups"] = self.groups
        return doc


def per_layer_stats(
    tau: TaskVector, theta_pre: Checkpoint, topology: ModelTopology | None = None
) -> LayerStats:
    missing = [k for k in tau.keys() if k not in theta_pre]
    if missing:
        raise KeyNotInBase(f"{missing[0]!r} not in base")
    rows = []
    for k, d in tau.items():
        abs_norm = frobenius_norm(d)
        rows.append(
            {
                "key": k,
                "numel": d.numel,
                "abs_norm": abs_norm,
                "rel_norm": abs_norm / max(frobenius_norm(theta_pre[k]), TINY),
            }
        )
    groups = None
    if topology is not None:
        groups = {c.value: {"keys": 0, "numel": 0, "sq_norm": 0.0} for c in LayerClass}
        for row in rows:
            cls = classify_layer(row["key"], topology).value
            row["class"] = cls
            g = groups[cls]
            g["keys"] += 1
            g["numel"] += row["numel"]
            g["sq_norm"] += row["abs_norm"] ** 2
        for g in groups.values():
            g["abs_norm"] = math.sqrt(g.pop("sq_norm"))
    return LayerStats(rows, groups, sum(r["numel"] for r in rows))


# -- linearity ---------------------------------------------------------------


@dataclass
class LinearityReport:
    steps: list[dict] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max(s["residual"] for s in self.steps)

    def to_json(self) -> dict:
        return {"steps": self.steps, "max_residual": self.max_residual}


def linearity_probe(theta_pre: Checkpoint, trajectory: Sequence[Checkpoint]) -> LinearityReport:
    """Compare every step's shift from ``theta_pre`` with the final shift.

    For each step ``t`` with shift ``s_t`` and final shift ``f``, reports the
    cosine between them and ``||s_t - proj_f(s_t)|| / ||s_t||``. A straight
    trajectory gives cosine 1 and residual 0 throughout.
    """
    if len(trajectory) < 3:
        raise ValueError("trajectory needs at least three checkpoints")
    keys = list(theta_pre.keys())
    for i, ckpt in enumerate(trajectory):
        if set(ckpt.keys()) != set(keys):
            raise KeySetMismatch(f"trajectory[{i}] keys differ from the base")
        for k in keys:
            if ckpt[k].shape != theta_pre[k].shape:
                raise ShapeMismatch(f"trajectory[{i}] {k}: shape differs from the base")

    base = {k: theta_pre[k].to_f64().ravel() for k in keys}
    final = {k: trajectory[-1][k].to_f64().ravel() - base[k] for k in keys}
    ff = sum(float(np.dot(final[k], final[k])) for k in keys)
    if ff == 0.0:
        raise DegenerateTrajectory("final checkpoint equals the base")

    report = LinearityReport()
    for i, ckpt in enumerate(trajectory):
        shift = {k: ckpt[k].to_f64().ravel() - base[k] for k in keys}
        ss = sum(float(np.dot(shift[k], shift[k])) for k in keys)
        sf = sum(float(np.dot(shift[k], final[k])) for k in keys)
        coef = sf / ff
        rr = sum(float(np.sum((shift[k] - coef * final[k]) ** 2)) for k in keys)
        norm = math.sqrt(ss)
        if norm == 0.0:
            cosine, residual = None, 0.0
        else:
            cosine = min(1.0, max(-1.0, sf / (norm * math.sqrt(ff))))
            residual = math.sqrt(rr) / norm
        report.steps.append(
            {"index": i, "shift_norm": norm, "cosine": cosine, "residual": residual, "projection": coef}
        )
    return report
