"""Task vectors and E-Vectors.

A task vector is the per-key difference between a fine-tuned checkpoint and
the checkpoint it was tuned from. An E-Vector pairs a task vector with a
coefficient; the multiplication is deferred until application so that one
stored delta can be reused at many strengths and is rounded only once.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _parallel
from .checkpoint import Checkpoint
from .errors import (
    CoefficientOutOfRange,
    DataError,
    DtypeMismatch,
    EmptyIntersection,
    KeyNotInBase,
    KeySetMismatch,
    NonFiniteCoefficient,
    ShapeMismatch,
)
from .tensor import Tensor, round_f32_to, axpy, elementwise_sub

DEFAULT_BETA_MAX = 3.0

KIND_KEY = "stylevec.kind"
APPLIED_KEY = "stylevec.applied"


class KeyAlignmentPolicy(enum.Enum):
    STRICT = "strict"
    INTERSECT = "intersect"


@dataclass(frozen=True)
class Provenance:
    base_id: str
    finetuned_id: str
    alignment: KeyAlignmentPolicy = KeyAlignmentPolicy.STRICT


@dataclass(frozen=True)
class AlignmentReport:
    """Keys excluded by the intersect policy, grouped by reason."""

    only_in_finetuned: tuple[str, ...] = ()
    only_in_base: tuple[str, ...] = ()
    shape_mismatch: tuple[str, ...] = ()
    dtype_mismatch: tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not (
            self.only_in_finetuned or self.only_in_base or self.shape_mismatch or self.dtype_mismatch
        )

    def to_json(self) -> dict:
        return {
            "only_in_finetuned": list(self.only_in_finetuned),
            "only_in_base": list(self.only_in_base),
            "shape_mismatch": list(self.shape_mismatch),
            "dtype_mismatch": list(self.dtype_mismatch),
        }


@dataclass(frozen=True)
class TaskVector:
    delta: Checkpoint
    provenance: Provenance
    report: AlignmentReport = field(default_factory=AlignmentReport)

    @property
    def id(self) -> str:
        return f"{self.provenance.finetuned_id}-{self.provenance.base_id}"

    def __getitem__(self, key: str) -> Tensor:
        return self.delta[key]

    def __contains__(self, key: object) -> bool:
        return key in self.delta

    def keys(self):
        return self.delta.keys()

    def items(self):
        return self.delta.items()

    def to_checkpoint(self) -> Checkpoint:
        meta = {
            KIND_KEY: "task_vector",
            "stylevec.base_id": self.provenance.base_id,
            "stylevec.finetuned_id": self.provenance.finetuned_id,
            "stylevec.alignment": self.provenance.alignment.value,
        }
        return Checkpoint(self.delta.entries, {**self.delta.metadata, **meta})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, name: str = "vector") -> "TaskVector":
        """Interpret a checkpoint file as a task vector.

        Files without ``stylevec.*`` provenance are accepted as raw deltas.
        """
        meta = dict(ckpt.metadata)
        kind = meta.get(KIND_KEY, "task_vector")
        if kind not in ("task_vector", "evector"):
            raise DataError(f"{name}: expected a task vector, found kind {kind!r}")
        prov = Provenance(
            base_id=meta.get("stylevec.base_id", "base"),
            finetuned_id=meta.get("stylevec.finetuned_id", name),
            alignment=KeyAlignmentPolicy(meta.get("stylevec.alignment", "strict")),
        )
        keep = {k: v for k, v in meta.items() if not k.startswith("stylevec.")}
        return cls(Checkpoint(ckpt.entries, keep), prov)


@dataclass(frozen=True)
class EVector:
    vector: TaskVector
    coefficient: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.coefficient):
            raise NonFiniteCoefficient(f"coefficient must be finite, got {self.coefficient!r}")

    def to_checkpoint(self) -> Checkpoint:
        ckpt = self.vector.to_checkpoint()
        return ckpt.with_metadata(
            **{KIND_KEY: "evector", "stylevec.coefficient": repr(float(self.coefficient))}
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, name: str = "vector") -> "EVector | None":
        """Return the stored E-Vector, or None when the file carries no coefficient."""
        raw = ckpt.metadata.get("stylevec.coefficient")
        if ckpt.metadata.get(KIND_KEY) != "evector" or raw is None:
            return None
        try:
            coeff = float(raw)
        except ValueError:
            raise DataError(f"{name}: bad stylevec.coefficient {raw!r}") from None
        return cls(TaskVector.from_checkpoint(ckpt, name), coeff)


def build_task_vector(
    theta_ft: Checkpoint,
    theta_pre: Checkpoint,
    policy: KeyAlignmentPolicy = KeyAlignmentPolicy.STRICT,
    *,
    base_id: str = "base",
    finetuned_id: str = "finetuned",
) -> TaskVector:
    ft_keys, pre_keys = set(theta_ft.keys()), set(theta_pre.keys())
    report = AlignmentReport()
    if policy is KeyAlignmentPolicy.STRICT:
        if ft_keys != pre_keys:
            extra = sorted(ft_keys - pre_keys)
            missing = sorted(pre_keys - ft_keys)
            raise KeySetMismatch(f"only in fine-tuned: {extra[:5]}; only in base: {missing[:5]}")
        keys = sorted(ft_keys)
    else:
        shape_bad, dtype_bad, keys = [], [], []
        for k in sorted(ft_keys & pre_keys):
            a, b = theta_ft[k], theta_pre[k]
            if a.shape != b.shape:
                shape_bad.append(k)
            elif a.dtype is not b.dtype:
                dtype_bad.append(k)
            else:
                keys.append(k)
        if not keys:
            raise EmptyIntersection("no common keys with matching shape and dtype")
        report = AlignmentReport(
            tuple(sorted(ft_keys - pre_keys)),
            tuple(sorted(pre_keys - ft_keys)),
            tuple(shape_bad),
            tuple(dtype_bad),
        )

    def diff(k: str) -> Tensor:
        try:
            return elementwise_sub(theta_ft[k], theta_pre[k])
        except (ShapeMismatch, DtypeMismatch) as exc:
            raise type(exc)(f"{k}: {exc}") from None

    deltas = _parallel.pmap(diff, keys)
    return TaskVector(
        Checkpoint(dict(zip(keys, deltas))),
        Provenance(base_id, finetuned_id, policy),
        report,
    )


def scale_task_vector(
    tau: TaskVector,
    coeff: float,
    *,
    emotion: bool = False,
    beta_max: float = DEFAULT_BETA_MAX,
) -> EVector:
    """Pair ``tau`` with a coefficient.

    With ``emotion=True`` the coefficient is a strength and must lie in
    ``[0, beta_max]``.
    """
    if not math.isfinite(coeff):
        raise NonFiniteCoefficient(f"coefficient must be finite, got {coeff!r}")
    if emotion and not 0.0 <= coeff <= beta_max:
        raise CoefficientOutOfRange(f"strength {coeff} outside [0, {beta_max}]")
    return EVector(tau, float(coeff))


def record_application(meta: dict, vector_id: str, coefficient: float) -> dict:
    applied = json.loads(meta.get(APPLIED_KEY, "[]"))
    applied.append({"vector": vector_id, "coefficient": float(coefficient)})
    return {**meta, APPLIED_KEY: json.dumps(applied, separators=(",", ":"), sort_keys=True)}


def apply_evector(theta_pre: Checkpoint, eps: EVector) -> Checkpoint:
    vec = eps.vector

    def apply_key(k: str) -> Tensor:
        if k not in vec:
            return theta_pre[k]
        try:
            return axpy(theta_pre[k], vec[k], eps.coefficient)
        except (ShapeMismatch, DtypeMismatch) as exc:
            raise type(exc)(f"{k}: {exc}") from None

    missing = [k for k in vec.keys() if k not in theta_pre]
    if missing:
        raise KeyNotInBase(f"{len(missing)} vector keys absent from base, e.g. {missing[0]!r}")
    keys = list(theta_pre.keys())
    out = dict(zip(keys, _parallel.pmap(apply_key, keys)))
    meta = record_application(dict(theta_pre.metadata), vec.id, eps.coefficient)
    return Checkpoint(out, meta)


def combine_linear(terms: Sequence[EVector]) -> TaskVector:
    """Collapse ``sum(coeff_i * tau_i)`` into one task vector.

    Keys missing from a term count as zero. Accumulation is f32, in list
    order, rounded once at the end.
    """
    if not terms:
        raise ValueError("combine_linear needs at least one term")
    keys = sorted(set().union(*(t.vector.keys() for t in terms)))

    def combine_key(k: str) -> Tensor:
        present = [t for t in terms if k in t.vector]
        first = present[0].vector[k]
        acc = np.zeros(first.shape, dtype=np.float32)
        for t in present:
            d = t.vector[k]
            if d.shape != first.shape:
                raise ShapeMismatch(f"{k}: {list(d.shape)} vs {list(first.shape)}")
            if d.dtype is not first.dtype:
                raise DtypeMismatch(f"{k}: {d.dtype.value} vs {first.dtype.value}")
            if t.coefficient != 0.0:
                acc = acc + np.float32(t.coefficient) * d.to_f32()
        return Tensor(first.dtype, round_f32_to(acc, first.dtype))

    deltas = _parallel.pmap(combine_key, keys)
    bases = {t.vector.provenance.base_id for t in terms}
    ids = ",".join(t.vector.id for t in terms)
    prov = Provenance(bases.pop() if len(bases) == 1 else "mixed", f"combine({ids})")
    return TaskVector(Checkpoint(dict(zip(keys, deltas))), prov)
