"""Low-rank adapters: materialization, alpha-squared application, SVD extraction.

Targets must be matrices after flattening: rank-2 weights (linear and
embedding layers) are used as-is, 1D-conv weights ``[out, in, kernel]``
become ``[out, in * kernel]``. The rule used per target is recorded in the
adapter so application can restore the original shape.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _parallel
from .checkpoint import Checkpoint
from .errors import (
    DataError,
    KeyNotFound,
    KeyNotInBase,
    NonFiniteScale,
    RankTooLarge,
    ShapeMismatch,
    SvdNonConvergence,
)
from .taskvector import KIND_KEY, Provenance, TaskVector, record_application
from .tensor import Dtype, Tensor, axpy, cast, frobenius_norm, matmul

SVD_RTOL = 1e-7
TINY = sys.float_info.min

A_SUFFIX = ".lora_A"
B_SUFFIX = ".lora_B"


def matrix_shape(shape: Sequence[int]) -> tuple[int, int]:
    """The ``(d, k)`` view of a LoRA-eligible weight shape."""
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    if len(shape) == 3:
        return int(shape[0]), int(shape[1]) * int(shape[2])
    raise ShapeMismatch(f"shape {list(shape)} is not a matrix or 1D-conv weight")


def reshape_rule(shape: Sequence[int]) -> str:
    matrix_shape(shape)
    if len(shape) == 2:
        return "matrix"
    return "conv1d:" + ",".join(str(s) for s in shape)


def rule_shape(rule: str, d: int, k: int) -> tuple[int, ...]:
    if rule == "matrix":
        return (d, k)
    if rule.startswith("conv1d:"):
        try:
            shape = tuple(int(s) for s in rule[len("conv1d:") :].split(","))
        except ValueError:
            raise DataError(f"bad reshape rule {rule!r}") from None
        if len(shape) == 3 and matrix_shape(shape) == (d, k):
            return shape
    raise DataError(f"reshape rule {rule!r} does not fit a {d}x{k} delta")


def is_lora_eligible(shape: Sequence[int]) -> bool:
    return len(shape) in (2, 3) and all(s > 0 for s in shape)


@dataclass(frozen=True)
class LoraEntry:
    a_factor: Tensor  # r x k
    b_factor: Tensor  # d x r
    rule: str = "matrix"

    def __post_init__(self) -> None:
        a, b = self.a_factor.shape, self.b_factor.shape
        if len(a) != 2 or len(b) != 2:
            raise ShapeMismatch(f"LoRA factors must be rank-2, got A{list(a)} B{list(b)}")
        if a[0] != b[1]:
            raise ShapeMismatch(f"A rows {a[0]} != B columns {b[1]}")
        if a[0] < 1:
            raise ShapeMismatch("LoRA rank must be positive")
        if a[0] > min(b[0], a[1]):
            raise RankTooLarge(f"rank {a[0]} exceeds min(d={b[0]}, k={a[1]})")
        rule_shape(self.rule, b[0], a[1])

    @property
    def rank(self) -> int:
        return self.a_factor.shape[0]

    @property
    def d(self) -> int:
        return self.b_factor.shape[0]

    @property
    def k(self) -> int:
        return self.a_factor.shape[1]

    @property
    def target_shape(self) -> tuple[int, ...]:
        return rule_shape(self.rule, self.d, self.k)


@dataclass(frozen=True)
class LoraAdapter:
    entries: Mapping[str, LoraEntry]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rank(self) -> int:
        return max((e.rank for e in self.entries.values()), default=0)

    def to_checkpoint(self) -> Checkpoint:
        tensors, meta = {}, dict(self.metadata)
        for target, e in self.entries.items():
            tensors[target + A_SUFFIX] = e.a_factor
            tensors[target + B_SUFFIX] = e.b_factor
            meta[f"stylevec.reshape.{target}"] = e.rule
        ranks = {e.rank for e in self.entries.values()}
        meta[KIND_KEY] = "lora_adapter"
        meta["stylevec.rank"] = str(ranks.pop()) if len(ranks) == 1 else "mixed"
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, name: str = "adapter") -> "LoraAdapter":
        kind = ckpt.metadata.get(KIND_KEY, "lora_adapter")
        if kind != "lora_adapter":
            raise DataError(f"{name}: expected a LoRA adapter, found kind {kind!r}")
        targets = {}
        for key in ckpt.keys():
            if key.endswith(A_SUFFIX):
                targets.setdefault(key[: -len(A_SUFFIX)], {})["a"] = ckpt[key]
            elif key.endswith(B_SUFFIX):
                targets.setdefault(key[: -len(B_SUFFIX)], {})["b"] = ckpt[key]
            else:
                raise DataError(f"{name}: unexpected tensor {key!r} in adapter")
        entries = {}
        for target, pair in targets.items():
            if set(pair) != {"a", "b"}:
                raise DataError(f"{name}: {target!r} is missing its A or B factor")
            rule = ckpt.metadata.get(f"stylevec.reshape.{target}", "matrix")
            entries[target] = LoraEntry(pair["a"], pair["b"], rule)
        meta = {
            k: v
            for k, v in ckpt.metadata.items()
            if k not in (KIND_KEY, "stylevec.rank") and not k.startswith("stylevec.reshape.")
        }
        return cls(entries, meta)


def materialize_delta(entry: LoraEntry) -> Tensor:
    """``B @ A`` as an F32 ``d x k`` matrix."""
    return matmul(entry.b_factor, entry.a_factor)


def lora_scale(alpha: float) -> float:
    """Application scale for a LoRA E-Vector: the coefficient squared."""
    if not math.isfinite(alpha):
        raise NonFiniteScale(f"alpha must be finite, got {alpha!r}")
    return alpha * alpha


def _target_delta(target: str, entry: LoraEntry, base: Checkpoint) -> Tensor:
    if target not in base:
        raise KeyNotInBase(f"adapter target {target!r} not in base")
    w = base[target]
    if not is_lora_eligible(w.shape) or matrix_shape(w.shape) != (entry.d, entry.k):
        raise ShapeMismatch(
            f"{target}: base weight {list(w.shape)} vs LoRA delta {entry.d}x{entry.k}"
        )
    if entry.target_shape != w.shape:
        raise ShapeMismatch(f"{target}: adapter recorded shape {list(entry.target_shape)}")
    return cast(materialize_delta(entry).reshape(w.shape), w.dtype)


def adapter_deltas(adapter: LoraAdapter, base: Checkpoint, name: str = "adapter") -> TaskVector:
    """Materialize every target, reshaped and cast to the base weight's layout."""
    targets = list(adapter.entries)
    deltas = _parallel.pmap(lambda t: _target_delta(t, adapter.entries[t], base), targets)
    prov = Provenance(base_id="base", finetuned_id=name)
    return TaskVector(Checkpoint(dict(zip(targets, deltas))), prov)


def apply_lora(base: Checkpoint, adapter: LoraAdapter, alpha: float, *, name: str = "adapter") -> Checkpoint:
    """``W = W_pre + alpha**2 * B @ A`` on every adapter target.

    ``alpha = 1`` is the plain training-time merge.
    """
    scale = lora_scale(alpha)
    deltas = adapter_deltas(adapter, base, name)

    def apply_key(k: str) -> Tensor:
        if k not in deltas:
            return base[k]
        return axpy(base[k], deltas[k], scale)

    keys = list(base.keys())
    out = dict(zip(keys, _parallel.pmap(apply_key, keys)))
    meta = record_application(dict(base.metadata), f"lora:{name}", scale)
    return Checkpoint(out, meta)


def _extract_one(delta: Tensor, rank: int, rtol: float) -> tuple[Tensor, Tensor]:
    d, k = matrix_shape(delta.shape)
    m = delta.to_f64().reshape(d, k)
    if not np.all(np.isfinite(m)):
        raise SvdNonConvergence("delta contains non-finite values")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNonConvergence(str(exc)) from None
    s = s[:rank].copy()
    if s.size and s[0] > 0:
        s[s < rtol * s[0]] = 0.0
    else:
        s[:] = 0.0
    root = np.sqrt(s)
    a = root[:, None] * vt[:rank]
    b = u[:, :rank] * root[None, :]
    return Tensor.from_values(a, Dtype.F32), Tensor.from_values(b, Dtype.F32)


def extract_lora(
    tau: TaskVector,
    rank: int,
    targets: Sequence[str],
    *,
    rtol: float = SVD_RTOL,
) -> LoraAdapter:
    """Best rank-``rank`` factorization of each target delta (truncated SVD).

    The singular values are split evenly, ``A = sqrt(S) V^T`` and
    ``B = U sqrt(S)``; values below ``rtol * s_max`` are dropped.
    """
    if rank < 1:
        raise RankTooLarge(f"rank must be positive, got {rank}")
    for t in targets:
        if t not in tau:
            raise KeyNotFound(f"target {t!r} not in task vector")
        d, k = matrix_shape(tau[t].shape)
        if rank > min(d, k):
            raise RankTooLarge(f"{t}: rank {rank} exceeds min(d={d}, k={k})")

    def one(t: str) -> LoraEntry:
        a, b = _extract_one(tau[t], rank, rtol)
        return LoraEntry(a, b, reshape_rule(tau[t].shape))

    targets = sorted(set(targets))
    entries = dict(zip(targets, _parallel.pmap(one, targets)))
    meta = {"stylevec.source": tau.id}
    return LoraAdapter(entries, meta)


def rank_targets_by_variation(tau: TaskVector, theta_pre: Checkpoint) -> list[tuple[str, float]]:
    """Keys ordered by ``||tau_k|| / ||theta_pre_k||``, largest first, ties by key."""
    missing = [k for k in tau.keys() if k not in theta_pre]
    if missing:
        raise KeyNotInBase(f"{missing[0]!r} not in base")
    rel = [
        (k, frobenius_norm(tau[k]) / max(frobenius_norm(theta_pre[k]), TINY)) for k in tau.keys()
    ]
    return sorted(rel, key=lambda kv: (-kv[1], kv[0]))
