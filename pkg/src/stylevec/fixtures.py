"""Toy DiT-shaped checkpoints with planted, ledgered fine-tuning deltas.

Key grammar (``i`` in ``[0, n_blocks)``)::

    text_embed.weight                         [hidden, embed]
    transformer_blocks.{i}.attn.to_q.weight   [hidden, hidden]  (to_k, to_v, to_out alike)
    transformer_blocks.{i}.ff.w1.weight       [2*hidden, hidden]
    transformer_blocks.{i}.ff.w2.weight       [hidden, 2*hidden]
    transformer_blocks.{i}.norm.weight        [hidden]

These names classify cleanly under ``ModelTopology(n_blocks)`` defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from . import rng
from .checkpoint import Checkpoint
from .errors import KeyNotFound
from .tensor import Dtype, Tensor, round_f32_to
from .topology import LayerClass, ModelTopology, classify_layer

ATTN = ("to_q", "to_k", "to_v", "to_out")


@dataclass(frozen=True)
class FixtureSpec:
    n_blocks: int = 4
    embed: int = 8
    hidden: int = 16
    heads: int = 2
    dtype: Dtype = Dtype.F32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")
        if min(self.embed, self.hidden, self.heads) < 1:
            raise ValueError("embed, hidden and heads must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        shapes = {"text_embed.weight": (h, self.embed)}
        for i in range(self.n_blocks):
            prefix = f"transformer_blocks.{i}."
            for name in ATTN:
                shapes[f"{prefix}attn.{name}.weight"] = (h, h)
            shapes[f"{prefix}ff.w1.weight"] = (2 * h, h)
            shapes[f"{prefix}ff.w2.weight"] = (h, 2 * h)
            shapes[f"{prefix}norm.weight"] = (h,)
        return shapes

    def to_json(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "embed": self.embed,
            "hidden": self.hidden,
            "heads": self.heads,
            "dtype": self.dtype.value,
            "seed": self.seed,
        }


def default_topology(n_blocks: int) -> ModelTopology:
    return ModelTopology(n_blocks=n_blocks)


def gen_base(spec: FixtureSpec) -> Checkpoint:
    entries = {}
    for key, shape in spec.shapes().items():
        z = rng.normal(spec.seed, key, math.prod(shape)).reshape(shape)
        if len(shape) == 1:
            values = 1.0 + 0.1 * z
        else:
            values = z / math.sqrt(shape[-1])
        entries[key] = Tensor.from_values(values, spec.dtype)
    meta = {"stylevec.fixture": json.dumps(spec.to_json(), sort_keys=True, separators=(",", ":"))}
    return Checkpoint(entries, meta)


@dataclass(frozen=True)
class PlantLedger:
    """Exact f32 deltas planted per key, each of Frobenius norm ``magnitude``."""

    deltas: dict[str, Tensor]
    style_label: str

    def keys(self):
        return self.deltas.keys()


Target = Union[LayerClass, Iterable[LayerClass], Sequence[str]]


def _infer_topology(base: Checkpoint) -> ModelTopology:
    probe = ModelTopology(n_blocks=1)
    indices = [probe.block_index(k) for k in base.keys()]
    n = max((i for i in indices if i is not None), default=-1) + 1
    return ModelTopology(n_blocks=max(n, 1))


def resolve_targets(base: Checkpoint, target: Target, topology: ModelTopology | None = None) -> list[str]:
    if isinstance(target, LayerClass):
        target = [target]
    target = list(target)
    if all(isinstance(t, LayerClass) for t in target):
        topology = topology or _infer_topology(base)
        wanted = set(target)
        return [k for k in base.keys() if classify_layer(k, topology) in wanted]
    missing = [k for k in target if k not in base]
    if missing:
        raise KeyNotFound(f"target {missing[0]!r} not in base")
    return sorted(set(target))


def gen_styled_variant(
    base: Checkpoint,
    target: Target,
    magnitude: float,
    seed: int,
    *,
    topology: ModelTopology | None = None,
    label: str = "style",
) -> tuple[Checkpoint, PlantLedger]:
    """Fake a fine-tune: add a random delta of norm ``magnitude`` to each target key."""
    if not math.isfinite(magnitude) or magnitude < 0:
        raise ValueError("magnitude must be finite and non-negative")
    keys = resolve_targets(base, target, topology)
    if magnitude == 0.0:
        return base, PlantLedger({}, label)

    entries = dict(base.entries)
    planted = {}
    for k in keys:
        w = base[k]
        if w.numel == 0:
            continue
        g = rng.normal(seed, f"{label}:{k}", w.numel).reshape(w.shape)
        delta = (g * (magnitude / math.sqrt(np.dot(g.ravel(), g.ravel())))).astype(np.float32)
        planted[k] = Tensor(Dtype.F32, delta)
        entries[k] = Tensor(w.dtype, round_f32_to(w.to_f32() + delta, w.dtype))
    return Checkpoint(entries, base.metadata), PlantLedger(planted, label)
