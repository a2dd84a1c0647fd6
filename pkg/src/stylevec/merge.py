"""Fully merging and hierarchical merging of task vectors and LoRA adapters.

Both strategies first resolve inputs into a ``MergePlan``: for every output
key, the ordered list of (input, effective scale) contributions. Full
task vectors contribute at ``coefficient``, LoRA adapters at
``coefficient ** 2``. Execution adds the contributions to the base in f32,
in plan order, and rounds once to the base dtype, so the result does not
depend on how keys are scheduled across threads.

The hierarchical strategy routes the dialect input to the text embedding
and the early transformer blocks, and the emotion input to the late
blocks. Input keys outside an input's region are dropped and listed in
``MergePlan.dropped``.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from . import _parallel
from .checkpoint import Checkpoint, read_checkpoint
from .errors import (
    DtypeMismatch,
    KeyNotInBase,
    MissingInput,
    RoleViolation,
    SchemaError,
    ShapeMismatch,
    StylevecError,
    TopologyMismatch,
)
from .lora import LoraAdapter, adapter_deltas, lora_scale
from .taskvector import TaskVector, record_application
from .tensor import Tensor, round_f32_to
from .topology import (
    DIALECT_CLASSES,
    EMOTION_CLASSES,
    LayerClass,
    ModelTopology,
    classify_layer,
    partition,
)

Source = Union[TaskVector, LoraAdapter]


class Strategy(enum.Enum):
    FULL = "full"
    HIERARCHICAL = "hierarchical"


class Role(enum.Enum):
    DIALECT = "dialect"
    EMOTION = "emotion"
    GENERIC = "generic"


@dataclass(frozen=True)
class MergeInput:
    source: Source
    coefficient: float
    role: Role = Role.GENERIC
    name: str = ""

    @property
    def kind(self) -> str:
        return "lora" if isinstance(self.source, LoraAdapter) else "task_vector"

    @property
    def scale(self) -> float:
        if isinstance(self.source, LoraAdapter):
            return lora_scale(self.coefficient)
        if not math.isfinite(self.coefficient):
            raise SchemaError(f"coefficient must be finite, got {self.coefficient!r}")
        return float(self.coefficient)


@dataclass(frozen=True)
class Contribution:
    input_index: int
    scale: float


@dataclass
class MergePlan:
    strategy: Strategy
    inputs: list[dict]
    contributions: dict[str, list[Contribution]]
    dropped: dict[int, list[str]] = field(default_factory=dict)
    class_counts: dict[str, int] = field(default_factory=dict)
    topology: ModelTopology | None = None
    # resolved data, filled when the plan is built from real checkpoints
    base: Checkpoint | None = field(default=None, repr=False)
    deltas: list[TaskVector] = field(default_factory=list, repr=False)

    @property
    def touched_keys(self) -> list[str]:
        return [k for k, cs in self.contributions.items() if any(c.scale != 0.0 for c in cs)]

    def to_json(self) -> dict:
        doc = {
            "strategy": self.strategy.value,
            "inputs": self.inputs,
            "contributions": {
                k: [{"input": c.input_index, "scale": c.scale} for c in cs]
                for k, cs in self.contributions.items()
                if cs
            },
            "dropped": {str(i): keys for i, keys in sorted(self.dropped.items()) if keys},
        }
        if self.topology is not None:
            doc["topology"] = self.topology.to_json()
            doc["class_counts"] = self.class_counts
        return doc


def _materialize(base: Checkpoint, inputs: Sequence[MergeInput]) -> list[TaskVector]:
    out = []
    for i, inp in enumerate(inputs):
        try:
            if isinstance(inp.source, LoraAdapter):
                out.append(adapter_deltas(inp.source, base, inp.name or f"input{i}"))
                continue
            for k, t in inp.source.items():
                if k not in base:
                    raise KeyNotInBase(f"{k!r} not in base")
                if t.shape != base[k].shape:
                    raise ShapeMismatch(f"{k}: {list(t.shape)} vs base {list(base[k].shape)}")
                if t.dtype is not base[k].dtype:
                    raise DtypeMismatch(f"{k}: {t.dtype.value} vs base {base[k].dtype.value}")
            out.append(inp.source)
        except StylevecError as exc:
            raise type(exc)(f"input {i} ({inp.name or inp.kind}): {exc}") from None
    return out


def _describe(inputs: Sequence[MergeInput]) -> list[dict]:
    return [
        {
            "index": i,
            "name": inp.name,
            "kind": inp.kind,
            "role": inp.role.value,
            "coefficient": float(inp.coefficient),
            "scale": inp.scale,
        }
        for i, inp in enumerate(inputs)
    ]


def plan_full(base: Checkpoint, inputs: Sequence[MergeInput]) -> MergePlan:
    if not inputs:
        raise SchemaError("full merge needs at least one input")
    deltas = _materialize(base, inputs)
    contributions: dict[str, list[Contribution]] = {k: [] for k in base.keys()}
    for i, (inp, delta) in enumerate(zip(inputs, deltas)):
        for k in delta.keys():
            contributions[k].append(Contribution(i, inp.scale))
    return MergePlan(Strategy.FULL, _describe(inputs), contributions, base=base, deltas=deltas)


def plan_hierarchical(
    base: Checkpoint, dialect: MergeInput, emotion: MergeInput, topology: ModelTopology
) -> MergePlan:
    groups = partition(base.keys(), topology)
    if not groups[LayerClass.EARLY_BLOCK] and not groups[LayerClass.LATE_BLOCK]:
        raise TopologyMismatch(f"no base key matches block pattern {topology.block_pattern!r}")
    inputs = [
        MergeInput(dialect.source, dialect.coefficient, Role.DIALECT, dialect.name),
        MergeInput(emotion.source, emotion.coefficient, Role.EMOTION, emotion.name),
    ]
    deltas = _materialize(base, inputs)
    contributions: dict[str, list[Contribution]] = {k: [] for k in base.keys()}
    dropped: dict[int, list[str]] = {0: [], 1: []}
    for i, (inp, delta, allowed) in enumerate(
        zip(inputs, deltas, (DIALECT_CLASSES, EMOTION_CLASSES))
    ):
        for k in delta.keys():
            if classify_layer(k, topology) in allowed:
                contributions[k].append(Contribution(i, inp.scale))
            else:
                dropped[i].append(k)
    counts = {c.value: len(keys) for c, keys in groups.items()}
    return MergePlan(
        Strategy.HIERARCHICAL,
        _describe(inputs),
        contributions,
        dropped,
        counts,
        topology,
        base=base,
        deltas=deltas,
    )


def execute_plan(plan: MergePlan) -> Checkpoint:
    base, deltas = plan.base, plan.deltas
    if base is None:
        raise ValueError("plan carries no resolved data")

    def merge_key(k: str) -> Tensor:
        live = [c for c in plan.contributions.get(k, []) if c.scale != 0.0]
        w = base[k]
        if not live:
            return w
        acc = w.to_f32()
        for c in live:
            acc = acc + np.float32(c.scale) * deltas[c.input_index][k].to_f32()
        return Tensor(w.dtype, round_f32_to(acc, w.dtype))

    keys = list(base.keys())
    out = dict(zip(keys, _parallel.pmap(merge_key, keys)))
    meta = dict(base.metadata)
    for desc in plan.inputs:
        meta = record_application(meta, desc["name"] or f"input{desc['index']}", desc["scale"])
    meta["stylevec.merge"] = plan.strategy.value
    return Checkpoint(out, meta)


def merge_full(base: Checkpoint, inputs: Sequence[MergeInput]) -> Checkpoint:
    """``base + sum(scale_i * delta_i)`` over every key each input covers."""
    return execute_plan(plan_full(base, inputs))


def merge_hierarchical(
    base: Checkpoint, dialect: MergeInput, emotion: MergeInput, topology: ModelTopology
) -> tuple[Checkpoint, MergePlan]:
    """Route dialect to embedding + early blocks and emotion to late blocks.

    Returns the merged checkpoint and the plan; ``plan.dropped`` lists the
    input keys that fell outside their assigned region.
    """
    plan = plan_hierarchical(base, dialect, emotion, topology)
    return execute_plan(plan), plan


# -- recipes -----------------------------------------------------------------


@dataclass(frozen=True)
class RecipeInput:
    path: Path
    kind: str
    coefficient: float
    role: Role


@dataclass(frozen=True)
class MergeRecipe:
    base: Path
    strategy: Strategy
    inputs: tuple[RecipeInput, ...]
    output: Path
    topology: ModelTopology | None = None

    def to_json(self) -> dict:
        doc = {
            "base": str(self.base),
            "strategy": self.strategy.value,
            "inputs": [
                {"path": str(i.path), "kind": i.kind, "coefficient": i.coefficient, "role": i.role.value}
                for i in self.inputs
            ],
            "output": str(self.output),
        }
        if self.topology is not None:
            doc["topology"] = self.topology.to_json()
        return doc


def _require(doc: Mapping, key: str, types, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise SchemaError(f"{where}: field {key!r} has the wrong type")
    return value


def _check_fields(doc: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise SchemaError(f"{where}: unknown fields {sorted(unknown)}")


def parse_recipe(doc, base_dir: str | os.PathLike = ".") -> MergeRecipe:
    """Validate a recipe document; relative paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise SchemaError("recipe must be a JSON object")
    _check_fields(doc, {"base", "strategy", "inputs", "topology", "output"}, "recipe")
    root = Path(base_dir)
    base = root / _require(doc, "base", str, "recipe")
    output = root / _require(doc, "output", str, "recipe")
    try:
        strategy = Strategy(_require(doc, "strategy", str, "recipe"))
    except ValueError:
        raise SchemaError("strategy must be 'full' or 'hierarchical'") from None

    raw_inputs = _require(doc, "inputs", list, "recipe")
    if not raw_inputs:
        raise SchemaError("recipe needs at least one input")
    inputs = []
    for i, item in enumerate(raw_inputs):
        where = f"inputs[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(f"{where} must be an object")
        _check_fields(item, {"path", "kind", "coefficient", "role"}, where)
        kind = _require(item, "kind", str, where)
        if kind not in ("task_vector", "lora"):
            raise SchemaError(f"{where}: kind must be 'task_vector' or 'lora'")
        coeff = float(_require(item, "coefficient", (int, float), where))
        if not math.isfinite(coeff):
            raise SchemaError(f"{where}: coefficient must be finite")
        try:
            role = Role(item.get("role", "generic"))
        except ValueError:
            raise SchemaError(f"{where}: role must be dialect, emotion or generic") from None
        inputs.append(RecipeInput(root / _require(item, "path", str, where), kind, coeff, role))

    topology = None
    if "topology" in doc:
        topo = doc["topology"]
        if not isinstance(topo, dict):
            raise SchemaError("topology must be an object")
        _check_fields(topo, {"block_pattern", "n_blocks", "embedding_patterns", "split_index"}, "topology")
        patterns = _require(topo, "embedding_patterns", list, "topology")
        if not all(isinstance(p, str) for p in patterns):
            raise SchemaError("topology: embedding_patterns must be strings")
        split = topo.get("split_index")
        if split is not None and (isinstance(split, bool) or not isinstance(split, int)):
            raise SchemaError("topology: split_index must be an integer")
        topology = ModelTopology(
            n_blocks=_require(topo, "n_blocks", int, "topology"),
            block_pattern=_require(topo, "block_pattern", str, "topology"),
            embedding_patterns=tuple(patterns),
            split_index=split,
        )

    if strategy is Strategy.HIERARCHICAL:
        roles = [i.role for i in inputs]
        if len(inputs) != 2 or roles.count(Role.DIALECT) != 1 or roles.count(Role.EMOTION) != 1:
            raise RoleViolation(
                "hierarchical merge needs exactly one dialect and one emotion input, "
                f"got {[r.value for r in roles]}"
            )
        if topology is None:
            raise SchemaError("hierarchical merge needs a topology")
    return MergeRecipe(base, strategy, tuple(inputs), output, topology)


def load_recipe(path: str | os.PathLike) -> MergeRecipe:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise MissingInput(f"cannot read recipe {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"recipe is not valid JSON: {exc}") from None
    return parse_recipe(doc, path.parent)


def _load(path: Path) -> Checkpoint:
    if not path.is_file():
        raise MissingInput(f"input file not found: {path}")
    return read_checkpoint(path)


def compile_recipe(recipe: MergeRecipe) -> MergePlan:
    """Load every referenced file and resolve the per-key contribution plan."""
    base = _load(recipe.base)
    inputs = []
    for ri in recipe.inputs:
        ckpt = _load(ri.path)
        name = ri.path.name
        if ri.kind == "lora":
            source: Source = LoraAdapter.from_checkpoint(ckpt, name)
        else:
            source = TaskVector.from_checkpoint(ckpt, name)
        inputs.append(MergeInput(source, ri.coefficient, ri.role, name))
    if recipe.strategy is Strategy.FULL:
        return plan_full(base, inputs)
    dialect = next(i for i in inputs if i.role is Role.DIALECT)
    emotion = next(i for i in inputs if i.role is Role.EMOTION)
    return plan_hierarchical(base, dialect, emotion, recipe.topology)
