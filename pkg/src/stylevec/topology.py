"""Layer classification for hierarchical routing.

Keys are split into the text-embedding layer, the early and late halves of
the transformer blocks, and everything else. With ``n_blocks`` blocks the
early half is ``[0, n_blocks // 2)``; an odd middle block goes to the late
half. ``split_index`` overrides the boundary.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable

from .errors import BlockIndexOutOfRange, SchemaError, TopologyMismatch

DEFAULT_BLOCK_PATTERN = "transformer_blocks.{i}."
DEFAULT_EMBEDDING_PATTERNS = ("text_embed.",)


class LayerClass(enum.Enum):
    TEXT_EMBEDDING = "text_embedding"
    EARLY_BLOCK = "early_block"
    LATE_BLOCK = "late_block"
    OTHER = "other"


DIALECT_CLASSES = frozenset({LayerClass.TEXT_EMBEDDING, LayerClass.EARLY_BLOCK})
EMOTION_CLASSES = frozenset({LayerClass.LATE_BLOCK})


@dataclass(frozen=True)
class ModelTopology:
    n_blocks: int
    block_pattern: str = DEFAULT_BLOCK_PATTERN
    embedding_patterns: tuple[str, ...] = DEFAULT_EMBEDDING_PATTERNS
    split_index: int | None = None

    def __post_init__(self) -> None:
        if isinstance(self.n_blocks, bool) or not isinstance(self.n_blocks, int) or self.n_blocks < 1:
            raise SchemaError(f"n_blocks must be a positive integer, got {self.n_blocks!r}")
        if self.block_pattern.count("{i}") != 1:
            raise SchemaError("block_pattern must contain exactly one '{i}' placeholder")
        object.__setattr__(self, "embedding_patterns", tuple(self.embedding_patterns))
        if any(not p for p in self.embedding_patterns):
            raise SchemaError("embedding patterns must be non-empty")
        if self.split_index is not None and not 0 <= self.split_index <= self.n_blocks:
            raise SchemaError(f"split_index {self.split_index} outside [0, {self.n_blocks}]")
        head, tail = self.block_pattern.split("{i}")
        object.__setattr__(self, "_regex", re.compile(re.escape(head) + r"(\d+)" + re.escape(tail)))

    @property
    def boundary(self) -> int:
        return self.n_blocks // 2 if self.split_index is None else self.split_index

    def block_index(self, key: str) -> int | None:
        m = self._regex.match(key)
        return int(m.group(1)) if m else None

    def to_json(self) -> dict:
        doc = {
            "block_pattern": self.block_pattern,
            "n_blocks": self.n_blocks,
            "embedding_patterns": list(self.embedding_patterns),
        }
        if self.split_index is not None:
            doc["split_index"] = self.split_index
        return doc


def classify_layer(key: str, topology: ModelTopology) -> LayerClass:
    embedding = any(key.startswith(p) for p in topology.embedding_patterns)
    idx = topology.block_index(key)
    if embedding and idx is not None:
        raise TopologyMismatch(f"{key!r} matches both an embedding pattern and the block pattern")
    if embedding:
        return LayerClass.TEXT_EMBEDDING
    if idx is None:
        return LayerClass.OTHER
    if idx >= topology.n_blocks:
        raise BlockIndexOutOfRange(f"{key!r}: block {idx} >= n_blocks {topology.n_blocks}")
    return LayerClass.EARLY_BLOCK if idx < topology.boundary else LayerClass.LATE_BLOCK


def partition(keys: Iterable[str], topology: ModelTopology) -> dict[LayerClass, list[str]]:
    groups: dict[LayerClass, list[str]] = {c: [] for c in LayerClass}
    for k in sorted(keys):
        groups[classify_layer(k, topology)].append(k)
    return groups
