"""Checkpoint-parameter algebra: task vectors, E-Vectors, LoRA adapters and style merging."""

from .analysis import (
    PerturbationSpec,
    direction_consistency,
    linearity_probe,
    per_layer_stats,
    perturb,
)
from .checkpoint import Checkpoint, read_checkpoint, validate_header, write_checkpoint
from .fixtures import FixtureSpec, gen_base, gen_styled_variant
from .lora import (
    LoraAdapter,
    LoraEntry,
    apply_lora,
    extract_lora,
    materialize_delta,
    rank_targets_by_variation,
)
from .merge import MergeInput, Role, compile_recipe, merge_full, merge_hierarchical
from .taskvector import (
    EVector,
    KeyAlignmentPolicy,
    TaskVector,
    apply_evector,
    build_task_vector,
    combine_linear,
    scale_task_vector,
)
from .tensor import Dtype, Tensor, axpy, cast, elementwise_sub, frobenius_norm, matmul
from .topology import LayerClass, ModelTopology, classify_layer

__version__ = "0.1.0"

__all__ = [
    "apply_evector",
    "apply_lora",
    "axpy",
    "build_task_vector",
    "cast",
    "Checkpoint",
    "classify_layer",
    "combine_linear",
    "compile_recipe",
    "direction_consistency",
    "Dtype",
    "elementwise_sub",
    "EVector",
    "extract_lora",
    "FixtureSpec",
    "frobenius_norm",
    "gen_base",
    "gen_styled_variant",
    "KeyAlignmentPolicy",
    "LayerClass",
    "linearity_probe",
    "LoraAdapter",
    "LoraEntry",
    "materialize_delta",
    "matmul",
    "merge_full",
    "merge_hierarchical",
    "MergeInput",
    "ModelTopology",
    "per_layer_stats",
    "perturb",
    "PerturbationSpec",
    "rank_targets_by_variation",
    "read_checkpoint",
    "Role",
    "scale_task_vector",
    "TaskVector",
    "Tensor",
    "validate_header",
    "write_checkpoint",
]
