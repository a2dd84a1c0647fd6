"""``stylevec`` command line.

Exit codes: 0 success, 1 bad arguments or recipe, 2 malformed or
mismatched data, 3 filesystem errors. Diagnostics go to stderr; with
``--json`` stdout carries exactly one JSON document.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import _parallel
from .analysis import (
    PerturbationSpec,
    direction_consistency,
    linearity_probe,
    per_layer_stats,
    perturb,
)
from .checkpoint import Checkpoint, read_checkpoint, read_header, write_checkpoint
from .errors import (
    CoefficientOutOfRange,
    NonFiniteCoefficient,
    StylevecError,
    StylevecIOError,
    ValidationError,
)
from .fixtures import FixtureSpec, default_topology, gen_base, gen_styled_variant
from .lora import (
    LoraAdapter,
    adapter_deltas,
    apply_lora,
    extract_lora,
    is_lora_eligible,
    lora_scale,
    matrix_shape,
    rank_targets_by_variation,
)
from .merge import compile_recipe, execute_plan, load_recipe
from .taskvector import (
    DEFAULT_BETA_MAX,
    EVector,
    KIND_KEY,
    KeyAlignmentPolicy,
    TaskVector,
    apply_evector,
    build_task_vector,
    scale_task_vector,
)
from .tensor import Dtype
from .topology import DEFAULT_BLOCK_PATTERN, DEFAULT_EMBEDDING_PATTERNS, LayerClass, ModelTopology

SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ValidationError(f"{self.prog}: {message}")


def _load(path: str) -> Checkpoint:
    return read_checkpoint(path)


def _write(ckpt: Checkpoint, path: str, args) -> dict:
    if not args.dry_run:
        write_checkpoint(ckpt, path)
    return {"path": path, "written": not args.dry_run, "tensors": len(ckpt), "params": ckpt.n_params}


def _topology(args, required: bool = False) -> ModelTopology | None:
    if args.n_blocks is None:
        if required:
            raise ValidationError("--n-blocks is required here")
        return None
    return ModelTopology(
        n_blocks=args.n_blocks,
        block_pattern=args.block_pattern,
        embedding_patterns=tuple(args.embedding_pattern or DEFAULT_EMBEDDING_PATTERNS),
        split_index=args.split_index,
    )


def _coefficient(args) -> tuple[float | None, bool]:
    """(coefficient, emotion_mode) from --alpha/--beta."""
    if args.beta is not None:
        return args.beta, True
    return args.alpha, False


# -- subcommands -------------------------------------------------------------


def cmd_diff(args) -> dict:
    policy = KeyAlignmentPolicy(args.policy)
    tau = build_task_vector(
        _load(args.finetuned),
        _load(args.base),
        policy,
        base_id=Path(args.base).name,
        finetuned_id=Path(args.finetuned).name,
    )
    return {"output": _write(tau.to_checkpoint(), args.out, args), "alignment": tau.report.to_json()}


def _load_vector(path: str, coeff: float | None, emotion: bool, beta_max: float) -> EVector:
    ckpt = _load(path)
    name = Path(path).name
    stored = EVector.from_checkpoint(ckpt, name)
    tau = stored.vector if stored else TaskVector.from_checkpoint(ckpt, name)
    if coeff is None:
        if stored is None:
            raise ValidationError("give --alpha or --beta (the vector file stores no coefficient)")
        coeff = stored.coefficient
    return scale_task_vector(tau, coeff, emotion=emotion, beta_max=beta_max)


def cmd_apply(args) -> dict:
    coeff, emotion = _coefficient(args)
    eps = _load_vector(args.vector, coeff, emotion, args.beta_max)
    out = apply_evector(_load(args.base), eps)
    return {"coefficient": eps.coefficient, "output": _write(out, args.out, args)}


def cmd_scale(args) -> dict:
    coeff, emotion = _coefficient(args)
    if coeff is None:
        raise ValidationError("scale needs --alpha or --beta")
    eps = _load_vector(args.vector, coeff, emotion, args.beta_max)
    return {"coefficient": eps.coefficient, "output": _write(eps.to_checkpoint(), args.out, args)}


def cmd_merge(args) -> dict:
    recipe = load_recipe(args.recipe)
    plan = compile_recipe(recipe)
    doc = {"recipe": recipe.to_json(), "plan": plan.to_json()}
    out_path = args.out or str(recipe.output)
    if args.dry_run:
        doc["output"] = {"path": out_path, "written": False}
        return doc
    merged = execute_plan(plan)
    doc["output"] = _write(merged, out_path, args)
    doc.pop("plan")
    doc["touched_keys"] = len(plan.touched_keys)
    doc["dropped"] = plan.to_json()["dropped"]
    return doc


def cmd_lora_extract(args) -> dict:
    if args.top is not None and args.base is None:
        raise ValidationError("--top needs --base to rank variations")
    tau = TaskVector.from_checkpoint(_load(args.vector), Path(args.vector).name)
    doc: dict = {}
    if args.targets:
        targets = args.targets
    else:
        ranking = rank_targets_by_variation(tau, _load(args.base))
        eligible = [
            k
            for k, _ in ranking
            if is_lora_eligible(tau[k].shape) and min(matrix_shape(tau[k].shape)) >= args.rank
        ]
        targets = eligible[: args.top]
        doc["ranking"] = [{"key": k, "relative_change": r} for k, r in ranking]
    adapter = extract_lora(tau, args.rank, targets)
    doc["targets"] = list(adapter.entries)
    doc["rank"] = args.rank
    doc["output"] = _write(adapter.to_checkpoint(), args.out, args)
    return doc


def cmd_lora_apply(args) -> dict:
    coeff, emotion = _coefficient(args)
    if coeff is None:
        coeff = 1.0
    if not math.isfinite(coeff):
        raise NonFiniteCoefficient(f"coefficient must be finite, got {coeff!r}")
    if emotion and not 0.0 <= coeff <= args.beta_max:
        raise CoefficientOutOfRange(f"strength {coeff} outside [0, {args.beta_max}]")
    adapter = LoraAdapter.from_checkpoint(_load(args.adapter), Path(args.adapter).name)
    out = apply_lora(_load(args.base), adapter, coeff, name=Path(args.adapter).name)
    return {"coefficient": coeff, "scale": lora_scale(coeff), "output": _write(out, args.out, args)}


def cmd_inspect(args) -> dict:
    report = read_header(args.file)
    doc = {"file": args.file, "header": report.to_json()}
    topology = _topology(args)
    if args.base is not None:
        ckpt = _load(args.file)
        kind = ckpt.metadata.get(KIND_KEY, "checkpoint")
        base = _load(args.base)
        if kind == "lora_adapter":
            adapter = LoraAdapter.from_checkpoint(ckpt, Path(args.file).name)
            tau = adapter_deltas(adapter, base, Path(args.file).name)
        elif kind in ("task_vector", "evector"):
            tau = TaskVector.from_checkpoint(ckpt, Path(args.file).name)
        else:
            tau = build_task_vector(ckpt, base, KeyAlignmentPolicy.INTERSECT)
        doc["stats"] = per_layer_stats(tau, base, topology).to_json()
    return doc


def cmd_cosine(args) -> dict:
    if len(args.vectors) < 2:
        raise ValidationError("cosine needs at least two vectors")
    vectors = [TaskVector.from_checkpoint(_load(p), Path(p).name) for p in args.vectors]
    report = direction_consistency(vectors, [Path(p).name for p in args.vectors], per_layer=args.per_layer)
    return report.to_json()


def cmd_perturb(args) -> dict:
    if args.keys:
        spec = PerturbationSpec(args.sigma, args.seed, target_keys=tuple(args.keys))
    else:
        spec = PerturbationSpec(
            args.sigma, args.seed, layer_class=LayerClass(args.layer_class), topology=_topology(args, True)
        )
    ckpt = _load(getattr(args, "in"))
    targets = spec.resolve(ckpt)
    out = perturb(ckpt, spec)
    return {"targets": targets, "sigma": args.sigma, "seed": args.seed, "output": _write(out, args.out, args)}


def cmd_linearity(args) -> dict:
    trajectory = [_load(p) for p in args.trajectory]
    report = linearity_probe(_load(args.base), trajectory)
    doc = report.to_json()
    for step, path in zip(doc["steps"], args.trajectory):
        step["file"] = Path(path).name
    return doc


def cmd_gen_fixture(args) -> dict:
    if (args.target or args.target_keys) and not args.variant_out:
        raise ValidationError("--target/--target-keys need --variant-out")
    spec = FixtureSpec(args.n_blocks, args.embed, args.hidden, args.heads, Dtype.parse(args.dtype), args.seed)
    base = gen_base(spec)
    doc = {"spec": spec.to_json(), "output": _write(base, args.out, args)}
    if args.variant_out:
        if args.target_keys:
            target = args.target_keys
        else:
            target = [LayerClass(c) for c in (args.target or "early_block").split(",")]
        topology = default_topology(max(spec.n_blocks, 1))
        variant, ledger = gen_styled_variant(
            base, target, args.magnitude, args.variant_seed, topology=topology, label=args.label
        )
        doc["variant"] = _write(variant, args.variant_out, args)
        doc["planted_keys"] = list(ledger.keys())
    return doc


# -- parser ------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress human-readable output")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="emit one JSON document on stdout")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="per-tensor worker threads")
    return p


def _topology_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--block-pattern", default=DEFAULT_BLOCK_PATTERN)
    p.add_argument("--embedding-pattern", action="append", help="repeatable; default text_embed.")
    p.add_argument("--split-index", type=int)


def _coefficient_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float, help="enhancement coefficient")
    g.add_argument("--beta", type=float, help="strength coefficient, checked against --beta-max")
    p.add_argument("--beta-max", type=float, default=DEFAULT_BETA_MAX)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="stylevec", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, fn: Callable, help: str, writes: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        if writes:
            p.add_argument("--dry-run", action="store_true", help="compute but write nothing")
        else:
            p.set_defaults(dry_run=False)
        return p

    p = add("diff", cmd_diff, "task vector = finetuned - base")
    p.add_argument("--finetuned", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=[m.value for m in KeyAlignmentPolicy], default="strict")

    p = add("apply", cmd_apply, "base + coefficient * vector")
    p.add_argument("--base", required=True)
    p.add_argument("--vector", required=True)
    p.add_argument("--out", required=True)
    _coefficient_flags(p)

    p = add("scale", cmd_scale, "store a vector with its coefficient (E-Vector file)")
    p.add_argument("--vector", required=True)
    p.add_argument("--out", required=True)
    _coefficient_flags(p)

    p = add("merge", cmd_merge, "run a full or hierarchical merge recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", help="override the recipe's output path")

    p = add("lora-extract", cmd_lora_extract, "truncated-SVD adapter from a task vector")
    p.add_argument("--vector", required=True)
    p.add_argument("--rank", type=int, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--targets", nargs="+")
    g.add_argument("--top", type=int, help="the N keys with the largest relative change")
    p.add_argument("--base", help="base checkpoint, needed for --top")
    p.add_argument("--out", required=True)

    p = add("lora-apply", cmd_lora_apply, "base + coefficient^2 * B @ A (coefficient defaults to 1)")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    _coefficient_flags(p)

    p = add("inspect", cmd_inspect, "header report and per-layer statistics", writes=False)
    p.add_argument("file")
    p.add_argument("--base", help="base checkpoint for per-layer variation")
    _topology_flags(p)

    p = add("cosine", cmd_cosine, "pairwise cosine between task vectors", writes=False)
    p.add_argument("vectors", nargs="+")
    p.add_argument("--per-layer", action="store_true")

    p = add("perturb", cmd_perturb, "seeded Gaussian noise on selected tensors")
    p.add_argument("--in", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--keys", nargs="+")
    g.add_argument("--layer-class", choices=[c.value for c in LayerClass])
    p.add_argument("--out", required=True)
    _topology_flags(p)

    p = add("linearity", cmd_linearity, "deviation of a trajectory from a straight line", writes=False)
    p.add_argument("--base", required=True)
    p.add_argument("--trajectory", nargs="+", required=True)

    p = add("gen-fixture", cmd_gen_fixture, "toy DiT checkpoint, optionally with a styled variant")
    p.add_argument("--out", required=True)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--embed", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dtype", choices=[d.value for d in Dtype], default="F32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant-out")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--target", help="comma-separated layer classes")
    g.add_argument("--target-keys", nargs="+")
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--variant-seed", type=int, default=1)
    p.add_argument("--label", default="style")
    return parser


# -- rendering ---------------------------------------------------------------


def _render(doc: dict, indent: int = 0) -> list[str]:
    pad = "  " * indent
    lines = []
    for key, value in doc.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.extend(_render(value, indent + 1))
        elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            cols = list(dict.fromkeys(c for row in value for c in row))
            lines.append(f"{pad}{key}:")
            lines.append(pad + "  " + "  ".join(cols))
            for row in value:
                lines.append(pad + "  " + "  ".join(_cell(row.get(c)) for c in cols))
        else:
            lines.append(f"{pad}{key}: {_cell(value)}")
    return lines


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_cell(x) for x in v) + "]"
    return "-" if v is None else str(v)


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        n = getattr(args, "threads", None)
        n = _parallel.default_threads() if n is None else n
        if n < 1:
            raise ValidationError("--threads must be positive")
        with _parallel.threads(n):
            doc = args.func(args)
    except StylevecError as exc:
        print(f"stylevec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stylevec: {StylevecIOError.__name__}: {exc}", file=sys.stderr)
        return StylevecIOError.exit_code
    except ValueError as exc:
        print(f"stylevec: ValidationError: {exc}", file=sys.stderr)
        return ValidationError.exit_code

    doc = {"schema_version": SCHEMA_VERSION, "command": args.command, **doc}
    if getattr(args, "json", False):
        print(json.dumps(doc, sort_keys=True))
    elif not getattr(args, "quiet", False):
        print("\n".join(_render(doc)))
    return 0


def main() -> None:
    sys.exit(run())
