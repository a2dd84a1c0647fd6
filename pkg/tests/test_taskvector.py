from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DTYPES, random_checkpoint
from stylevec.checkpoint import Checkpoint, dumps, loads
from stylevec.errors import (
    CoefficientOutOfRange,
    DataError,
    DtypeMismatch,
    EmptyIntersection,
    KeyNotInBase,
    KeySetMismatch,
    NonFiniteCoefficient,
    ShapeMismatch,
)
from stylevec.fixtures import FixtureSpec, gen_base, gen_styled_variant
from stylevec.taskvector import (
    APPLIED_KEY,
    DEFAULT_BETA_MAX,
    EVector,
    KeyAlignmentPolicy,
    TaskVector,
    apply_evector,
    build_task_vector,
    combine_linear,
    scale_task_vector,
)
from stylevec.tensor import Dtype, Tensor, ulp_error
from stylevec.topology import LayerClass


def ck(**tensors) -> Checkpoint:
    return Checkpoint({k: Tensor.from_values(v, Dtype.F32) for k, v in tensors.items()})


def perturbed(gen, ckpt: Checkpoint, scale: float = 0.1) -> Checkpoint:
    return Checkpoint(
        {k: Tensor.from_values(t.to_f64() + scale * gen.standard_normal(t.shape), t.dtype) for k, t in ckpt.items()}
    )


# -- build -------------------------------------------------------------------


def test_build_single_key():
    tau = build_task_vector(ck(w=[2.0]), ck(w=[0.5]))
    assert tau["w"].to_f32().tolist() == [1.5]
    assert tau.provenance.alignment is KeyAlignmentPolicy.STRICT


def test_build_identical_is_zero(gen):
    base = random_checkpoint(gen, Dtype.BF16)
    tau = build_task_vector(base, base)
    assert all(not np.any(t.to_f32()) for _, t in tau.items())
    assert list(tau.keys()) == list(base.keys())


def test_build_on_planted_fixture():
    base = gen_base(FixtureSpec(n_blocks=4))
    variant, ledger = gen_styled_variant(base, [LayerClass.EARLY_BLOCK], 1.0, seed=3)
    tau = build_task_vector(variant, base)
    nonzero = {k for k, t in tau.items() if np.any(t.to_f32())}
    assert nonzero == set(ledger.keys())
    assert all(k.startswith(("transformer_blocks.0.", "transformer_blocks.1.")) for k in nonzero)


def test_strict_requires_same_keys():
    with pytest.raises(KeySetMismatch):
        build_task_vector(ck(a=[1.0], b=[1.0]), ck(a=[1.0]))


def test_strict_shape_and_dtype_errors():
    with pytest.raises(ShapeMismatch):
        build_task_vector(ck(w=[1.0, 2.0]), ck(w=[1.0]))
    half = Checkpoint({"w": Tensor.from_values([1.0], Dtype.F16)})
    with pytest.raises(DtypeMismatch):
        build_task_vector(half, ck(w=[1.0]))


def test_intersect_reports_mismatches():
    ft = Checkpoint(
        {
            "a": Tensor.from_values([2.0], Dtype.F32),
            "b": Tensor.from_values([1.0, 1.0], Dtype.F32),
            "c": Tensor.from_values([1.0], Dtype.F16),
            "only_ft": Tensor.from_values([0.0], Dtype.F32),
        }
    )
    pre = Checkpoint(
        {
            "a": Tensor.from_values([1.0], Dtype.F32),
            "b": Tensor.from_values([1.0], Dtype.F32),
            "c": Tensor.from_values([1.0], Dtype.F32),
            "only_pre": Tensor.from_values([0.0], Dtype.F32),
        }
    )
    tau = build_task_vector(ft, pre, KeyAlignmentPolicy.INTERSECT)
    assert list(tau.keys()) == ["a"]
    rep = tau.report
    assert rep.only_in_finetuned == ("only_ft",)
    assert rep.only_in_base == ("only_pre",)
    assert rep.shape_mismatch == ("b",)
    assert rep.dtype_mismatch == ("c",)
    assert not rep.clean


def test_intersect_empty():
    with pytest.raises(EmptyIntersection):
        build_task_vector(ck(a=[1.0]), ck(b=[1.0]), KeyAlignmentPolicy.INTERSECT)


# -- scale -------------------------------------------------------------------


def test_scale_is_lazy():
    tau = build_task_vector(ck(w=[2.0]), ck(w=[0.5]))
    eps = scale_task_vector(tau, 3.0)
    assert eps.coefficient == 3.0
    assert eps.vector is tau


def test_scale_errors():
    tau = build_task_vector(ck(w=[2.0]), ck(w=[0.5]))
    for bad in (math.nan, math.inf):
        with pytest.raises(NonFiniteCoefficient):
            scale_task_vector(tau, bad)
    with pytest.raises(CoefficientOutOfRange):
        scale_task_vector(tau, DEFAULT_BETA_MAX + 1, emotion=True)
    with pytest.raises(CoefficientOutOfRange):
        scale_task_vector(tau, -0.1, emotion=True)
    assert scale_task_vector(tau, DEFAULT_BETA_MAX, emotion=True).coefficient == 3.0
    assert scale_task_vector(tau, 5.0, emotion=True, beta_max=5.0).coefficient == 5.0
    # dialect coefficients are not range-checked
    assert scale_task_vector(tau, 7.5).coefficient == 7.5


# -- apply -------------------------------------------------------------------


def test_apply_worked_example():
    base = ck(w=[1.0])
    tau = TaskVector.from_checkpoint(ck(w=[0.5]))
    out = apply_evector(base, scale_task_vector(tau, 3.0))
    assert out["w"].to_f32().tolist() == [2.5]
    applied = json.loads(out.metadata[APPLIED_KEY])
    assert applied == [{"vector": tau.id, "coefficient": 3.0}]


def test_apply_zero_is_bit_identity(gen):
    base = random_checkpoint(gen, Dtype.F16)
    tau = build_task_vector(perturbed(gen, base), base)
    out = apply_evector(base, scale_task_vector(tau, 0.0))
    assert Checkpoint(out.entries).bit_equal(Checkpoint(base.entries))


def test_apply_passes_through_untouched_keys(gen):
    base = random_checkpoint(gen, Dtype.BF16, 5)
    part = Checkpoint({k: t for k, t in base.items() if k != "layer0.weight"})
    tau = build_task_vector(perturbed(gen, part), part)
    out = apply_evector(base, scale_task_vector(tau, 2.0))
    assert out["layer0.weight"] is base["layer0.weight"]


def test_apply_key_not_in_base():
    tau = TaskVector.from_checkpoint(ck(x=[1.0]))
    with pytest.raises(KeyNotInBase):
        apply_evector(ck(w=[1.0]), scale_task_vector(tau, 1.0))


def test_apply_shape_mismatch_names_key():
    tau = TaskVector.from_checkpoint(ck(w=[1.0, 2.0]))
    with pytest.raises(ShapeMismatch, match="w"):
        apply_evector(ck(w=[1.0]), scale_task_vector(tau, 1.0))


@pytest.mark.parametrize("dtype", DTYPES)
def test_reconstruction_within_one_ulp(gen, dtype):
    for _ in range(5):
        base = random_checkpoint(gen, dtype, 6)
        ft = perturbed(gen, base, 0.3)
        out = apply_evector(base, scale_task_vector(build_task_vector(ft, base), 1.0))
        for k in base.keys():
            scale = np.maximum(np.abs(base[k].to_f64()), np.abs(ft[k].to_f64()))
            assert np.all(ulp_error(out[k], ft[k], scale) <= 1.0)


def test_scaling_composition(gen):
    base = random_checkpoint(gen, Dtype.F32, 6)
    tau = build_task_vector(perturbed(gen, base), base)
    a, b = 1.5, 2.0
    pre = TaskVector.from_checkpoint(
        Checkpoint({k: Tensor.from_values(t.to_f64() * b, t.dtype) for k, t in tau.items()})
    )
    one = apply_evector(base, scale_task_vector(tau, a * b))
    two = apply_evector(base, scale_task_vector(pre, a))
    for k in base.keys():
        scale = np.abs(base[k].to_f64()) + np.abs(a * b * tau[k].to_f64())
        assert np.all(ulp_error(one[k], two[k], scale) <= 2.0)


# -- combine -----------------------------------------------------------------


def test_combine_single_unit_term_is_identity(gen):
    base = random_checkpoint(gen, Dtype.BF16)
    tau = build_task_vector(perturbed(gen, base), base)
    out = combine_linear([EVector(tau, 1.0)])
    assert out.delta.bit_equal(tau.delta)


def test_combine_cancellation(gen):
    base = random_checkpoint(gen, Dtype.F32)
    tau = build_task_vector(perturbed(gen, base), base)
    out = combine_linear([EVector(tau, 1.0), EVector(tau, -1.0)])
    assert all(not np.any(t.to_f32()) for _, t in out.items())


def test_combine_matches_scalar_oracle(gen):
    base = random_checkpoint(gen, Dtype.F32, 5)
    t1 = build_task_vector(perturbed(gen, base), base)
    t2 = build_task_vector(perturbed(gen, base), base)
    out = combine_linear([EVector(t1, 3.0), EVector(t2, 0.7)])
    for k in base.keys():
        exact = 3.0 * t1[k].to_f64() + 0.7 * t2[k].to_f64()
        scale = np.abs(3.0 * t1[k].to_f64()) + np.abs(0.7 * t2[k].to_f64())
        assert np.all(ulp_error(out[k], Tensor.from_values(exact, Dtype.F32), scale) <= 1.0)


def test_combine_union_treats_missing_as_zero():
    t1 = TaskVector.from_checkpoint(ck(a=[1.0]))
    t2 = TaskVector.from_checkpoint(ck(b=[2.0]))
    out = combine_linear([EVector(t1, 2.0), EVector(t2, 3.0)])
    assert out["a"].to_f32().tolist() == [2.0]
    assert out["b"].to_f32().tolist() == [6.0]


def test_combine_shape_mismatch():
    t1 = TaskVector.from_checkpoint(ck(a=[1.0]))
    t2 = TaskVector.from_checkpoint(ck(a=[1.0, 2.0]))
    with pytest.raises(ShapeMismatch):
        combine_linear([EVector(t1, 1.0), EVector(t2, 1.0)])


# -- serialization -------------------------------------------------------------


def test_task_vector_file_metadata():
    tau = build_task_vector(ck(w=[2.0]), ck(w=[0.5]), base_id="pre", finetuned_id="ft")
    meta = tau.to_checkpoint().metadata
    assert meta["stylevec.kind"] == "task_vector"
    assert meta["stylevec.base_id"] == "pre"
    assert meta["stylevec.finetuned_id"] == "ft"
    assert meta["stylevec.alignment"] == "strict"
    back = TaskVector.from_checkpoint(loads(dumps(tau.to_checkpoint())))
    assert back.provenance == tau.provenance
    assert back.delta.bit_equal(tau.delta)


def test_evector_file_round_trip():
    tau = build_task_vector(ck(w=[2.0]), ck(w=[0.5]))
    eps = scale_task_vector(tau, 1.12)
    back = EVector.from_checkpoint(loads(dumps(eps.to_checkpoint())))
    assert back.coefficient == 1.12
    assert EVector.from_checkpoint(tau.to_checkpoint()) is None


def test_wrong_kind_rejected():
    adapter_like = Checkpoint({"w": Tensor.zeros((1,))}, {"stylevec.kind": "lora_adapter"})
    with pytest.raises(DataError):
        TaskVector.from_checkpoint(adapter_like)


# -- properties ----------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(DTYPES))
def test_strict_key_coverage(seed, dtype):
    g = np.random.default_rng(seed)
    base = random_checkpoint(g, dtype, int(g.integers(1, 6)))
    tau = build_task_vector(perturbed(g, base), base)
    assert list(tau.keys()) == list(base.keys())
    for k in base.keys():
        assert tau[k].shape == base[k].shape and tau[k].dtype is base[k].dtype


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=4))
def test_result_independent_of_thread_count(seed, coeffs):
    from stylevec._parallel import threads

    g = np.random.default_rng(seed)
    base = random_checkpoint(g, Dtype.BF16, 5)
    terms = [EVector(build_task_vector(perturbed(g, base), base), c) for c in coeffs]
    with threads(1):
        one = combine_linear(terms)
    with threads(4):
        four = combine_linear(terms)
    assert one.delta.bit_equal(four.delta)
