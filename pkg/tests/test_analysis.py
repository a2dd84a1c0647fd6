from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylevec.analysis import (
    PerturbationSpec,
    direction_consistency,
    gaussian_noise,
    linearity_probe,
    per_layer_stats,
    perturb,
)
from stylevec.checkpoint import Checkpoint, dumps
from stylevec.errors import DegenerateTrajectory, EmptyIntersection, KeyNotFound, KeyNotInBase, KeySetMismatch
from stylevec.fixtures import FixtureSpec, default_topology, gen_base, gen_styled_variant
from stylevec.taskvector import TaskVector, build_task_vector
from stylevec.tensor import Dtype, Tensor
from stylevec.topology import LayerClass


def vec(scale: float = 1.0, **tensors) -> TaskVector:
    return TaskVector.from_checkpoint(
        Checkpoint({k: Tensor.from_values(np.asarray(v) * scale, Dtype.F32) for k, v in tensors.items()})
    )


@pytest.fixture
def base4():
    return gen_base(FixtureSpec(n_blocks=4))


# -- directional consistency ---------------------------------------------------


def test_cosine_self_and_negation(gen):
    a, b = gen.standard_normal((4, 3)), gen.standard_normal(5)
    tau = vec(x=a, y=b)
    neg = vec(-1.0, x=a, y=b)
    rep = direction_consistency([tau, tau, neg], ["t", "t2", "neg"])
    c = rep.cosine
    assert c[0][1] == pytest.approx(1.0, abs=1e-6)
    assert c[0][2] == pytest.approx(-1.0, abs=1e-6)
    assert all(c[i][i] == pytest.approx(1.0, abs=1e-6) for i in range(3))
    assert rep.keys_compared == 2


def test_cosine_disjoint_support(base4):
    d, _ = gen_styled_variant(base4, [LayerClass.EARLY_BLOCK], 1.0, seed=1)
    e, _ = gen_styled_variant(base4, [LayerClass.LATE_BLOCK], 1.0, seed=2)
    rep = direction_consistency([build_task_vector(d, base4), build_task_vector(e, base4)])
    assert rep.cosine[0][1] == pytest.approx(0.0, abs=1e-6)


def test_cosine_scalar_oracle(gen):
    xs = [gen.standard_normal(7) for _ in range(3)]
    vs = [vec(w=x[:4], v=x[4:]) for x in xs]
    rep = direction_consistency(vs)
    for i in range(3):
        for j in range(3):
            u = np.concatenate([vs[i]["v"].to_f64(), vs[i]["w"].to_f64()])
            w = np.concatenate([vs[j]["v"].to_f64(), vs[j]["w"].to_f64()])
            want = math.fsum(u * w) / math.sqrt(math.fsum(u * u) * math.fsum(w * w))
            assert rep.cosine[i][j] == pytest.approx(want, abs=1e-12)


def test_zero_vector_flagged():
    rep = direction_consistency([vec(w=[1.0, 2.0]), vec(w=[0.0, 0.0])], ["a", "zero"])
    assert rep.undefined == ["zero"]
    assert rep.cosine[0][1] is None and rep.cosine[1][1] is None
    assert rep.cosine[0][0] == 1.0


def test_only_shared_keys_compared():
    rep = direction_consistency([vec(a=[1.0], b=[5.0]), vec(a=[2.0], c=[-3.0])])
    assert rep.keys_compared == 1 and rep.cosine[0][1] == 1.0
    with pytest.raises(EmptyIntersection):
        direction_consistency([vec(a=[1.0]), vec(b=[1.0])])


def test_per_layer_cosines():
    rep = direction_consistency([vec(a=[1.0, 0.0], b=[1.0]), vec(a=[0.0, 1.0], b=[2.0])], per_layer=True)
    assert rep.per_layer["a"][0][1] == 0.0
    assert rep.per_layer["b"][0][1] == 1.0
    assert "per_layer" in rep.to_json()


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_cosine_matrix_properties(seed, m):
    g = np.random.default_rng(seed)
    vs = [vec(w=g.standard_normal(6), v=g.standard_normal((2, 2))) for _ in range(m)]
    c = np.array(direction_consistency(vs).cosine, dtype=float)
    assert np.allclose(c, c.T, atol=0)
    assert np.allclose(np.diag(c), 1.0, atol=1e-6)
    assert np.all(np.abs(c) <= 1.0)


# -- perturbation --------------------------------------------------------------


def block_spec(sigma=1e-3, seed=7, block=1):
    return PerturbationSpec(sigma, seed, layer_class=None, target_keys=tuple(
        k for k in gen_base(FixtureSpec(n_blocks=4)).keys() if k.startswith(f"transformer_blocks.{block}.")
    ))


def test_sigma_zero_identity(base4):
    out = perturb(base4, PerturbationSpec(0.0, 1, target_keys=("text_embed.weight",)))
    assert out.bit_equal(base4)


def test_perturb_deterministic_and_targeted(base4):
    spec = block_spec()
    a, b = perturb(base4, spec), perturb(base4, spec)
    assert dumps(a) == dumps(b)
    changed = {k for k in base4.keys() if not a[k].bit_equal(base4[k])}
    assert changed == set(spec.target_keys)


def test_perturb_seeds_differ(base4):
    a = perturb(base4, block_spec(seed=1))
    b = perturb(base4, block_spec(seed=2))
    diff = sum(int(np.count_nonzero(a[k].to_f32() != b[k].to_f32())) for k in base4.keys())
    assert diff > 0
    assert sum(a[k].numel for k in block_spec().target_keys) >= 1000


def test_perturb_layer_class_selector(base4):
    spec = PerturbationSpec(1e-3, 3, layer_class=LayerClass.LATE_BLOCK, topology=default_topology(4))
    out = perturb(base4, spec)
    changed = {k for k in base4.keys() if not out[k].bit_equal(base4[k])}
    assert changed == {k for k in base4.keys() if k.startswith(("transformer_blocks.2.", "transformer_blocks.3."))}


def test_perturb_unknown_key(base4):
    with pytest.raises(KeyNotFound):
        perturb(base4, PerturbationSpec(1e-3, 1, target_keys=("nope",)))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(sigma=-1.0, seed=0, target_keys=("a",)),
        dict(sigma=math.nan, seed=0, target_keys=("a",)),
        dict(sigma=1.0, seed=0),
        dict(sigma=1.0, seed=0, layer_class=LayerClass.OTHER),
    ],
)
def test_perturbation_spec_validation(kwargs):
    with pytest.raises(ValueError):
        PerturbationSpec(**kwargs)


def test_noise_statistics():
    n = 100_000
    sigma = 1e-3
    x = gaussian_noise(42, "transformer_blocks.1.ff.w1.weight", (n,), sigma)
    assert abs(x.mean()) < 4 * sigma / math.sqrt(n)
    assert abs(x.std() / sigma - 1.0) < 0.02


def test_applied_noise_is_the_documented_noise(base4):
    key = "transformer_blocks.0.attn.to_q.weight"
    out = perturb(base4, PerturbationSpec(1e-3, 9, target_keys=(key,)))
    noise = gaussian_noise(9, key, base4[key].shape, 1e-3).astype(np.float32)
    want = (base4[key].to_f32() + noise).astype(np.float32)
    assert out[key].to_f32().tobytes() == want.tobytes()


# -- per-layer stats -----------------------------------------------------------


def test_stats_zero_vector(base4):
    rep = per_layer_stats(build_task_vector(base4, base4), base4)
    assert all(r["abs_norm"] == 0.0 and r["rel_norm"] == 0.0 for r in rep.rows)


def test_stats_planted_norms(base4):
    variant, ledger = gen_styled_variant(base4, [LayerClass.EARLY_BLOCK], 0.5, seed=4)
    rep = per_layer_stats(build_task_vector(variant, base4), base4, default_topology(4))
    rows = {r["key"]: r for r in rep.rows}
    for k in ledger.keys():
        assert rows[k]["abs_norm"] == pytest.approx(0.5, rel=1e-6)
    assert sum(g["numel"] for g in rep.groups.values()) == base4.n_params == rep.total_numel
    assert rep.groups["early_block"]["abs_norm"] == pytest.approx(0.5 * math.sqrt(14), rel=1e-6)


def test_stats_key_not_in_base(base4):
    with pytest.raises(KeyNotInBase):
        per_layer_stats(vec(nope=[1.0]), base4)


# -- linearity -----------------------------------------------------------------


def straight(base: Checkpoint, tau: dict[str, np.ndarray], ts) -> list[Checkpoint]:
    return [
        Checkpoint({k: Tensor.from_values(base[k].to_f64() + t * tau[k], Dtype.F32) for k in base.keys()})
        for t in ts
    ]


def test_linear_trajectory(base4, gen):
    tau = {k: gen.standard_normal(t.shape) * 0.1 for k, t in base4.items()}
    rep = linearity_probe(base4, straight(base4, tau, [0.25, 0.5, 1.0]))
    assert all(s["residual"] < 1e-5 for s in rep.steps)
    assert all(s["cosine"] > 1 - 1e-6 for s in rep.steps)


def test_detour_detected(base4, gen):
    tau = {k: gen.standard_normal(t.shape) * 0.1 for k, t in base4.items()}
    traj = straight(base4, tau, [0.25, 0.5, 1.0])
    # move the middle step along a direction orthogonal to tau
    flat = np.concatenate([tau[k].ravel() for k in base4.keys()])
    other = gen.standard_normal(flat.size)
    other -= (other @ flat) / (flat @ flat) * flat
    other *= np.linalg.norm(flat) / np.linalg.norm(other)
    offsets = np.cumsum([0] + [base4[k].numel for k in base4.keys()])
    detour = {k: other[offsets[i]:offsets[i + 1]].reshape(base4[k].shape) for i, k in enumerate(base4.keys())}
    traj[1] = Checkpoint({k: Tensor.from_values(traj[1][k].to_f64() + 0.5 * detour[k], Dtype.F32) for k in base4.keys()})
    rep = linearity_probe(base4, traj)
    assert rep.steps[1]["residual"] > 0.1
    assert rep.steps[0]["residual"] < 1e-5


def test_random_trajectory_matches_scalar_oracle(base4, gen):
    traj = [
        Checkpoint({k: Tensor.from_values(t.to_f64() + gen.standard_normal(t.shape) * 0.05 * (i + 1), Dtype.F32) for k, t in base4.items()})
        for i in range(4)
    ]
    rep = linearity_probe(base4, traj)
    b = np.concatenate([base4[k].to_f64().ravel() for k in base4.keys()])
    f = np.concatenate([traj[-1][k].to_f64().ravel() for k in base4.keys()]) - b
    for step, ck in zip(rep.steps, traj):
        s = np.concatenate([ck[k].to_f64().ravel() for k in base4.keys()]) - b
        ss, sf, ff = math.fsum(s * s), math.fsum(s * f), math.fsum(f * f)
        cos = sf / math.sqrt(ss * ff)
        resid = math.sqrt(max(ss - sf * sf / ff, 0.0)) / math.sqrt(ss)
        assert step["cosine"] == pytest.approx(cos, abs=1e-6)
        assert step["residual"] == pytest.approx(resid, abs=1e-6)


def test_linearity_scale_invariance(base4, gen):
    traj = [
        Checkpoint({k: Tensor.from_values(t.to_f64() + gen.standard_normal(t.shape) * 0.05 * (i + 1), Dtype.F32) for k, t in base4.items()})
        for i in range(3)
    ]
    scaled = [
        Checkpoint({k: Tensor.from_values(base4[k].to_f64() + 4.0 * (c[k].to_f64() - base4[k].to_f64()), Dtype.F32) for k in base4.keys()})
        for c in traj
    ]
    r1, r2 = linearity_probe(base4, traj), linearity_probe(base4, scaled)
    for a, b in zip(r1.steps, r2.steps):
        assert a["cosine"] == pytest.approx(b["cosine"], abs=1e-6)
        assert a["residual"] == pytest.approx(b["residual"], abs=1e-6)


def test_linearity_errors(base4):
    with pytest.raises(ValueError):
        linearity_probe(base4, [base4, base4])
    with pytest.raises(DegenerateTrajectory):
        linearity_probe(base4, [base4, base4, base4])
    short = Checkpoint({"text_embed.weight": base4["text_embed.weight"]})
    with pytest.raises(KeySetMismatch):
        linearity_probe(base4, [base4, base4, short])
