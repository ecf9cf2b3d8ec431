"""Gated context features: gating algebra, pyramid geometry, gradient flow."""

import numpy as np
import pytest

import oracles
from partsel import tensor as T
from partsel.layers import conv_params
from partsel.relation import (
    RelationLevelParams,
    build_pyramid,
    make_pyramid_params,
    relation_gate,
)


def _level_params(seed, channels=4):
    return RelationLevelParams(
        w_relation=conv_params("rel.relation", seed, channels, channels, k=1),
        w_trunk=conv_params("rel.trunk", seed, channels, channels, k=1),
        w_residual=conv_params("rel.residual", seed, channels, channels, k=1),
    )


def test_gate_matches_straight_line_oracle(f64):
    rng = np.random.default_rng(42)
    for seed in range(20):
        params = _level_params(seed)
        x = rng.normal(size=(2, 4, 4, 5))
        f, r = relation_gate(T.Tensor(x), params)
        f_ref, r_ref = oracles.relation_gate_naive(x, params)
        assert oracles.rel_err(f.data, f_ref) < 1e-6
        assert oracles.rel_err(r.data, r_ref) < 1e-6


def test_gate_ones_reproduces_trunk_plus_residual_exactly(rng):
    params = _level_params(3)
    x = T.Tensor(rng.normal(size=(1, 4, 6, 6)))
    f, _ = relation_gate(x, params, gate_ones=True)
    t = params.w_trunk.apply(x)
    d = params.w_residual.apply(x)
    want = T.add(t, d)
    assert f.data.tobytes() == want.data.tobytes()


def test_zero_trunk_collapses_to_residual_exactly(rng):
    """With t identically 0, f = 0 * sigmoid(r) + d must equal d bit for bit."""
    params = _level_params(4)
    params.w_trunk.w.data[...] = 0.0
    params.w_trunk.b.data[...] = 0.0
    x = T.Tensor(rng.normal(size=(1, 4, 5, 5)))
    f, _ = relation_gate(x, params)
    d = params.w_residual.apply(x)
    assert f.data.tobytes() == d.data.tobytes()


def test_saturated_gate_is_finite_and_bounded(f64, rng):
    """Relation bias at +-1e3 drives the gate to its asymptotes without overflow."""
    x = T.Tensor(rng.normal(size=(1, 4, 4, 4)))
    for bias, want_gate in ((-1e3, 0.0), (1e3, 1.0)):
        params = _level_params(5)
        params.w_relation.w.data[...] = 0.0
        params.w_relation.b.data[...] = bias
        f, r = relation_gate(x, params)
        assert np.isfinite(f.data).all()
        t = params.w_trunk.apply(x).data
        d = params.w_residual.apply(x).data
        np.testing.assert_allclose(f.data, t * want_gate + d, rtol=0, atol=1e-12)


def test_gate_values_strictly_inside_unit_interval(f64, rng):
    params = _level_params(6)
    x = T.Tensor(rng.normal(size=(2, 4, 3, 3)))
    _, r = relation_gate(x, params)
    gate = T.sigmoid(r).data
    assert (gate > 0.0).all() and (gate < 1.0).all()


def test_branch_convs_are_exactly_homogeneous_for_power_of_two_scale(rng):
    """Zero-bias 1x1 convs commute exactly with scaling by 2 (IEEE po2 scaling)."""
    params = _level_params(7)
    for cp in (params.w_relation, params.w_trunk, params.w_residual):
        cp.b.data[...] = 0.0
    x = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
    for cp in (params.w_relation, params.w_trunk, params.w_residual):
        once = cp.apply(T.Tensor(x)).data
        scaled = cp.apply(T.Tensor(2.0 * x)).data
        assert (scaled == 2.0 * once).all()


def test_all_three_branches_receive_gradients():
    for seed in range(20):
        params = _level_params(seed)
        x = T.Tensor(np.random.default_rng(seed).normal(size=(1, 4, 4, 4)))
        f, _ = relation_gate(x, params)
        T.backward(T.sum(f))
        for cp in (params.w_relation, params.w_trunk, params.w_residual):
            assert cp.w.grad is not None and np.abs(cp.w.grad).sum() > 0.0
            assert cp.b.grad is not None


def test_gate_ones_cuts_the_relation_branch_out_of_the_graph(rng):
    params = _level_params(9)
    x = T.Tensor(rng.normal(size=(1, 4, 4, 4)))
    f, _ = relation_gate(x, params, gate_ones=True)
    T.backward(T.sum(f))
    assert params.w_relation.w.grad is None  # r never reaches the loss
    assert params.w_trunk.w.grad is not None
    assert params.w_residual.w.grad is not None


# ---------------------------------------------------------------------------
# pyramid


def test_pyramid_extents_and_channels_for_64px(rng):
    params = make_pyramid_params(0, 1, (8, 16), (16, 32, 64))
    img = T.Tensor(rng.normal(size=(1, 1, 64, 64)))
    pyr = build_pyramid(img, params)
    shapes = [tuple(f.shape) for f, _ in pyr.levels]
    assert shapes == [(1, 16, 8, 8), (1, 32, 4, 4), (1, 64, 2, 2)]
    assert all(tuple(r.shape) == s for (_, r), s in zip(pyr.levels, shapes))
    assert tuple(pyr.f_global.shape) == (1, 64)


def test_pyramid_batched_input(rng):
    params = make_pyramid_params(0, 1, (8,), (16, 32))
    img = T.Tensor(rng.normal(size=(3, 1, 32, 32)))
    pyr = build_pyramid(img, params)
    assert tuple(pyr.levels[0][0].shape) == (3, 16, 8, 8)
    assert tuple(pyr.f_global.shape) == (3, 32)


def test_pyramid_rejects_indivisible_size(rng):
    params = make_pyramid_params(0, 1, (8, 16), (16, 32, 64))
    with pytest.raises(T.ShapeError, match="divisible"):
        build_pyramid(T.Tensor(rng.normal(size=(1, 1, 60, 64))), params)


def test_global_feature_is_spatial_mean_of_last_level(rng):
    params = make_pyramid_params(1, 1, (8,), (16, 32))
    pyr = build_pyramid(T.Tensor(rng.normal(size=(2, 1, 32, 32))), params)
    want = pyr.levels[-1][0].data.mean(axis=(2, 3))
    assert (pyr.f_global.data == want).all()


def test_pyramid_is_deterministic_for_fixed_seed(rng):
    x = rng.normal(size=(1, 1, 32, 32))
    runs = []
    for _ in range(2):
        params = make_pyramid_params(7, 1, (8,), (16, 32))
        pyr = build_pyramid(T.Tensor(x), params)
        runs.append(pyr.levels[-1][0].data.tobytes())
    assert runs[0] == runs[1]


def test_gate_ones_pyramid_differs_from_gated_pyramid(rng):
    """The ablation flag must actually change the computation."""
    x = rng.normal(size=(1, 1, 32, 32))
    params = make_pyramid_params(3, 1, (8,), (16, 32))
    gated = build_pyramid(T.Tensor(x), params).f_global.data
    plain = build_pyramid(T.Tensor(x), params, gate_ones=True).f_global.data
    assert not np.allclose(gated, plain)
