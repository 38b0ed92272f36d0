import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import toy_txf
from txaccel.dynaprop import (EmptyCurve, EmptyInput, MaskedTile, MaskShapeMismatch, PruneThresholds,
                              SparsityCurve, default_curves, effectual_macs, half_normal_curve, lookup_tau,
                              memory_footprint, pack_zero_free, profile_curve, prune_masked, prune_tile,
                              prune_to_ratio, pruned_count, pruning_ratio, role_ratios, tensor_roles, tile_ratios,
                              unpack, zero_free_matmul)
from txaccel.graph import build_graph, evaluate, init_params

N = 1000
floats = st.floats(-10, 10, allow_nan=False, width=64)
tiles = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=8), elements=floats)
taus = st.floats(0, 12, allow_nan=False)


@settings(max_examples=N, deadline=None)
@given(tiles, taus, taus)
def test_ratio_monotone_in_tau(t, a, b):
    lo, hi = sorted((a, b))
    assert pruning_ratio(prune_tile(t, lo)) <= pruning_ratio(prune_tile(t, hi))


@settings(max_examples=N, deadline=None)
@given(tiles, taus)
def test_prune_idempotent(t, tau):
    once = prune_tile(t, tau)
    np.testing.assert_array_equal(prune_tile(once, tau), once)


@settings(max_examples=N, deadline=None)
@given(tiles, taus)
def test_prune_keeps_large_values(t, tau):
    p = prune_tile(t, tau)
    keep = np.abs(t) >= tau
    np.testing.assert_array_equal(p[keep], t[keep])
    assert not np.any(p[~keep])


@settings(max_examples=N, deadline=None)
@given(tiles, taus)
def test_pack_round_trip(t, tau):
    mt = prune_masked(t, tau)
    np.testing.assert_array_equal(unpack(mt), prune_tile(t, tau))
    assert mt.nnz + int(mt.mask.sum()) == t.size
    assert mt.packed_bytes(2) == 2 * mt.nnz + math.ceil(t.size / 8)
    assert pruning_ratio(mt) == pruning_ratio(prune_tile(t, tau))


@settings(max_examples=N, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1), taus, taus)
def test_zero_free_matmul_equivalence(m, k, n, seed, ta, tb):
    rng = np.random.default_rng(seed)
    a = prune_masked(rng.normal(size=(m, k)) * 3, ta / 4)
    b = prune_masked(rng.normal(size=(k, n)) * 3, tb / 4)
    A, B = unpack(a), unpack(b)
    np.testing.assert_allclose(zero_free_matmul(a, b), A @ B, atol=1e-12)
    brute = sum(1 for i in range(m) for kk in range(k) for j in range(n) if A[i, kk] != 0 and B[kk, j] != 0)
    assert effectual_macs(a.mask, b.mask) == brute


@settings(max_examples=N, deadline=None)
@given(tiles, st.floats(0, 1))
def test_prune_to_ratio_count(t, rho):
    out = prune_to_ratio(t, rho)
    k = pruned_count(t.size, rho)
    assert np.count_nonzero(out == 0) >= k
    kept = out != 0
    if k and kept.any():
        assert np.abs(out[kept]).min() >= np.sort(np.abs(t.ravel()))[k - 1]


def test_gaussian_median_threshold():
    x = np.random.default_rng(0).normal(size=(64, 64, 64))
    assert abs(pruning_ratio(prune_tile(x, 0.6745)) - 0.5) < 0.02
    assert abs(default_curves()["activation"].rho_at(0.6745) - 0.5) < 0.02


def test_unpack_shape_mismatch():
    with pytest.raises(MaskShapeMismatch):
        unpack(MaskedTile((2, 2), np.ones(3), np.zeros((2, 2), bool)))
    with pytest.raises(MaskShapeMismatch):
        unpack(MaskedTile((2, 2), np.ones(4), np.zeros((4,), bool)))


def test_negative_tau():
    with pytest.raises(ValueError):
        prune_tile([1.0], -0.1)
    with pytest.raises(ValueError):
        PruneThresholds(-1.0, 0.0)


def test_curve_lookup_inverse():
    c = half_normal_curve("activation", 1.0, np.linspace(0, 4, 161))
    for rho in (0.1, 0.25, 0.5, 0.9):
        assert abs(c.rho_at(lookup_tau(c, rho)) - rho) < 1e-9
    assert lookup_tau(c, 0.0) == 0.0
    assert lookup_tau(c, 1.0) == 4.0
    with pytest.raises(EmptyCurve):
        lookup_tau(SparsityCurve("activation", ()), 0.5)
    with pytest.raises(ValueError):
        SparsityCurve("activation", ((0.0, 0.5), (1.0, 0.4)))


def test_curve_json_round_trip(tmp_path):
    c = default_curves()["gradient"]
    c.save(tmp_path / "g.json")
    assert SparsityCurve.load(tmp_path / "g.json") == c


def test_role_ratios():
    th = PruneThresholds(0.6745, 1e-4)
    r = role_ratios(None, th)
    assert r["weight"] == 0.5
    assert abs(r["activation"] - 0.5) < 0.01
    assert abs(r["gradient"] - 0.9) < 0.01
    r = role_ratios(None, PruneThresholds(0.0, 0.0, overrides=(("weight", 0.0),)))
    assert r == {"weight": 0.0, "activation": 0.0, "gradient": 0.0}


def test_tile_ratios_partial_tiles():
    t = np.arange(1, 31, dtype=float).reshape(1, 5, 6)
    rs = tile_ratios(t, 10.5, 1, 4)
    assert len(rs) == 4
    assert rs[0] == pytest.approx(np.mean(t[0, :4, :4] < 10.5))


def _toy_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(1, 8, 16)) for _ in range(n)]


def test_profile_curve_monotone_and_reprofiles():
    g = build_graph(toy_txf(), 8, validation=None)
    grid = np.linspace(0, 3, 31)
    c = profile_curve(g, _toy_inputs(3), "activation", grid)
    assert np.all(np.diff(c.rhos) >= 0)
    for rho in (0.3, 0.5, 0.7):
        tau = lookup_tau(c, rho)
        again = profile_curve(g, _toy_inputs(3, seed=9), "activation", [0.0, tau])
        assert abs(again.rhos[1] - rho) < 0.05


def test_profile_curve_empty_input():
    g = build_graph(toy_txf(), 8, validation=None)
    with pytest.raises(EmptyInput):
        profile_curve(g, [], "activation", [0.0, 1.0])


def test_footprint_formula_exact():
    g = build_graph(toy_txf(), 8, "training", batch=2, validation=None)
    ratios = {"weight": 0.5, "activation": 0.5, "gradient": 0.9}
    expected = 0
    for nid, role in tensor_roles(g):
        n = g.nodes[nid].size
        expected += 2 * (n - round(ratios[role] * n)) + math.ceil(n / 8)
    assert memory_footprint(g, ratios) == expected
    assert memory_footprint(g, ratios) < memory_footprint(g, None)


def test_footprint_matches_packed_tensors():
    g = build_graph(toy_txf(), 8, "training", batch=2, validation=None)
    p = init_params(g, 0)
    rng = np.random.default_rng(0)
    vals = evaluate(g, {"x": rng.normal(size=(2, 8, 16)), "dy": rng.normal(size=(2, 8, 12))}, p)
    ratios = {"weight": 0.5, "activation": 0.5, "gradient": 0.9}
    total = 0
    for nid, role in tensor_roles(g):
        t = vals[nid] if vals[nid] is not None else np.zeros(g.nodes[nid].shape)
        t = np.broadcast_to(t, g.nodes[nid].shape) + 0.0
        t = np.where(t == 0, 1.0, t)  # exact zeros would be dropped without pruning
        total += pack_zero_free(prune_to_ratio(t, ratios[role])).packed_bytes(2)
    assert total == memory_footprint(g, ratios)
