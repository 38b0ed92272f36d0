import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import elector_star, fb_star, toy_txf
from txaccel.codesign import (P_MIN, Constraints, EvalSettings, Evaluator, JointSpace, Lattice, ReferenceMaxima,
                              Surrogate, SyntheticOracle, ToyTrainer, UnfittedSurrogate, compute_reference_maxima,
                              evaluate_pair, gobi_maximize, make_oracle, param_count, repair_transformer,
                              run_search)
from txaccel.graph import InvalidConfig
from txaccel.spaces import (TXF_EMBEDDING_DIM, ValidationMode, encode_accelerator, encode_transformer,
                            sample_transformer, validate_transformer)


@pytest.fixture(scope="module")
def evaluator():
    return Evaluator()


def _fitted(seed=0, d=6, n=40):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2 - X[:, 2] + 0.01 * rng.normal(size=n)
    return Surrogate(seed=seed, epochs=150).fit(X, y), rng


@pytest.mark.parametrize("kappa", [0.0, 0.5, 2.0])
def test_surrogate_input_gradient_matches_fd(kappa):
    sur, rng = _fitted()
    X = rng.uniform(size=(5, 6))
    _, g = sur.acquisition_grad(X, kappa)
    eps = 1e-6
    fd = np.zeros_like(X)
    for i in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[i] = eps
        fd[:, i] = (sur.acquisition(X + e, kappa) - sur.acquisition(X - e, kappa)) / (2 * eps)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_surrogate_mean_gradient_and_outputs():
    sur, rng = _fitted(1)
    X = rng.uniform(size=(4, 6))
    mu, al, ep = sur.predict(X)
    assert np.all(np.isfinite(mu)) and np.all(al > 0) and np.all(ep >= 0)
    g = sur.mean_grad(X)
    fd = np.stack([(sur.predict(X + e)[0] - sur.predict(X - e)[0]) / 2e-6 for e in np.eye(6) * 1e-6], axis=1)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_unfitted_and_empty():
    with pytest.raises(UnfittedSurrogate):
        Surrogate().predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Surrogate().fit(np.zeros((0, 3)), np.zeros(0))


def test_quadratic_lattice_found_within_50():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        lat = Lattice([np.arange(0, 11, dtype=float)] * 4)
        c = lat.sample(rng)
        _, y = gobi_maximize(lambda x: -float(np.sum((x - c) ** 2)), lat, 50, seed=seed, stop_at=0.0)
        hits += max(y) == 0.0
    assert hits >= 18


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(list(ValidationMode)))
def test_repair_always_valid(seed, mode):
    rng = np.random.default_rng(seed)
    vec = rng.uniform(-50, 4500, TXF_EMBEDDING_DIM) * (rng.uniform(size=TXF_EMBEDDING_DIM) < 0.6)
    cfg = repair_transformer(vec, mode)
    assert validate_transformer(cfg, mode).valid


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_repair_is_identity_on_valid(seed):
    cfg = sample_transformer(np.random.default_rng(seed))
    assert repair_transformer(encode_transformer(cfg)) == cfg


def test_joint_project_keeps_lattice_points():
    js = JointSpace()
    for v in js.initial(3, 8):
        np.testing.assert_array_equal(js.project(v), v)
        t, a = js.decode(v)
        assert t and a


def test_synthetic_oracle():
    o = SyntheticOracle()
    small = sample_transformer(np.random.default_rng(0), num_layers=2)
    acc = o(small)
    assert 0.55 <= acc < 1.0
    assert o(small) == acc
    assert o(fb_star()) > 0.55  # extended values are accepted
    with pytest.raises(InvalidConfig):
        o(toy_txf())
    assert param_count(fb_star()) > 0


def test_toy_trainer_reproducible():
    cfg = sample_transformer(np.random.default_rng(2), num_layers=2)
    t = ToyTrainer(steps=20, n_train=64, n_test=64)
    a = t(cfg)
    assert a == t(cfg)
    assert 0.0 <= a <= 1.0
    with pytest.raises(ValueError):
        make_oracle("oracle-that-does-not-exist")


def test_invalid_pairs_score_p_min(evaluator):
    good_t = encode_transformer(sample_transformer(np.random.default_rng(0)))
    good_a = encode_accelerator(elector_star())
    bad_a = list(good_a)
    bad_a[3] = 100  # num_pes outside the set
    assert evaluate_pair(good_t, bad_a, evaluator=evaluator).performance == P_MIN
    assert evaluate_pair(good_t[:-1], good_a, evaluator=evaluator).performance == P_MIN
    bad_t = list(good_t)
    bad_t[0] = 130.0
    assert evaluate_pair(bad_t, good_a, evaluator=evaluator).performance == P_MIN
    ok = evaluate_pair(good_t, good_a, evaluator=evaluator)
    assert ok.valid and 0 < ok.performance <= 1


def test_constraints_penalize():
    ev = Evaluator(constraints=Constraints(max_area_mm2=1.0))
    pt = ev.evaluate(ev.joint.initial(0, 1)[0])
    assert not pt.valid and pt.performance == P_MIN and "area" in pt.reason


def test_shipped_maxima_match_recomputation(evaluator):
    fresh = compute_reference_maxima(EvalSettings(), evaluator.calib)
    shipped = ReferenceMaxima.load()
    for k in ("latency", "area", "dynamic_energy", "leakage_energy"):
        assert getattr(fresh, k) == pytest.approx(getattr(shipped, k), rel=1e-12)


@pytest.mark.parametrize("method", ["transcode", "random", "hwnas"])
def test_search_trace_properties(evaluator, method):
    tr = run_search(40, method, seed=3, evaluator=evaluator, n_init=16)
    curve = tr.best_curve()
    assert len(curve) == 40
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    best = tr.best
    assert best is not None and best.valid
    assert all(r.performance <= best.performance for r in tr.rows)
    if method == "hwnas":
        assert len({tuple(r.x_acc) for r in tr.rows}) == 1


def test_workers_do_not_change_results():
    a = run_search(24, "transcode", seed=5, evaluator=Evaluator(), n_init=12, workers=1)
    b = run_search(24, "transcode", seed=5, evaluator=Evaluator(), n_init=12, workers=2)
    assert [r.performance for r in a.rows] == [r.performance for r in b.rows]
    assert [r.x_txf + r.x_acc for r in a.rows] == [r.x_txf + r.x_acc for r in b.rows]


def test_hwnas_freeze_acc(evaluator):
    tr = run_search(20, "hwnas", seed=1, evaluator=evaluator, n_init=8, freeze_acc=elector_star())
    assert {tuple(r.x_acc) for r in tr.rows} == {tuple(encode_accelerator(elector_star(), extended=True))}


def test_bad_method():
    with pytest.raises(ValueError):
        run_search(10, "annealing")
