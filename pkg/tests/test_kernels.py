import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import elector_star, sim_pair, toy_txf
from txaccel import _kernels_py, kernels
from txaccel.spaces import sample_accelerator, sample_transformer

try:
    from txaccel import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

needs_ext = pytest.mark.skipif(_kernels_c is None, reason="compiled kernels not built")


def random_problem(seed, n=60, num_pes=3):
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, 5, n)
    deps = []
    for o in range(n):
        k = int(rng.integers(0, min(o, 3) + 1))
        deps.append(sorted(set(rng.choice(o, size=k, replace=False).tolist())) if o and k else [])
    dep_ptr = np.concatenate([[0], np.cumsum([len(d) for d in deps])]).astype(np.int64)
    dep_idx = np.array([d for ds in deps for d in ds], dtype=np.int64)
    module_count = np.array([4, 2, 1, 1], dtype=np.int64)
    width = np.array([int(rng.integers(1, module_count[c] + 1)) if c < 4 else 1 for c in cls], dtype=np.int64)
    dur = rng.integers(1, 40, n).astype(np.int64)
    res_buf = np.where(cls == 4, rng.choice([-1, 1], n), rng.choice([-1, 0, 2], n)).astype(np.int64)
    res_bytes = np.where(res_buf >= 0, rng.integers(1, 50, n), 0).astype(np.int64)
    attached = np.full(n, -1, dtype=np.int64)
    cap = rng.integers(50, 400, 3).astype(np.int64)
    return dict(cls=cls.astype(np.int64), width=width, dur=dur, dep_ptr=dep_ptr, dep_idx=dep_idx,
                num_pes=num_pes, module_count=module_count, res_buf=res_buf, res_bytes=res_bytes,
                attached=attached, cap=cap, bank=rng.integers(0, 2, n).astype(np.int64))


def run(mod, p, policy=0):
    pe, est = mod.list_schedule(p["cls"], p["width"], p["dur"], p["dep_ptr"], p["dep_idx"], p["num_pes"],
                                p["module_count"], policy)
    order = np.lexsort((np.arange(len(est)), np.asarray(est)))
    out = mod.replay(p["cls"], pe, p["width"], p["dur"], p["dep_ptr"], p["dep_idx"], order, p["num_pes"],
                     p["module_count"], 7, p["bank"], 2, p["res_buf"], p["res_bytes"], p["attached"], p["cap"])
    return np.asarray(pe), np.asarray(est), out


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_ext
@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0, 1]))
def test_compiled_matches_python_on_random_dags(seed, policy):
    p = random_problem(seed)
    pe_a, est_a, out_a = run(_kernels_py, p, policy)
    pe_b, est_b, out_b = run(_kernels_c, p, policy)
    np.testing.assert_array_equal(pe_a, pe_b)
    np.testing.assert_array_equal(est_a, est_b)
    for a, b in zip(out_a, out_b):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_python_replay_respects_dependencies(seed):
    p = random_problem(seed)
    _, _, (start, finish, peak, spill, status, _) = run(_kernels_py, p)
    assert status == kernels.STATUS_OK
    for o in range(len(p["cls"])):
        for d in p["dep_idx"][p["dep_ptr"][o]:p["dep_ptr"][o + 1]]:
            assert start[o] >= finish[d]
    assert np.all(finish - start >= p["dur"])


@needs_ext
@pytest.mark.parametrize("mode", ["inference", "training"])
def test_simulation_identical_across_backends(monkeypatch, mode):
    rng = np.random.default_rng(5)
    pairs = [(toy_txf(), elector_star())] + [(sample_transformer(rng, num_layers=2), sample_accelerator(rng))
                                            for _ in range(4)]
    for txf, acc in pairs:
        monkeypatch.setattr(kernels, "list_schedule", _kernels_c.list_schedule)
        monkeypatch.setattr(kernels, "replay", _kernels_c.replay)
        a = sim_pair(txf, acc, mode, seq_len=16, max_ops=1500, fuse_heads=True).to_json()
        monkeypatch.setattr(kernels, "list_schedule", _kernels_py.list_schedule)
        monkeypatch.setattr(kernels, "replay", _kernels_py.replay)
        b = sim_pair(txf, acc, mode, seq_len=16, max_ops=1500, fuse_heads=True).to_json()
        assert a == b


def test_oversized_weight_load_reports_overflow():
    p = random_problem(3)
    mem = np.flatnonzero(p["cls"] == 4)
    p["res_buf"][mem[0]] = 1
    p["res_bytes"][mem[0]] = p["cap"][1] + 1
    _, _, out = run(_kernels_py, p)
    assert out[4] == kernels.STATUS_OVERFLOW
    if _kernels_c is not None:
        assert run(_kernels_c, p)[2][4] == kernels.STATUS_OVERFLOW


def test_cycle_detection():
    from txaccel.scheduler import CyclicGraph
    with pytest.raises(ValueError):
        _kernels_py.list_schedule(np.zeros(2, np.int64), np.ones(2, np.int64), np.ones(2, np.int64),
                                  np.array([0, 1, 2]), np.array([1, 0]), 1, np.array([1, 1, 1, 1]))
    assert issubclass(CyclicGraph, ValueError)
