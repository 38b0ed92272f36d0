import json
from importlib import resources

import numpy as np
import pytest

from txaccel.dynaprop import PruneThresholds
from txaccel.graph import build_graph
from txaccel.scheduler import assign_and_order, insert_prune_ops, tile_graph
from txaccel.simcore import load_calibration, simulate
from txaccel.spaces import AcceleratorConfig, TransformerConfig

CONFIGS = resources.files("txaccel").joinpath("data/configs")


def load_pkg_config(name):
    raw = json.loads(CONFIGS.joinpath(name).read_text())
    return TransformerConfig.from_dict(raw) if "layers" in raw else AcceleratorConfig.from_dict(raw)


def toy_txf():
    return load_pkg_config("toy_transformer.json")


def elector_star():
    return load_pkg_config("elector_star.json")


def fb_star():
    return load_pkg_config("fb_star.json")


def schedule_pair(txf, acc, mode="inference", seq_len=8, max_ops=None, thresholds=None, calib=None,
                  fuse_heads=False, policy="least_loaded"):
    th = thresholds or PruneThresholds(0.6745, 1e-4)
    g = build_graph(txf, seq_len, mode, batch=acc.batch_size, activation=acc.activation, fuse_heads=fuse_heads,
                    validation=None)
    table = insert_prune_ops(tile_graph(g, acc.batch_tile, acc.spatial_tile, max_ops=max_ops), th, mode)
    return assign_and_order(table, acc, policy, calib=calib), th


def sim_pair(txf, acc, mode="inference", seq_len=8, max_ops=None, ratios=None, calib=None, **kw):
    sched, th = schedule_pair(txf, acc, mode, seq_len, max_ops, calib=calib, **kw)
    return simulate(sched, acc, calib, thresholds=th, ratios=ratios)


@pytest.fixture(scope="session")
def calib():
    return load_calibration()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
