import json
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import elector_star, schedule_pair, sim_pair, toy_txf
from txaccel.graph import build_graph
from txaccel.scheduler import assign_and_order, insert_prune_ops, tile_graph
from txaccel.dynaprop import PruneThresholds
from txaccel.simcore import (CALIB_ENV, BufferOverflow, CalibrationTable, IncompleteCalibration, area, critical_path_cycles,
                             leakage_power_mw, load_calibration, mac_lane_cycles, memory_transfer_cycles,
                             op_durations, simulate)
from txaccel.spaces import MemoryConfig, sample_accelerator, sample_transformer

ELECTOR_STAR_AREA_MM2 = 127.93759999999999  # shipped calibration v1


def test_mac_lane_cycles_formula():
    assert mac_lane_cycles((1, 4, 4), 16) == math.ceil(64 / 16) + 4
    assert mac_lane_cycles((4, 32, 32), 16) == 4 * 32 * 32 * 32 // 16 + 4
    assert mac_lane_cycles((4, 32, 32), 1) == 4 * 32 ** 3
    assert mac_lane_cycles((4, 32, 32), 16, 0.5) == 4 * 32 ** 3 // 32 + 4
    assert mac_lane_cycles((1, 8, 8), 16, 0.0) == 4


def test_memory_transfer_cycles(calib):
    mem = MemoryConfig("RRAM", 8, 2, 4)
    m = calib.memory["RRAM"]
    assert memory_transfer_cycles(0, mem, calib) == m["latency_cycles"]
    bw = 4 * m["bandwidth_bytes_per_cycle"]
    assert memory_transfer_cycles(1000, mem, calib) == m["latency_cycles"] + math.ceil(1000 / bw)


def test_area_golden(calib):
    assert area(elector_star(), calib) == pytest.approx(ELECTOR_STAR_AREA_MM2, rel=1e-12)


def test_area_and_leakage_grow_with_resources(calib):
    a = elector_star()
    for field, big in (("num_pes", 256), ("lanes_per_pe", 64), ("softmax_per_pe", 8), ("act_buffer_mb", 64)):
        b = replace(a, **{field: big}) if getattr(a, field) != big else replace(a, **{field: big * 2})
        assert area(b, calib) > area(a, calib)
        assert leakage_power_mw(b, calib) > leakage_power_mw(a, calib)


def test_calibration_validation(tmp_path, monkeypatch, calib):
    d = calib.to_dict()
    del d["modules"]["softmax"]["energy_pj"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    with pytest.raises(IncompleteCalibration, match="softmax.energy_pj"):
        load_calibration(p)
    d = calib.to_dict()
    d["calib_version"] = 99
    p.write_text(json.dumps(d))
    with pytest.raises(IncompleteCalibration):
        load_calibration(p)
    d = calib.to_dict()
    d["clock_mhz"] = 350.0
    p.write_text(json.dumps(d))
    monkeypatch.setenv(CALIB_ENV, str(p))
    assert load_calibration().clock_mhz == 350.0


def test_report_is_deterministic():
    a = sim_pair(toy_txf(), elector_star(), "training").to_json()
    b = sim_pair(toy_txf(), elector_star(), "training").to_json()
    assert a == b


def test_training_slower_than_inference():
    inf = sim_pair(toy_txf(), elector_star(), "inference")
    tr = sim_pair(toy_txf(), elector_star(), "training")
    assert 1 < tr.cycles / inf.cycles < 5
    assert tr.dynamic_energy_j > inf.dynamic_energy_j


def _random_small(i):
    rng = np.random.default_rng(i)
    txf = sample_transformer(rng, num_layers=2)
    acc = sample_accelerator(rng)
    mode = ("inference", "training")[i % 2]
    return txf, acc, mode


def test_critical_path_lower_bound(calib):
    for i in range(100):
        txf, acc, mode = _random_small(i)
        sched, th = schedule_pair(txf, acc, mode, seq_len=16, max_ops=400, fuse_heads=True)
        rep = simulate(sched, acc, calib, thresholds=th)
        dur = op_durations(sched.table, acc, calib, rep.ratios, sched.group)
        lat = int(calib.memory[acc.memory.type]["latency_cycles"])
        assert rep.cycles >= critical_path_cycles(sched, dur, lat)


def test_gradient_sparsity_lowers_mac_energy():
    sched, _ = schedule_pair(toy_txf(), elector_star(), "training")
    dense = simulate(sched, ratios={"weight": 0.0, "activation": 0.0, "gradient": 0.0})
    sparse = simulate(sched, ratios={"weight": 0.0, "activation": 0.0, "gradient": 0.9})
    assert sparse.energy_breakdown_j["mac"] < dense.energy_breakdown_j["mac"]
    assert sparse.skipped_macs > dense.skipped_macs == 0
    assert sparse.cycles <= dense.cycles


def test_more_pes_never_slower():
    for mode in ("inference", "training"):
        prev = None
        for pes in (64, 128, 256, 512, 1024):
            acc = replace(elector_star(), num_pes=pes)
            rep = sim_pair(toy_txf(), acc, mode, seq_len=16, max_ops=2000)
            if prev is not None:
                assert rep.cycles <= prev.cycles
                assert rep.area_mm2 > prev.area_mm2
            prev = rep


def test_buffer_overflow_is_reported(calib):
    # 1 KiB words: one 4x32x32 activation tile pair needs 8 MiB, the buffer holds 4
    d = calib.to_dict()
    d["il_bits"], d["fl_bits"] = 4096, 4096
    wide = CalibrationTable.from_dict(d)
    acc = replace(elector_star(), act_buffer_mb=4)
    sched, th = schedule_pair(toy_txf(), acc, "inference")
    with pytest.raises(BufferOverflow, match="activation"):
        simulate(sched, acc, wide, thresholds=th)
    simulate(sched, acc, calib, thresholds=th)


def test_empty_table():
    g = build_graph(toy_txf(), 8, validation=None)
    t = insert_prune_ops(tile_graph(g, 1, 4), PruneThresholds(), "inference")
    for name in ("kind", "node", "par", "ser", "unit", "real", "role_a", "role_b", "phase", "in_a", "in_b",
                 "out_el", "res_buf", "res_el", "attached", "tau"):
        setattr(t, name, getattr(t, name)[:0])
    t.tile = t.tile[:0]
    t.dep_ptr = t.dep_ptr[:1]
    t.dep_idx = t.dep_idx[:0]
    s = assign_and_order(t, elector_star())
    assert simulate(s).cycles == 0


def test_report_fields():
    rep = sim_pair(toy_txf(), elector_star(), "inference")
    d = json.loads(rep.to_json())
    for key in ("cycles", "latency_ms", "dynamic_energy_j", "leakage_energy_j", "area_mm2", "energy_breakdown_j",
                "utilization", "calib_version"):
        assert key in d
    assert rep.total_energy_j == pytest.approx(rep.dynamic_energy_j + rep.leakage_energy_j)
    assert all(0 <= u <= 1 + 1e-9 for u in rep.utilization.values())
