import json
import time

import numpy as np
import pytest

from conftest import CONFIGS
from txaccel.cli import main
from txaccel.dynaprop import SparsityCurve
from txaccel.simcore import CALIB_ENV, load_calibration
from txaccel.spaces import count_transformer_space

TOY = str(CONFIGS.joinpath("toy_transformer.json"))
FB = str(CONFIGS.joinpath("fb_star.json"))
EL = str(CONFIGS.joinpath("elector_star.json"))
SIM = ["simulate", "--txf", TOY, "--acc", EL, "--validation", "none", "--seq-len", "8"]


def test_validate_table_v_pair(capsys):
    assert main(["validate", "--mode", "extended", FB, EL]) == 0
    assert main(["validate", "--mode", "strict", FB, EL]) == 1
    out = capsys.readouterr().out
    assert "hidden=512" in out and "kernel=13" in out


def test_validate_missing_and_malformed(tmp_path):
    assert main(["validate", str(tmp_path / "none.json")]) == 2
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["validate", str(p)]) == 2
    p.write_text(json.dumps({"layers": [{"hidden": 128}]}))
    assert main(["validate", str(p)]) == 2


def test_simulate_toy_fast_and_manifest(tmp_path, capsys):
    t = time.perf_counter()
    assert main(SIM + ["--out", str(tmp_path / "r.json")]) == 0
    assert time.perf_counter() - t < 10
    line = capsys.readouterr().out
    assert "cycles=" in line and "latency_ms=" in line and "energy_j=" in line and "area_mm2=" in line
    rep = json.loads((tmp_path / "r.json").read_text())
    man = rep["manifest"]
    for key in ("tool_version", "config_hashes", "calib_version", "seed", "command", "started", "finished"):
        assert key in man
    assert TOY in man["config_hashes"] and EL in man["config_hashes"]


def _strip_times(d):
    d = dict(d)
    d["manifest"] = {k: v for k, v in d["manifest"].items() if k not in ("started", "finished")}
    return d


def test_simulate_deterministic_and_training_slower(tmp_path):
    for i in range(2):
        assert main(SIM + ["--out", str(tmp_path / f"i{i}.json")]) == 0
    a, b = (json.loads((tmp_path / f"i{i}.json").read_text()) for i in range(2))
    assert _strip_times(a) == _strip_times(b)
    assert main(SIM + ["--mode", "training", "--out", str(tmp_path / "t.json")]) == 0
    assert json.loads((tmp_path / "t.json").read_text())["cycles"] > a["cycles"]


def test_simulate_infeasible_exits_nonzero(tmp_path, monkeypatch, capsys):
    d = load_calibration().to_dict()
    d["il_bits"], d["fl_bits"] = 2 ** 16, 2 ** 16
    p = tmp_path / "wide.json"
    p.write_text(json.dumps(d))
    monkeypatch.setenv(CALIB_ENV, str(p))
    assert main(SIM) == 1
    assert "BufferOverflow" in capsys.readouterr().out


def test_calibration_env_and_flag(tmp_path, monkeypatch):
    d = load_calibration().to_dict()
    d["clock_mhz"] = 350.0
    p = tmp_path / "slow.json"
    p.write_text(json.dumps(d))
    assert main(SIM + ["--out", str(tmp_path / "a.json")]) == 0
    monkeypatch.setenv(CALIB_ENV, str(p))
    assert main(SIM + ["--out", str(tmp_path / "b.json")]) == 0
    a, b = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "b.json"))
    assert b["latency_ms"] == pytest.approx(2 * a["latency_ms"])
    assert str(p) in b["manifest"]["config_hashes"]
    del d["timing"]
    p.write_text(json.dumps(d))
    assert main(SIM) == 2


def test_profile_writes_monotone_curves(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 1, 8, 16))
    np.save(tmp_path / "in.npy", arr)
    out = tmp_path / "curves"
    assert main(["profile", "--txf", TOY, "--inputs", str(tmp_path / "in.npy"), "--roles", "activation", "weight",
                 "--out-dir", str(out)]) == 0
    for role in ("activation", "weight"):
        c = SparsityCurve.load(out / f"{role}_curve.json")
        assert np.all(np.diff(c.rhos) >= 0)
    assert main(SIM + ["--curves", str(out / "activation_curve.json")]) == 0


def test_profile_empty_inputs(tmp_path):
    assert main(["profile", "--txf", TOY, "--out-dir", str(tmp_path)]) == 2
    np.save(tmp_path / "empty.npy", np.zeros((0, 1, 8, 16)))
    assert main(["profile", "--txf", TOY, "--inputs", str(tmp_path / "empty.npy"), "--out-dir", str(tmp_path)]) == 2


def test_enumerate(capsys, tmp_path):
    assert main(["enumerate"]) == 0
    assert capsys.readouterr().out.strip() == "14850000"
    assert main(["enumerate", "--transformers"]) == 0
    assert int(capsys.readouterr().out) == count_transformer_space()
    sp = tmp_path / "space.json"
    sp.write_text(json.dumps({"num_pes": [64, 128], "lanes_per_pe": [8], "batch_tile": [1]}))
    assert main(["enumerate", "--space", str(sp), "--brute-force"]) == 0
    assert int(capsys.readouterr().out) == 14850000 * 2 // 5 // 5 // 2


def test_map_prints_counts(tmp_path, capsys):
    args = ["map", "--txf", TOY, "--acc", EL, "--validation", "none", "--seq-len", "8",
            "--out", str(tmp_path / "m.json"), "--schedule-out", str(tmp_path / "s.json")]
    assert main(args) == 0
    assert "TileMatMulAcc=" in capsys.readouterr().out
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["total"] == sum(m["ops"].values())
    assert json.loads((tmp_path / "s.json").read_text())["counts"] == m["ops"]


def test_search_and_workers(tmp_path):
    base = ["search", "--budget", "20", "--seed", "2"]
    assert main(base + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(base + ["--workers", "2", "--out-dir", str(tmp_path / "b")]) == 0
    ra = (tmp_path / "a" / "trace.jsonl").read_text().splitlines()[1:]
    rb = (tmp_path / "b" / "trace.jsonl").read_text().splitlines()[1:]
    assert ra == rb
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert "manifest" in summary and summary["manifest"]["seed"] == 2


def test_search_hwnas_freeze(tmp_path):
    assert main(["search", "--budget", "12", "--method", "hwnas", "--freeze-acc", EL,
                 "--out-dir", str(tmp_path)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "trace.jsonl").read_text().splitlines()[1:]]
    assert len({tuple(r["x_acc"]) for r in rows}) == 1
    assert json.loads((tmp_path / "best_accelerator.json").read_text())["num_pes"] == 128


def test_search_config_file(tmp_path):
    cfg = tmp_path / "search.json"
    cfg.write_text(json.dumps({"budget": 10, "method": "random", "seed": 4, "weights": [0.2, 0.2, 0.2, 0.2, 0.2]}))
    assert main(["search", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"weights": [1, 1, 1, 1, 1]}))
    assert main(["search", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["simulate", "--txf", TOY]) == 2
