"""Compare the compiled scheduling kernels against the pure-Python fallback.

Times schedule construction plus simulation of a few design pairs with each
backend and checks both produce byte-identical reports.

    python benchmarks/bench_kernels.py [--seq-len 32] [--max-ops 20000] [--repeats 3]
"""
import argparse
import json
import time
from importlib import resources

import numpy as np

from txaccel import _kernels_py, kernels
from txaccel.dynaprop import PruneThresholds
from txaccel.graph import build_graph
from txaccel.scheduler import assign_and_order, insert_prune_ops, tile_graph
from txaccel.simcore import load_calibration, simulate
from txaccel.spaces import AcceleratorConfig, TransformerConfig, sample_accelerator, sample_transformer

try:
    from txaccel import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _pkg_config(name, cls):
    raw = json.loads(resources.files("txaccel").joinpath("data/configs", name).read_text())
    return cls.from_dict(raw)


def _use(mod):
    kernels.list_schedule = mod.list_schedule
    kernels.replay = mod.replay


def run_pair(txf, acc, mode, seq_len, max_ops, calib):
    th = PruneThresholds(0.6745, 1e-4)
    g = build_graph(txf, seq_len, mode, batch=acc.batch_size, activation=acc.activation, fuse_heads=True,
                    validation=None)
    table = insert_prune_ops(tile_graph(g, acc.batch_tile, acc.spatial_tile, max_ops=max_ops), th, mode)
    sched = assign_and_order(table, acc, calib=calib)
    return len(table), simulate(sched, acc, calib, thresholds=th).to_json()


def bench(mod, cases, repeats, calib):
    _use(mod)
    best, out = [], []
    for txf, acc, mode, seq_len, max_ops in cases:
        times = []
        for _ in range(repeats):
            t = time.perf_counter()
            n, rep = run_pair(txf, acc, mode, seq_len, max_ops, calib)
            times.append(time.perf_counter() - t)
        best.append(min(times))
        out.append((n, rep))
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq-len", type=int, default=32)
    ap.add_argument("--max-ops", type=int, default=20000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--random-pairs", type=int, default=2)
    args = ap.parse_args(argv)
    if _kernels_c is None:
        raise SystemExit("compiled kernels not built; run pip install -e . --no-build-isolation")

    calib = load_calibration()
    toy = _pkg_config("toy_transformer.json", TransformerConfig)
    fb = _pkg_config("fb_star.json", TransformerConfig)
    el = _pkg_config("elector_star.json", AcceleratorConfig)
    cases = [(toy, el, "inference", 8, None), (toy, el, "training", 8, None),
             (fb, el, "inference", args.seq_len, args.max_ops)]
    rng = np.random.default_rng(0)
    for _ in range(args.random_pairs):
        cases.append((sample_transformer(rng, num_layers=2), sample_accelerator(rng), "training", 16,
                      args.max_ops))

    tc, rc = bench(_kernels_c, cases, args.repeats, calib)
    tp, rp = bench(_kernels_py, cases, args.repeats, calib)
    names = ["toy/inference", "toy/training", "FB*/inference"] + [f"random{i}/training"
                                                                   for i in range(args.random_pairs)]
    print(f"{'case':<20}{'ops':>8}{'cython s':>11}{'python s':>11}{'speedup':>9}  identical")
    for name, a, b, (n, ra), (_, rb) in zip(names, tc, tp, rc, rp):
        print(f"{name:<20}{n:>8}{a:>11.3f}{b:>11.3f}{b / a:>8.1f}x  {ra == rb}")
    print(f"{'total':<28}{sum(tc):>11.3f}{sum(tp):>11.3f}{sum(tp) / sum(tc):>8.1f}x")


if __name__ == "__main__":
    main()
