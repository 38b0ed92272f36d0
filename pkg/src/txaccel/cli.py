"""txaccel command line.

Exit codes: 0 success, 1 validation or feasibility failure, 2 usage or
I/O error. Full results go to JSON files; stdout gets one-line summaries.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dynaprop import ROLES, EmptyInput, PruneThresholds, SparsityCurve, profile_curve
from .graph import EvalMode, InvalidConfig, build_graph
from .scheduler import assign_and_order, insert_prune_ops, tile_graph
from .simcore import CALIB_ENV, BufferOverflow, IncompleteCalibration, load_calibration, simulate
from .spaces import (AcceleratorConfig, DesignSpace, TransformerConfig, ValidationMode, count_accelerator_space,
                     count_transformer_space, enumerate_accelerator_count, load_config, validate_accelerator,
                     validate_transformer)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    tool_version: str
    command: list
    config_hashes: dict = field(default_factory=dict)
    calib_version: int | None = None
    seed: int | None = None
    started: str = ""
    finished: str = ""

    @classmethod
    def start(cls, argv, seed=None) -> "RunManifest":
        return cls(__version__, list(argv), seed=seed, started=_now())

    def add_file(self, path) -> None:
        self.config_hashes[str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def finish(self) -> dict:
        self.finished = _now()
        return asdict(self)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: {e}") from None


def _load_pair(args, manifest: RunManifest) -> tuple[TransformerConfig, AcceleratorConfig]:
    try:
        txf = TransformerConfig.from_dict(_read_json(args.txf))
        acc = AcceleratorConfig.from_dict(_read_json(args.acc))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"malformed config: {e}") from None
    manifest.add_file(args.txf)
    manifest.add_file(args.acc)
    return txf, acc


def _calib(args, manifest: RunManifest):
    try:
        calib = load_calibration(args.calib)
    except OSError as e:
        raise UsageError(str(e)) from None
    except json.JSONDecodeError as e:
        raise UsageError(f"calibration: {e}") from None
    if calib.source not in ("default", ""):
        manifest.add_file(calib.source)
    manifest.calib_version = calib.calib_version
    return calib


def _write(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise UsageError(str(e)) from None


def _space(args) -> DesignSpace:
    if getattr(args, "space", None):
        try:
            return DesignSpace.from_json(args.space)
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise UsageError(f"{args.space}: {e}") from None
    return DesignSpace()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_validate(args) -> int:
    mode = ValidationMode(args.mode)
    space = _space(args)
    status = EXIT_OK
    for path in args.paths:
        try:
            cfg = load_config(path)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"{path}: {e}") from None
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"{path}: malformed config ({e})") from None
        if isinstance(cfg, TransformerConfig):
            rep = validate_transformer(cfg, mode, space)
        else:
            rep = validate_accelerator(cfg, mode, space)
        if rep.valid:
            print(f"{path}: valid ({mode.value})")
        else:
            status = EXIT_FAIL
            print(f"{path}: invalid ({mode.value})")
            for v in rep.violations:
                print(f"  {v}")
    return status


def _build_schedule(args, txf, acc, calib):
    mode = EvalMode(args.mode)
    g = build_graph(txf, args.seq_len, mode, batch=acc.batch_size, activation=acc.activation,
                    fuse_heads=args.fuse_heads,
                    validation=None if args.validation == "none" else ValidationMode(args.validation))
    th = PruneThresholds(args.tau_i, args.tau_t)
    table = insert_prune_ops(tile_graph(g, acc.batch_tile, acc.spatial_tile, max_ops=args.max_ops), th, mode)
    return assign_and_order(table, acc, args.policy, calib=calib), th


def _load_curves(paths, manifest: RunManifest):
    if not paths:
        return None
    curves = {}
    for p in paths:
        try:
            c = SparsityCurve.load(p)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
            raise UsageError(f"{p}: {e}") from None
        manifest.add_file(p)
        curves[c.role] = c
    return curves


def cmd_simulate(args) -> int:
    man = RunManifest.start(sys.argv)
    txf, acc = _load_pair(args, man)
    calib = _calib(args, man)
    try:
        curves = _load_curves(args.curves, man)
        sched, th = _build_schedule(args, txf, acc, calib)
        rep = simulate(sched, acc, calib, curves=curves, thresholds=th)
    except BufferOverflow as e:
        print(f"infeasible: BufferOverflow: {e}")
        return EXIT_FAIL
    except InvalidConfig as e:
        print(f"invalid: {e}")
        return EXIT_FAIL
    out = rep.to_dict()
    out["mode"] = args.mode
    out["manifest"] = man.finish()
    if args.out:
        _write(args.out, out)
    print(f"cycles={rep.cycles} latency_ms={rep.latency_ms:.6g} energy_j={rep.total_energy_j:.6g} "
          f"area_mm2={rep.area_mm2:.6g}")
    return EXIT_OK


def _tau_grid(spec: str) -> list[float]:
    try:
        if ":" in spec:
            lo, hi, n = spec.split(":")
            return list(np.linspace(float(lo), float(hi), int(n)))
        return [float(t) for t in spec.split(",")]
    except ValueError:
        raise UsageError(f"bad tau grid {spec!r}") from None


def cmd_profile(args) -> int:
    man = RunManifest.start(sys.argv, args.seed)
    try:
        txf = TransformerConfig.from_dict(_read_json(args.txf))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"malformed config: {e}") from None
    man.add_file(args.txf)
    mode = EvalMode.TRAINING if "gradient" in args.roles else EvalMode.INFERENCE
    g = build_graph(txf, args.seq_len, mode, batch=args.batch, validation=None)
    shape = g.nodes[g.inputs["x"]].shape
    inputs = []
    for p in args.inputs:
        try:
            arr = np.load(p)
        except (OSError, ValueError) as e:
            raise UsageError(f"{p}: {e}") from None
        man.add_file(p)
        arr = arr.reshape((-1,) + shape) if arr.size else arr.reshape((0,) + shape)
        inputs.extend(arr)
    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        inputs.extend(rng.normal(size=(args.synthetic,) + shape))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = _tau_grid(args.tau_grid if args.tau_grid else "0:4:81")
    for role in args.roles:
        role_grid = _tau_grid(args.grad_tau_grid) if role == "gradient" and args.grad_tau_grid else grid
        try:
            curve = profile_curve(g, inputs, role, role_grid, seed=args.seed, b=args.b, x=args.x)
        except EmptyInput as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        d = curve.to_dict()
        d["manifest"] = man.finish()
        _write(out_dir / f"{role}_curve.json", d)
        print(f"{role}: {len(curve.points)} points, rho {curve.points[0][1]:.3f} .. {curve.points[-1][1]:.3f}")
    return EXIT_OK


def cmd_search(args) -> int:
    from .codesign import Constraints, EvalSettings, Evaluator, PerfWeights, make_oracle, run_search

    cfg = _read_json(args.config) if args.config else {}
    man = RunManifest.start(sys.argv)
    if args.config:
        man.add_file(args.config)

    def opt(name, default=None):
        v = getattr(args, name, None)
        return v if v is not None else cfg.get(name, default)

    try:
        weights = PerfWeights.from_seq(opt("weights", [0.1, 0.1, 0.2, 0.1, 0.5]))
        cons = Constraints(**cfg.get("constraints", {}))
        if args.max_layers is not None:
            cons = Constraints(args.max_layers, cons.max_area_mm2, cons.max_latency_ms, cons.max_energy_j)
        settings = EvalSettings(**cfg.get("settings", {}))
        oracle = make_oracle(opt("oracle", "synthetic"))
        seed = int(opt("seed", 0))
        budget = int(opt("budget", 200))
        method = opt("method", "transcode")
        mode = ValidationMode(opt("validation", "strict"))
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"bad search config: {e}") from None
    man.seed = seed
    freeze = None
    if args.freeze_acc:
        freeze = AcceleratorConfig.from_dict(_read_json(args.freeze_acc))
        man.add_file(args.freeze_acc)
    calib = _calib(args, man)
    ev = Evaluator(settings, weights, cons, oracle, calib, validation=mode)
    try:
        trace = run_search(budget, method, seed, weights, cons, ev, workers=args.workers, freeze_acc=freeze)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace.write(out_dir / "trace.jsonl")
    best = trace.best
    summary = {"method": method, "seed": seed, "budget": budget, "final_performance": trace.final,
               "manifest": man.finish()}
    if best is not None:
        txf, acc = ev.joint.decode(np.array(best.x_txf + best.x_acc))
        _write(out_dir / "best_transformer.json", txf.to_dict())
        _write(out_dir / "best_accelerator.json", acc.to_dict())
        summary["best"] = {"performance": best.performance, "measures": best.measures, "index": best.index}
    _write(out_dir / "summary.json", summary)
    print(f"method={method} seed={seed} budget={budget} best={trace.final:.6f}")
    return EXIT_OK if best is not None else EXIT_FAIL


def cmd_enumerate(args) -> int:
    space = _space(args)
    if args.transformers:
        print(count_transformer_space(space))
        return EXIT_OK
    n = count_accelerator_space(space)
    if args.brute_force:
        m = enumerate_accelerator_count(space)
        if m != n:
            print(f"mismatch: product {n} vs enumerated {m}", file=sys.stderr)
            return EXIT_FAIL
    print(n)
    return EXIT_OK


def cmd_map(args) -> int:
    man = RunManifest.start(sys.argv)
    txf, acc = _load_pair(args, man)
    calib = _calib(args, man)
    sched, _ = _build_schedule(args, txf, acc, calib)
    t = sched.table
    out = {"mode": args.mode, "ops": t.counts(), "fine_ops": t.fine_counts(), "total": len(t),
           "granularity": {"batch": t.b * t.gb, "spatial": t.x * t.g}, "pe_group": sched.group,
           "graph_nodes": len(t.graph.nodes), "manifest": man.finish()}
    if args.out:
        _write(args.out, out)
    if args.schedule_out:
        try:
            Path(args.schedule_out).write_text(sched.to_json() + "\n")
        except OSError as e:
            raise UsageError(str(e)) from None
    print(" ".join(f"{k}={v}" for k, v in t.counts().items()))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _sim_flags(p):
    p.add_argument("--txf", required=True, help="transformer config JSON")
    p.add_argument("--acc", required=True, help="accelerator config JSON")
    p.add_argument("--calib", help=f"calibration JSON (default: ${CALIB_ENV} or the shipped table)")
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default="inference")
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--validation", choices=["strict", "extended", "none"], default="extended",
                   help="value-set check on the transformer; none allows toy widths")
    p.add_argument("--tau-i", type=float, default=0.6745)
    p.add_argument("--tau-t", type=float, default=1e-4)
    p.add_argument("--max-ops", type=int, default=20000, help="coarsen tiles until the op count fits")
    p.add_argument("--policy", choices=["least_loaded", "round_robin"], default="least_loaded")
    p.add_argument("--no-fuse-heads", dest="fuse_heads", action="store_false")
    p.add_argument("--curves", nargs="*", help="sparsity-curve JSON files from `profile`")
    p.add_argument("--out", help="write the full report here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="txaccel", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"txaccel {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check config files against the design space")
    p.add_argument("paths", nargs="+")
    p.add_argument("--mode", choices=[m.value for m in ValidationMode], default="strict")
    p.add_argument("--space", help="design-space JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="simulate one transformer on one accelerator")
    _sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("profile", help="profile sparsity curves of a model")
    p.add_argument("--txf", required=True)
    p.add_argument("--inputs", nargs="*", default=[], help=".npy files of input batches")
    p.add_argument("--synthetic", type=int, default=0, help="add this many Gaussian input batches")
    p.add_argument("--roles", nargs="+", choices=ROLES, default=["activation"])
    p.add_argument("--tau-grid", help="lo:hi:n or comma list (default 0:4:81)")
    p.add_argument("--grad-tau-grid", help="grid for the gradient role (default 0:4e-4:81)", default="0:4e-4:81")
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("-b", type=int, default=1, help="tile batch")
    p.add_argument("-x", type=int, default=16, help="tile size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("search", help="co-design search")
    p.add_argument("--config", help="search config JSON")
    p.add_argument("--budget", type=int)
    p.add_argument("--method", choices=["transcode", "random", "hwnas"])
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", type=lambda s: [float(v) for v in s.split(",")],
                   help="alpha,beta,gamma,delta,epsilon")
    p.add_argument("--oracle", choices=["synthetic", "toy"])
    p.add_argument("--validation", choices=[m.value for m in ValidationMode])
    p.add_argument("--max-layers", type=int)
    p.add_argument("--freeze-acc", help="accelerator JSON held fixed by hwnas")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--calib")
    p.add_argument("--out-dir", default="search_out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("enumerate", help="count the design space")
    p.add_argument("--space", help="design-space JSON")
    p.add_argument("--transformers", action="store_true", help="count strict-mode transformers instead")
    p.add_argument("--brute-force", action="store_true", help="cross-check by enumeration")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("map", help="tile and schedule a pair, print op counts")
    _sim_flags(p)
    p.add_argument("--schedule-out", help="write the schedule JSON here")
    p.set_defaults(func=cmd_map)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IncompleteCalibration as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
