"""Joint transformer x accelerator search: evaluation, surrogate-guided
gradient ascent on the inputs, and the random and accelerator-frozen
baselines."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..dynaprop import PruneThresholds
from ..graph import EvalMode, InvalidConfig, build_graph
from ..scheduler import assign_and_order, insert_prune_ops, tile_graph
from ..simcore import BufferOverflow, CalibrationTable, load_calibration, simulate
from ..spaces import (DEFAULT_SPACE, HEAD_CATEGORIES, MAX_FF_SLOTS, MAX_LAYER_SLOTS, SLOT_WIDTH, TXF_EMBEDDING_DIM,
                      AcceleratorConfig, DesignSpace, HeadOp, Invalid, LayerConfig, MemoryConfig, TransformerConfig,
                      ValidationMode, decode_accelerator, decode_transformer, encode_accelerator, encode_transformer,
                      sample_space, validate_accelerator, validate_transformer)
from .metric import DEFAULT_WEIGHTS, P_MIN, PerfWeights, ReferenceMaxima, normalize_measures, performance
from .oracle import SyntheticOracle, make_oracle
from .surrogate import Surrogate

METHODS = ("transcode", "random", "hwnas")
ACC_DIM = 13


# --------------------------------------------------------------------------
# lattice
# --------------------------------------------------------------------------


def nearest(values: Sequence[float], v: float) -> float:
    """Nearest permissible value; ties go to the smaller one."""
    vals = sorted(values)
    best = vals[0]
    for c in vals:
        if abs(c - v) < abs(best - v):
            best = c
    return best


@dataclass
class Lattice:
    """Per-coordinate permissible values."""
    values: list[np.ndarray]

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def scale(self) -> np.ndarray:
        return np.array([max(abs(float(v.max())), 1e-12) for v in self.values])

    def project(self, x) -> np.ndarray:
        return np.array([nearest(v, float(xi)) for v, xi in zip(self.values, x)])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([v[rng.integers(len(v))] for v in self.values], dtype=float)

    def neighbors(self, x) -> list[np.ndarray]:
        """Points one lattice step away along a single coordinate."""
        out = []
        for d, v in enumerate(self.values):
            vs = np.sort(v)
            i = int(np.argmin(np.abs(vs - x[d])))
            for j in (i - 1, i + 1):
                if 0 <= j < len(vs):
                    y = np.array(x, dtype=float)
                    y[d] = vs[j]
                    out.append(y)
        return out


# --------------------------------------------------------------------------
# surrogate-guided ascent
# --------------------------------------------------------------------------


def gobi_candidates(sur: Surrogate, starts: np.ndarray, scale: np.ndarray, project: Callable,
                    kappa: float, steps: int = 30, step_size: float = 0.05,
                    frozen: np.ndarray | None = None) -> list[np.ndarray]:
    """Multi-restart first-order ascent on the acquisition in normalized
    coordinates, with the surrogate frozen. Every iterate is projected onto
    the lattice; the distinct projections are the candidates. ``frozen``
    marks coordinates whose gradient is forced to zero."""
    z = np.asarray(starts, dtype=float) / scale
    seen: dict[tuple, np.ndarray] = {}
    for _ in range(steps):
        _, g = sur.acquisition_grad(z, kappa)
        if frozen is not None:
            g[:, frozen] = 0.0
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        z = np.clip(z + step_size * g / np.maximum(norm, 1e-12), 0.0, 1.0)
        for row in z:
            p = project(row * scale)
            seen.setdefault(tuple(p.tolist()), p)
    return list(seen.values())


def pick_proposals(sur: Surrogate, cands: list[np.ndarray], scale: np.ndarray, kappa: float, q: int,
                   exclude: set) -> list[np.ndarray]:
    fresh = [c for c in cands if tuple(c.tolist()) not in exclude]
    if not fresh:
        return []
    acq = sur.acquisition(np.stack(fresh) / scale, kappa)
    order = np.lexsort((np.arange(len(fresh)), -acq))
    return [fresh[i] for i in order[:q]]


def kappa_schedule(done: int, n_init: int, budget: int, k0: float = 0.5, k1: float = 0.1) -> float:
    span = max(1, budget - n_init)
    frac = min(1.0, max(0.0, (done - n_init) / span))
    return k0 + (k1 - k0) * frac


def gobi_maximize(objective: Callable[[np.ndarray], float], lattice: Lattice, budget: int, seed: int = 0,
                  n_init: int = 8, q: int = 2, restarts: int = 8, steps: int = 30,
                  surrogate_kw: dict | None = None, stop_at: float | None = None):
    """Surrogate-guided maximization of a black-box objective over a
    lattice. Returns (points, values) in evaluation order."""
    rng = np.random.default_rng(seed)
    scale = lattice.scale
    X: list[np.ndarray] = []
    y: list[float] = []
    seen: set = set()

    def run(x):
        X.append(x)
        y.append(float(objective(x)))
        seen.add(tuple(x.tolist()))

    while len(X) < min(n_init, budget):
        x = lattice.sample(rng)
        if tuple(x.tolist()) not in seen:
            run(x)
    while len(X) < budget:
        if stop_at is not None and max(y) >= stop_at:
            break
        kappa = kappa_schedule(len(X), n_init, budget)
        sur = Surrogate(seed=seed + len(X), **(surrogate_kw or {})).fit(np.stack(X) / scale, np.array(y))
        top = np.argsort(-np.array(y), kind="stable")[: restarts // 2]
        starts = [X[i] for i in top] + [lattice.sample(rng) for _ in range(restarts - len(top))]
        cands = gobi_candidates(sur, np.stack(starts), scale, lattice.project, kappa, steps)
        k = min(q, budget - len(X))
        # one slot refines the incumbent: its best-predicted unseen neighbour
        local = pick_proposals(sur, lattice.neighbors(X[top[0]]), scale, 0.0, 1, seen) if k > 1 else []
        props = local + pick_proposals(sur, cands, scale, kappa, k - len(local),
                                       seen | {tuple(p.tolist()) for p in local})
        while len(props) < k:  # ascent exhausted: explore
            x = lattice.sample(rng)
            if tuple(x.tolist()) not in seen and all((x != p).any() for p in props):
                props.append(x)
        for p in props:
            run(p)
    return X, y


# --------------------------------------------------------------------------
# joint space
# --------------------------------------------------------------------------


def txf_lattice(mode: ValidationMode, space: DesignSpace = DEFAULT_SPACE) -> list[np.ndarray]:
    hid = np.array([0] + list(space.hidden_set(mode)), dtype=float)
    cnt = np.arange(0, max(space.num_heads) + 1, dtype=float)
    ff = np.array([0] + list(space.ff_dims), dtype=float)
    slot = [hid] + [cnt] * len(HEAD_CATEGORIES) + [ff] * MAX_FF_SLOTS
    return slot * MAX_LAYER_SLOTS


def acc_lattice(space: DesignSpace = DEFAULT_SPACE) -> list[np.ndarray]:
    """Value sets in accelerator-embedding order (spatial tile twice)."""
    sets = [space.batch_tile, space.spatial_tile, space.spatial_tile, space.num_pes, space.lanes_per_pe,
            space.macs_per_lane, space.softmax_per_pe, space.batch_size, space.act_buffer_mb,
            space.weight_buffer_mb, space.mask_buffer_mb, range(1, len(space.memory) + 1),
            range(len(space.activation))]
    return [np.array(sorted(v), dtype=float) for v in sets]


def repair_transformer(vec, mode: ValidationMode = ValidationMode.STRICT,
                       space: DesignSpace = DEFAULT_SPACE) -> TransformerConfig:
    """Nearest valid transformer to a continuous embedding: per-coordinate
    rounding plus the structural rules (layer count, heads per layer, head
    homogeneity in strict mode, feed-forward stack length)."""
    v = np.asarray(vec, dtype=float).reshape(MAX_LAYER_SLOTS, SLOT_WIDTH)
    hidden = space.hidden_set(mode)
    kernels = space.kernel_set(mode)
    cats = [c for c in HEAD_CATEGORIES if not c.startswith("DSC-") or int(c[4:]) in kernels]
    cat_idx = [HEAD_CATEGORIES.index(c) for c in cats]
    present = int((v[:, 0] >= min(hidden) / 2).sum())
    n_layers = int(nearest(space.num_layers, present))
    layers = []
    for j in range(n_layers):
        row = v[j]
        h = int(nearest(hidden, max(row[0], min(hidden))))
        c = np.clip(row[1 + np.array(cat_idx)], 0, None)
        n = int(nearest(space.num_heads, c.sum()))
        if c.sum() <= 0:
            c = np.eye(len(cats))[0]
        if mode == ValidationMode.STRICT:
            counts = np.zeros(len(cats), dtype=int)
            counts[int(np.argmax(c))] = n
        else:
            raw = c / c.sum() * n
            counts = np.floor(raw).astype(int)
            rem = n - counts.sum()
            for i in np.lexsort((np.arange(len(cats)), -(raw - counts)))[:rem]:
                counts[i] += 1
        heads = []
        for cat, k in zip(cats, counts):
            heads += [HeadOp.from_category(cat)] * int(k)
        f = row[1 + len(HEAD_CATEGORIES):]
        n_ff = int(min(max(space.ff_stack), max(min(space.ff_stack), (f >= min(space.ff_dims) / 2).sum())))
        ff = tuple(int(nearest(space.ff_dims, max(x, min(space.ff_dims)))) for x in f[:n_ff])
        layers.append(LayerConfig(h, tuple(heads), ff))
    return TransformerConfig(tuple(layers))


class JointSpace:
    """Concatenated [transformer | accelerator] embedding lattice."""

    def __init__(self, mode: ValidationMode = ValidationMode.STRICT, space: DesignSpace = DEFAULT_SPACE):
        self.mode = mode
        self.space = space
        self.lattice = Lattice(txf_lattice(mode, space) + acc_lattice(space))
        self.scale = self.lattice.scale
        self.acc_slice = slice(TXF_EMBEDDING_DIM, TXF_EMBEDDING_DIM + ACC_DIM)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    def encode(self, txf: TransformerConfig, acc: AcceleratorConfig) -> np.ndarray:
        return np.array(encode_transformer(txf) + encode_accelerator(acc, extended=True, space=self.space),
                        dtype=float)

    def decode(self, vec):
        vec = list(np.asarray(vec, dtype=float))
        return (decode_transformer(vec[:TXF_EMBEDDING_DIM], self.mode, self.space),
                decode_accelerator(vec[TXF_EMBEDDING_DIM:], self.space))

    def neighbors(self, vec, frozen: np.ndarray | None = None) -> list[np.ndarray]:
        """Distinct valid points one lattice step from ``vec``, after repair."""
        out: dict[tuple, np.ndarray] = {}
        base = tuple(np.asarray(vec, dtype=float).tolist())
        for y in self.lattice.neighbors(vec):
            if frozen is not None and np.any((y != vec)[frozen]):
                continue
            p = self.project(y)
            key = tuple(p.tolist())
            if key != base:
                out.setdefault(key, p)
        return list(out.values())

    def project(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float).copy()
        a = self.acc_slice.start
        vec[a + 1] = vec[a + 2] = 0.5 * (vec[a + 1] + vec[a + 2])  # the two spatial-tile entries move together
        acc = self.lattice.project(vec)[self.acc_slice]
        txf = repair_transformer(vec[:TXF_EMBEDDING_DIM], self.mode, self.space)
        return np.concatenate([np.array(encode_transformer(txf), dtype=float), acc])

    def initial(self, seed: int, n: int, frozen_acc: AcceleratorConfig | None = None) -> list[np.ndarray]:
        pairs = sample_space(seed, n, self.mode, self.space, stratified=True)
        if frozen_acc is not None:
            pairs = [(t, frozen_acc) for t, _ in pairs]
        return [self.encode(t, a) for t, a in pairs]

    def random(self, rng: np.random.Generator, frozen_acc: AcceleratorConfig | None = None) -> np.ndarray:
        t, a = sample_space(int(rng.integers(2 ** 31)), 1, self.mode, self.space)[0]
        return self.encode(t, frozen_acc or a)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constraints:
    max_layers: int | None = None
    max_area_mm2: float | None = None
    max_latency_ms: float | None = None   # per sequence
    max_energy_j: float | None = None     # per sequence, dynamic + leakage

    def check_transformer(self, txf: TransformerConfig) -> str | None:
        if self.max_layers is not None and txf.num_layers > self.max_layers:
            return f"{txf.num_layers} layers > {self.max_layers}"
        return None

    def check_report(self, raw: dict) -> str | None:
        if self.max_area_mm2 is not None and raw["area"] > self.max_area_mm2:
            return f"area {raw['area']:.3g} mm2 > {self.max_area_mm2}"
        if self.max_latency_ms is not None and raw["latency"] > self.max_latency_ms:
            return f"latency {raw['latency']:.3g} ms > {self.max_latency_ms}"
        if self.max_energy_j is not None and raw["dynamic_energy"] + raw["leakage_energy"] > self.max_energy_j:
            return "energy over budget"
        return None


@dataclass
class EvalPoint:
    x_txf: list
    x_acc: list
    measures: dict | None
    raw: dict | None
    performance: float
    valid: bool
    reason: str = ""


@dataclass(frozen=True)
class EvalSettings:
    seq_len: int = 32
    mode: str = "inference"
    max_ops: int = 1000
    fuse_heads: bool = True
    tau_i: float = 0.6745
    tau_t: float = 1e-4

    def key(self, calib: CalibrationTable) -> dict:
        d = asdict(self)
        d["calib_version"] = calib.calib_version
        d["calib_source"] = calib.source
        d["reference_mode"] = "training"
        return d


def simulate_pair(txf: TransformerConfig, acc: AcceleratorConfig, settings: EvalSettings,
                  calib: CalibrationTable, mode: str | None = None):
    mode = mode or settings.mode
    g = build_graph(txf, settings.seq_len, mode, batch=acc.batch_size, activation=acc.activation,
                    fuse_heads=settings.fuse_heads, validation=ValidationMode.EXTENDED)
    th = PruneThresholds(settings.tau_i, settings.tau_t)
    table = insert_prune_ops(tile_graph(g, acc.batch_tile, acc.spatial_tile, max_ops=settings.max_ops), th, mode)
    sched = assign_and_order(table, acc, calib=calib)
    return simulate(sched, acc, calib, thresholds=th)


def raw_measures(report) -> dict:
    return {"latency": report.latency_ms_per_seq, "area": report.area_mm2,
            "dynamic_energy": report.dynamic_energy_j / max(1, report.sequences),
            "leakage_energy": report.leakage_energy_j / max(1, report.sequences)}


def corner_pair(space: DesignSpace = DEFAULT_SPACE) -> tuple[TransformerConfig, AcceleratorConfig]:
    """Largest value of every accelerator field (memory: last listed) and
    the deepest strict transformer with the widest layers."""
    acc = AcceleratorConfig(max(space.batch_tile), max(space.spatial_tile), "GeLU", max(space.num_pes),
                            max(space.lanes_per_pe), max(space.macs_per_lane), max(space.softmax_per_pe),
                            max(space.batch_size), max(space.act_buffer_mb), max(space.weight_buffer_mb),
                            max(space.mask_buffer_mb), MemoryConfig(*space.memory[-1]))
    layer = LayerConfig(max(space.hidden), (HeadOp("SA-WMA"),) * max(space.num_heads),
                        (max(space.ff_dims),) * max(space.ff_stack))
    return TransformerConfig((layer,) * max(space.num_layers)), acc


def compute_reference_maxima(settings: EvalSettings = EvalSettings(), calib: CalibrationTable | None = None,
                             space: DesignSpace = DEFAULT_SPACE) -> ReferenceMaxima:
    calib = calib or load_calibration()
    txf, acc = corner_pair(space)
    rep = simulate_pair(txf, acc, settings, calib, mode="training")
    raw = raw_measures(rep)
    return ReferenceMaxima(raw["latency"], raw["area"], raw["dynamic_energy"], raw["leakage_energy"],
                           settings.key(calib))


@dataclass
class Evaluator:
    settings: EvalSettings = field(default_factory=EvalSettings)
    weights: PerfWeights = DEFAULT_WEIGHTS
    constraints: Constraints = field(default_factory=Constraints)
    oracle: Callable | None = None
    calib: CalibrationTable | None = None
    maxima: ReferenceMaxima | None = None
    validation: ValidationMode = ValidationMode.STRICT
    space: DesignSpace = DEFAULT_SPACE

    def __post_init__(self):
        self.calib = self.calib or load_calibration()
        self.oracle = self.oracle or SyntheticOracle()
        if self.maxima is None:
            try:
                shipped = ReferenceMaxima.load()
            except FileNotFoundError:
                shipped = None
            if shipped is not None and shipped.settings == self.settings.key(self.calib):
                self.maxima = shipped
            else:
                self.maxima = compute_reference_maxima(self.settings, self.calib, self.space)
        self.joint = JointSpace(self.validation, self.space)
        self.cache: dict[tuple, EvalPoint] = {}

    def _invalid(self, vec, reason: str) -> EvalPoint:
        vec = list(map(float, vec))
        return EvalPoint(vec[:TXF_EMBEDDING_DIM], vec[TXF_EMBEDDING_DIM:], None, None, P_MIN, False, reason)

    def evaluate_uncached(self, vec) -> EvalPoint:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.joint.dim:
            return self._invalid(np.zeros(self.joint.dim), f"embedding length {vec.size}")
        txf, acc = self.joint.decode(vec)
        if not txf:
            return self._invalid(vec, f"transformer: {txf.reason if isinstance(txf, Invalid) else 'invalid'}")
        if not acc:
            return self._invalid(vec, f"accelerator: {acc.reason if isinstance(acc, Invalid) else 'invalid'}")
        rep = validate_accelerator(acc, ValidationMode.EXTENDED, self.space)
        if not rep.valid:
            return self._invalid(vec, "; ".join(map(str, rep.violations)))
        why = self.constraints.check_transformer(txf)
        if why:
            return self._invalid(vec, why)
        try:
            report = simulate_pair(txf, acc, self.settings, self.calib)
        except (BufferOverflow, InvalidConfig, ValueError) as e:
            return self._invalid(vec, f"{type(e).__name__}: {e}")
        raw = raw_measures(report)
        why = self.constraints.check_report(raw)
        if why:
            return self._invalid(vec, why)
        accuracy = float(self.oracle(txf))
        m = normalize_measures(raw, self.maxima, accuracy)
        raw["accuracy"] = accuracy
        p = performance(m, self.weights)
        return EvalPoint(list(map(float, vec[:TXF_EMBEDDING_DIM])), list(map(float, vec[TXF_EMBEDDING_DIM:])), m, raw,
                         p, True)

    def evaluate(self, vec) -> EvalPoint:
        key = tuple(np.asarray(vec, dtype=float).tolist())
        got = self.cache.get(key)
        if got is None:
            got = self.evaluate_uncached(vec)
            self.cache[key] = got
        return got

    def evaluate_many(self, vecs: list[np.ndarray], workers: int = 1) -> list[EvalPoint]:
        keys = [tuple(np.asarray(v, dtype=float).tolist()) for v in vecs]
        todo = [k for k in dict.fromkeys(keys) if k not in self.cache]
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for k, pt in zip(todo, ex.map(self.evaluate_uncached, [np.array(k) for k in todo])):
                    self.cache[k] = pt
        else:
            for k in todo:
                self.cache[k] = self.evaluate_uncached(np.array(k))
        return [self.cache[k] for k in keys]

    def __getstate__(self):
        d = dict(self.__dict__)
        d["cache"] = {}
        return d


def evaluate_pair(x_txf, x_acc, weights: PerfWeights = DEFAULT_WEIGHTS, mode: str = "inference",
                  evaluator: Evaluator | None = None, **kw) -> EvalPoint:
    """Score one embedding pair; any invalidity yields P_MIN."""
    if evaluator is None:
        evaluator = Evaluator(settings=EvalSettings(mode=mode, **kw), weights=weights)
    x_txf = list(x_txf) if x_txf is not None else []
    x_acc = list(x_acc) if x_acc is not None else []
    if len(x_txf) != TXF_EMBEDDING_DIM or len(x_acc) not in (12, ACC_DIM):
        return EvalPoint(x_txf, x_acc, None, None, P_MIN, False, "embedding length")
    if len(x_acc) == 12:
        x_acc = x_acc + [1.0]
    try:
        vec = np.array(x_txf + x_acc, dtype=float)
    except (TypeError, ValueError):
        return EvalPoint(x_txf, x_acc, None, None, P_MIN, False, "non-numeric embedding")
    if not np.isfinite(vec).all():
        return EvalPoint(x_txf, x_acc, None, None, P_MIN, False, "non-finite embedding")
    return evaluator.evaluate(vec)


# --------------------------------------------------------------------------
# search driver
# --------------------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    index: int
    x_txf: list
    x_acc: list
    measures: dict | None
    performance: float
    best_so_far: float
    valid: bool
    reason: str = ""


@dataclass
class SearchTrace:
    method: str
    seed: int
    budget: int
    rows: list[TraceRow]
    maxima: dict
    runtime_s: float = 0.0

    @property
    def best(self) -> TraceRow | None:
        valid = [r for r in self.rows if r.valid]
        if not valid:
            return None
        return max(valid, key=lambda r: (r.performance, -r.index))

    @property
    def final(self) -> float:
        return self.rows[-1].best_so_far if self.rows else P_MIN

    def best_curve(self) -> list[float]:
        return [r.best_so_far for r in self.rows]

    def to_jsonl(self) -> str:
        head = {"method": self.method, "seed": self.seed, "budget": self.budget, "reference_maxima": self.maxima}
        lines = [json.dumps({"header": head}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def run_search(budget: int, method: str = "transcode", seed: int = 0, weights: PerfWeights = DEFAULT_WEIGHTS,
               constraints: Constraints | None = None, evaluator: Evaluator | None = None, workers: int = 1,
               n_init: int = 32, q: int = 4, restarts: int = 16, steps: int = 30,
               freeze_acc: AcceleratorConfig | None = None, surrogate_kw: dict | None = None) -> SearchTrace:
    """Run one search and return its trace.

    All methods start from the same stratified initial pairs for a seed.
    ``random`` keeps sampling valid pairs; ``transcode`` fits the surrogate
    and proposes ``q`` pairs per round by gradient ascent on the inputs
    (one slot goes to the best-predicted lattice neighbour of the incumbent);
    ``hwnas`` does the same with the accelerator frozen (its gradient is
    zeroed) at ``freeze_acc``, or at the first initial pair's accelerator."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if budget < 1:
        raise ValueError("budget must be positive")
    t0 = time.perf_counter()
    if evaluator is None:
        evaluator = Evaluator(weights=weights, constraints=constraints or Constraints())
    else:
        evaluator = replace_evaluator(evaluator, weights, constraints)
    js = evaluator.joint
    n_init = min(n_init, budget)
    if method == "hwnas" and freeze_acc is None:
        freeze_acc = js.decode(js.initial(seed, 1)[0])[1]
    frozen = freeze_acc if method == "hwnas" else None
    rng = np.random.default_rng(seed)
    X: list[np.ndarray] = []
    pts: list[EvalPoint] = []
    rows: list[TraceRow] = []
    seen: set = set()
    best = P_MIN

    def record(vecs, it):
        nonlocal best
        for v, pt in zip(vecs, evaluator.evaluate_many(vecs, workers)):
            X.append(v)
            pts.append(pt)
            seen.add(tuple(v.tolist()))
            if pt.valid:
                best = max(best, pt.performance)
            rows.append(TraceRow(it, len(rows), pt.x_txf, pt.x_acc, pt.measures, pt.performance, best, pt.valid,
                                 pt.reason))

    record(js.initial(seed, n_init, frozen), 0)
    it = 0
    fzmask = np.zeros(js.dim, dtype=bool)
    fzmask[js.acc_slice] = True
    while len(rows) < budget:
        it += 1
        k = min(q, budget - len(rows))
        if method == "random":
            props = []
            while len(props) < k:
                v = js.random(rng, frozen)
                if tuple(v.tolist()) not in seen or len(seen) > 10 ** 6:
                    props.append(v)
        else:
            kappa = kappa_schedule(len(rows), n_init, budget)
            y = np.array([p.performance for p in pts])
            sur = Surrogate(seed=seed * 100003 + it, **(surrogate_kw or {})).fit(np.stack(X) / js.scale, y)
            order = np.argsort(-y, kind="stable")
            top = [X[i] for i in order[: restarts // 4]]
            # jittered copies of the incumbents keep some proposals local
            jit = []
            for j in range(restarts // 4):
                noise = rng.normal(0.0, 0.08, js.dim) * js.scale
                if frozen is not None:
                    noise[fzmask] = 0.0
                jit.append(js.project(X[order[j % 3]] + noise))
            starts = top + jit
            starts += [js.random(rng, frozen) for _ in range(restarts - len(starts))]
            cands = gobi_candidates(sur, np.stack(starts), js.scale, js.project, kappa, steps,
                                    frozen=fzmask if frozen is not None else None)
            # one slot refines the incumbent: its best-predicted unseen neighbour
            local = []
            if k > 1:
                local = pick_proposals(sur, js.neighbors(X[order[0]], fzmask if frozen is not None else None),
                                       js.scale, 0.0, 1, seen)
            props = local + pick_proposals(sur, cands, js.scale, kappa, k - len(local),
                                           seen | {tuple(p.tolist()) for p in local})
            while len(props) < k:
                v = js.random(rng, frozen)
                if tuple(v.tolist()) not in seen:
                    props.append(v)
        record(props, it)
    return SearchTrace(method, seed, budget, rows, evaluator.maxima.to_dict(), time.perf_counter() - t0)


def replace_evaluator(ev: Evaluator, weights: PerfWeights | None, constraints: Constraints | None) -> Evaluator:
    """Same evaluator, or a copy when weights or constraints differ (the
    cache is only valid for one metric)."""
    if (weights is None or weights == ev.weights) and (constraints is None or constraints == ev.constraints):
        return ev
    out = Evaluator(ev.settings, weights or ev.weights, constraints or ev.constraints, ev.oracle, ev.calib,
                    ev.maxima, ev.validation, ev.space)
    return out
