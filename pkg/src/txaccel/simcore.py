"""Cycle-level execution of a Schedule on an accelerator config.

Timing comes from the event replay kernel; energy and area come from a
calibration table (JSON, versioned with ``calib_version``).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .dynaprop import DEFAULT_WEIGHT_RHO, PruneThresholds, role_ratios
from .scheduler import (ELEMWISE, KIND_NAMES, LANE, LAYERNORM, LOAD, LNM, MATMUL, MEM, PRN, PRUNE, ROLE_NAMES,
                        SMX, SOFTMAX, STORE, Schedule, module_counts, op_widths)
from .spaces import AcceleratorConfig, MemoryConfig

CALIB_VERSION = 1
CALIB_ENV = "TXACCEL_CALIBRATION"

MODULE_KEYS = ("mac_unit", "mac_lane_overhead", "softmax", "layernorm", "dynaprop", "buffer_per_mb",
               "memory_controller")
MODULE_FIELDS = ("area_mm2", "energy_pj", "leakage_mw")
TIMING_KEYS = ("elementwise_cycles_per_element", "elementwise_energy_pj", "softmax_cycles_per_element",
               "layernorm_cycles_per_element", "dynaprop_cycles_per_tile")
MEMORY_FIELDS = ("latency_cycles", "bandwidth_bytes_per_cycle", "energy_pj_per_byte", "leakage_mw")

MB = 1 << 20


class IncompleteCalibration(ValueError):
    pass


class BufferOverflow(RuntimeError):
    """A single op's working set does not fit its buffer."""

    def __init__(self, msg: str, op: int = -1):
        super().__init__(msg)
        self.op = op


@dataclass(frozen=True)
class CalibrationTable:
    clock_mhz: float
    il_bits: int
    fl_bits: int
    modules: dict
    timing: dict
    memory: dict
    calib_version: int = CALIB_VERSION
    source: str = ""

    @property
    def word_bytes(self) -> float:
        return (self.il_bits + self.fl_bits) / 8.0

    def module(self, key: str, fld: str) -> float:
        return float(self.modules[key][fld])

    @classmethod
    def from_dict(cls, d: dict, source: str = "") -> "CalibrationTable":
        missing = [k for k in ("calib_version", "clock_mhz", "il_bits", "fl_bits", "modules", "timing", "memory")
                   if k not in d]
        for k in MODULE_KEYS:
            for f in MODULE_FIELDS:
                if k not in d.get("modules", {}) or f not in d["modules"][k]:
                    missing.append(f"modules.{k}.{f}")
        for k in TIMING_KEYS:
            if k not in d.get("timing", {}):
                missing.append(f"timing.{k}")
        for mt in ("RRAM", "DRAM", "HBM"):
            for f in MEMORY_FIELDS:
                if mt not in d.get("memory", {}) or f not in d["memory"][mt]:
                    missing.append(f"memory.{mt}.{f}")
        if missing:
            raise IncompleteCalibration("calibration missing: " + ", ".join(missing))
        if int(d["calib_version"]) != CALIB_VERSION:
            raise IncompleteCalibration(f"unsupported calib_version {d['calib_version']}")
        nums = [d["clock_mhz"], d["il_bits"], d["fl_bits"]]
        nums += [v for m in d["modules"].values() for v in m.values()]
        nums += list(d["timing"].values())
        nums += [v for m in d["memory"].values() for v in m.values()]
        if any(float(v) < 0 for v in nums):
            raise IncompleteCalibration("calibration entries must be >= 0")
        if float(d["clock_mhz"]) <= 0 or int(d["il_bits"]) + int(d["fl_bits"]) <= 0:
            raise IncompleteCalibration("clock and word width must be positive")
        return cls(float(d["clock_mhz"]), int(d["il_bits"]), int(d["fl_bits"]), d["modules"], d["timing"],
                   d["memory"], int(d["calib_version"]), source)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d


def load_calibration(path: str | Path | None = None) -> CalibrationTable:
    """Load a calibration table; falls back to $TXACCEL_CALIBRATION, then
    the shipped default."""
    path = path or os.environ.get(CALIB_ENV)
    if path:
        with open(path) as f:
            return CalibrationTable.from_dict(json.load(f), str(path))
    with resources.files("txaccel").joinpath("data/default_calibration.json").open() as f:
        return CalibrationTable.from_dict(json.load(f), "default")


# --------------------------------------------------------------------------
# cost formulas
# --------------------------------------------------------------------------


def mac_lane_cycles(tile: tuple[int, int, int], M: int, effectual_fraction: float = 1.0,
                    inner: int | None = None) -> int:
    """Cycles for one (b, x, y) tile product on one lane of M multipliers:
    ceil(effectual MACs / M) plus the adder-tree depth."""
    b, x, y = tile
    k = x if inner is None else inner
    eff = max(0.0, min(1.0, effectual_fraction))
    macs = b * x * k * y * eff
    return int(math.ceil(round(macs, 9) / M)) + int(math.log2(M))


def memory_transfer_cycles(nbytes: float, mem: MemoryConfig, calib: CalibrationTable) -> int:
    m = calib.memory[mem.type]
    return int(m["latency_cycles"]) + streaming_cycles(nbytes, mem, calib)


def streaming_cycles(nbytes: float, mem: MemoryConfig, calib: CalibrationTable) -> int:
    bw = mem.channels * float(calib.memory[mem.type]["bandwidth_bytes_per_cycle"])
    return int(math.ceil(nbytes / bw)) if nbytes > 0 else 0


def per_pe_area(cfg: AcceleratorConfig, calib: CalibrationTable) -> float:
    lane = cfg.macs_per_lane * calib.module("mac_unit", "area_mm2") + calib.module("mac_lane_overhead", "area_mm2")
    return (cfg.lanes_per_pe * lane + cfg.softmax_per_pe * calib.module("softmax", "area_mm2")
            + cfg.layernorm_per_pe * calib.module("layernorm", "area_mm2") + calib.module("dynaprop", "area_mm2"))


def buffer_mb(cfg: AcceleratorConfig) -> int:
    return cfg.act_buffer_mb + cfg.weight_buffer_mb + cfg.mask_buffer_mb


def area(cfg: AcceleratorConfig, calib: CalibrationTable | None = None) -> float:
    """Chip area in mm^2: PEs, buffers and the memory controller."""
    calib = calib or load_calibration()
    return (cfg.num_pes * per_pe_area(cfg, calib) + buffer_mb(cfg) * calib.module("buffer_per_mb", "area_mm2")
            + calib.module("memory_controller", "area_mm2"))


def leakage_power_mw(cfg: AcceleratorConfig, calib: CalibrationTable) -> float:
    lane = cfg.macs_per_lane * calib.module("mac_unit", "leakage_mw") + calib.module("mac_lane_overhead", "leakage_mw")
    pe = (cfg.lanes_per_pe * lane + cfg.softmax_per_pe * calib.module("softmax", "leakage_mw")
          + cfg.layernorm_per_pe * calib.module("layernorm", "leakage_mw") + calib.module("dynaprop", "leakage_mw"))
    return (cfg.num_pes * pe + buffer_mb(cfg) * calib.module("buffer_per_mb", "leakage_mw")
            + calib.module("memory_controller", "leakage_mw") + float(calib.memory[cfg.memory.type]["leakage_mw"]))


# --------------------------------------------------------------------------
# per-op costs
# --------------------------------------------------------------------------


def op_densities(table, ratios: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of nonzero operand elements for operand a and b of each op."""
    rho = np.array([ratios.get(r, 0.0) for r in ROLE_NAMES] + [0.0])
    ra = np.where(table.role_a >= 0, table.role_a, 3)
    rb = np.where(table.role_b >= 0, table.role_b, 3)
    return 1.0 - rho[ra], 1.0 - rho[rb]


def op_durations(table, acc: AcceleratorConfig, calib: CalibrationTable,
                 ratios: dict[str, float] | None = None, group: int = 1) -> np.ndarray:
    """Cycle count of every op. Memory ops get their streaming term only;
    access latency is added by the replay."""
    ratios = ratios or {}
    n = len(table)
    M = acc.macs_per_lane
    tm = calib.timing
    width = op_widths(table, acc, group)
    waves = -(-table.par // width)
    da, db = op_densities(table, ratios)
    eff = da * db
    dur = np.zeros(n, dtype=np.int64)
    k = table.kind
    mm = k == MATMUL
    per_tile = np.ceil(np.round(table.unit * eff, 9) / M).astype(np.int64) + int(math.log2(M))
    dur[mm] = (waves * table.ser * per_tile)[mm]
    el = k == ELEMWISE
    dur[el] = (waves * np.ceil(table.unit * tm["elementwise_cycles_per_element"] / M).astype(np.int64))[el]
    sm = k == SOFTMAX
    dur[sm] = (waves * np.ceil(table.unit * tm["softmax_cycles_per_element"]).astype(np.int64))[sm]
    ln = k == LAYERNORM
    dur[ln] = (waves * np.ceil(table.unit * tm["layernorm_cycles_per_element"]).astype(np.int64))[ln]
    pr = k == PRUNE
    dur[pr] = waves[pr] * int(tm["dynaprop_cycles_per_tile"])
    mem = (k == LOAD) | (k == STORE)
    bw = acc.memory.channels * float(calib.memory[acc.memory.type]["bandwidth_bytes_per_cycle"])
    dur[mem] = np.ceil(table.real[mem] * calib.word_bytes / bw).astype(np.int64)
    return np.maximum(dur, 1)


def dense_durations(table, acc: AcceleratorConfig, calib: CalibrationTable, group: int = 1) -> np.ndarray:
    return op_durations(table, acc, calib, {}, group)


def _residency_bytes(table, calib: CalibrationTable, ratios: dict[str, float]) -> np.ndarray:
    wb = calib.word_bytes
    da, _ = op_densities(table, ratios)
    out = np.zeros(len(table), dtype=np.int64)
    buf = table.res_buf
    el = table.res_el.astype(float)
    out[buf == 0] = np.ceil(el[buf == 0] * wb)
    w = buf == 1
    out[w] = np.ceil(el[w] * wb * da[w])       # weights kept zero-free after their load-time prune
    m = buf == 2
    out[m] = np.ceil(el[m] / 8.0)              # one mask bit per element
    return out


def _bank_ids(table, nbanks: int) -> np.ndarray:
    t = table.tile
    h = (table.node * 1000003 + t[:, 0] * 7919 + t[:, 1] * 104729 + t[:, 2] * 1299709) % max(1, nbanks)
    return h.astype(np.int64)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class SimReport:
    cycles: int
    latency_ms: float
    dynamic_energy_j: float
    energy_breakdown_j: dict
    leakage_energy_j: float
    area_mm2: float
    compute_stall_cycles: int
    memory_stall_cycles: int
    utilization: dict
    effectual_macs: int
    skipped_macs: int
    peak_buffer_bytes: dict
    spill_bytes: int
    sequences: int
    op_counts: dict
    ratios: dict
    calib_version: int
    manifest: dict = field(default_factory=dict)

    @property
    def total_energy_j(self) -> float:
        return self.dynamic_energy_j + self.leakage_energy_j

    @property
    def latency_ms_per_seq(self) -> float:
        return self.latency_ms / max(1, self.sequences)

    @property
    def energy_j_per_seq(self) -> float:
        return self.total_energy_j / max(1, self.sequences)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_energy_j"] = self.total_energy_j
        d["latency_ms_per_seq"] = self.latency_ms_per_seq
        d["energy_j_per_seq"] = self.energy_j_per_seq
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def accumulate_energy(table, acc: AcceleratorConfig, calib: CalibrationTable, ratios: dict[str, float],
                      cycles: int, spill_bytes: int = 0) -> tuple[dict, float, int, int]:
    """Dynamic energy per module (J), leakage energy (J), effectual and
    skipped MAC counts. Skipped MACs cost nothing."""
    pj = 1e-12
    wb = calib.word_bytes
    k = table.kind
    da, db = op_densities(table, ratios)
    mm = k == MATMUL
    real = table.real.astype(float)
    eff_macs = real[mm] * (da * db)[mm]
    n_eff = int(np.round(eff_macs.sum()))
    n_all = int(real[mm].sum())
    tm = calib.timing
    e = {
        "mac": float(eff_macs.sum()) * calib.module("mac_unit", "energy_pj") * pj,
        "mac_lane": float((table.par * table.ser)[mm].sum()) * calib.module("mac_lane_overhead", "energy_pj") * pj,
        "elementwise": float(real[k == ELEMWISE].sum()) * tm["elementwise_energy_pj"] * pj,
        "softmax": float(real[k == SOFTMAX].sum()) * calib.module("softmax", "energy_pj") * pj,
        "layernorm": float(real[k == LAYERNORM].sum()) * calib.module("layernorm", "energy_pj") * pj,
        "dynaprop": float(real[k == PRUNE].sum()) * calib.module("dynaprop", "energy_pj") * pj,
    }
    comp = k != LOAD
    comp &= k != STORE
    rd = (table.in_a * da + table.in_b * db)[comp].sum() * wb
    wr = table.out_el[comp].sum() * wb
    e["buffer"] = float(rd + wr) * calib.module("buffer_per_mb", "energy_pj") * pj
    mem_bytes = float(real[(k == LOAD) | (k == STORE)].sum()) * wb + 2.0 * spill_bytes
    e["memory"] = mem_bytes * float(calib.memory[acc.memory.type]["energy_pj_per_byte"]) * pj
    seconds = cycles / (calib.clock_mhz * 1e6)
    leak = leakage_power_mw(acc, calib) * 1e-3 * seconds
    return e, leak, n_eff, n_all - n_eff


def _union_len(iv: list[tuple[int, int]]) -> int:
    tot, cur_s, cur_e = 0, None, None
    for s, f in sorted(iv):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                tot += cur_e - cur_s
            cur_s, cur_e = s, f
        else:
            cur_e = max(cur_e, f)
    if cur_e is not None:
        tot += cur_e - cur_s
    return tot


def _merge(iv):
    out = []
    for s, f in sorted(iv):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], f)
        else:
            out.append([s, f])
    return out


def _minus(a, b) -> int:
    """Length of interval set a not covered by interval set b (both merged)."""
    tot = 0
    j = 0
    for s, f in a:
        cur = s
        while j < len(b) and b[j][1] <= cur:
            j += 1
        jj = j
        while jj < len(b) and b[jj][0] < f:
            if b[jj][0] > cur:
                tot += b[jj][0] - cur
            cur = max(cur, b[jj][1])
            jj += 1
        if cur < f:
            tot += f - cur
    return tot


def critical_path_cycles(schedule: Schedule, dur: np.ndarray, mem_latency: int) -> int:
    """Longest dependency chain, counting memory latency on memory ops."""
    t = schedule.table
    cls = t.cls
    d = dur + np.where(cls == MEM, mem_latency, 0)
    fin = np.zeros(len(t), dtype=np.int64)
    for o in range(len(t)):  # ids are topologically ordered
        deps = t.dep_idx[t.dep_ptr[o]:t.dep_ptr[o + 1]]
        s = int(fin[deps].max()) if deps.size else 0
        fin[o] = s + d[o]
    return int(fin.max()) if len(t) else 0


def simulate(schedule: Schedule, cfg: AcceleratorConfig | None = None, calib: CalibrationTable | None = None,
             curves=None, thresholds: PruneThresholds | None = None, ratios: dict[str, float] | None = None,
             weight_rho: float = DEFAULT_WEIGHT_RHO, sequences: int | None = None) -> SimReport:
    """Replay the schedule and account time, energy and area.

    Pruning ratios per role come from ``ratios`` when given, otherwise from
    the sparsity curves at the thresholds (tau_T only in training)."""
    cfg = cfg or schedule.acc
    calib = calib or load_calibration()
    table = schedule.table
    if ratios is None:
        thresholds = thresholds or PruneThresholds()
        ratios = role_ratios(curves, thresholds, weight_rho)
    ratios = {r: float(ratios.get(r, 0.0)) for r in ROLE_NAMES}
    if not table.has_prunes:
        ratios = {r: 0.0 for r in ROLE_NAMES}
    n = len(table)
    seqs = sequences if sequences is not None else (table.graph.batch if table.graph is not None else 1)
    a_mm2 = area(cfg, calib)
    if n == 0:
        e, leak, _, _ = accumulate_energy(table, cfg, calib, ratios, 0)
        return SimReport(0, 0.0, 0.0, e, leak, a_mm2, 0, 0, {k: 0.0 for k in ("lane", "softmax", "layernorm",
                         "dynaprop", "memory")}, 0, 0, {"activation": 0, "weight": 0, "mask": 0}, 0, seqs,
                         table.counts(), ratios, calib.calib_version)
    group = schedule.group
    dur = op_durations(table, cfg, calib, ratios, group)
    mem_lat = int(calib.memory[cfg.memory.type]["latency_cycles"])
    nbanks = cfg.memory.banks * cfg.memory.ranks
    cap = np.array([cfg.act_buffer_mb * MB, cfg.weight_buffer_mb * MB, cfg.mask_buffer_mb * MB], dtype=np.int64)
    # a single tile's operands must fit every buffer; beyond that the
    # buffers only cause spills or stalls
    tile_el = table.b * table.x * table.x
    need = np.array([2 * tile_el * calib.word_bytes, tile_el * calib.word_bytes, math.ceil(2 * tile_el / 8)])
    for i, name in enumerate(("activation", "weight", "mask")):
        if need[i] > cap[i]:
            raise BufferOverflow(f"a {table.b}x{table.x}x{table.x} tile needs {int(need[i])} B of {name} buffer, "
                                 f"capacity is {int(cap[i])} B")
    res = _residency_bytes(table, calib, ratios)
    # coarse loads stream through the weight buffer in tile-sized pieces
    wl = table.res_buf == 1
    res[wl] = np.minimum(res[wl], cap[1])
    cls = table.cls
    start, finish, peak, spill, status, blocked = kernels.replay(
        cls, schedule.pe, schedule.width, dur, table.dep_ptr, table.dep_idx, schedule.order, cfg.num_pes // group,
        module_counts(cfg, group), mem_lat, _bank_ids(table, nbanks), nbanks, table.res_buf, res, table.attached, cap)
    if status == kernels.STATUS_OVERFLOW:
        raise BufferOverflow(f"op {blocked} ({KIND_NAMES[table.kind[blocked]]}) does not fit the weight buffer "
                             f"of {cfg.weight_buffer_mb} MB", blocked)
    if status != kernels.STATUS_OK:
        raise RuntimeError("schedule replay deadlocked")
    start = np.asarray(start)
    finish = np.asarray(finish)
    cycles = int(finish.max())
    e, leak, n_eff, n_skip = accumulate_energy(table, cfg, calib, ratios, cycles, spill)
    busy = dur * schedule.width
    caps = {"lane": (LANE, cfg.lanes_per_pe), "softmax": (SMX, cfg.softmax_per_pe),
            "layernorm": (LNM, cfg.layernorm_per_pe), "dynaprop": (PRN, 1)}
    util = {name: float(busy[cls == c].sum()) / (cycles * cfg.num_pes * cnt) for name, (c, cnt) in caps.items()}
    memv = cls == MEM
    comp_iv = _merge(zip(start[~memv].tolist(), finish[~memv].tolist()))
    mem_iv = _merge(zip(start[memv].tolist(), finish[memv].tolist()))
    util["memory"] = _union_len([tuple(x) for x in mem_iv]) / cycles
    mem_stall = _minus(mem_iv, comp_iv)
    comp_stall = _minus(comp_iv, mem_iv) if mem_iv else 0
    return SimReport(
        cycles=cycles, latency_ms=cycles / (calib.clock_mhz * 1e3), dynamic_energy_j=float(sum(e.values())),
        energy_breakdown_j=e, leakage_energy_j=leak, area_mm2=a_mm2, compute_stall_cycles=int(comp_stall),
        memory_stall_cycles=int(mem_stall), utilization=util, effectual_macs=n_eff, skipped_macs=n_skip,
        peak_buffer_bytes={"activation": int(peak[0]), "weight": int(peak[1]), "mask": int(peak[2])},
        spill_bytes=int(spill), sequences=seqs, op_counts=table.counts(), ratios=ratios,
        calib_version=calib.calib_version)
