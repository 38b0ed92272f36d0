"""Runtime magnitude pruning and the zero-free tile format.

Mask convention: bit 1 marks a pruned (zero) element.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROLES = ("weight", "activation", "gradient")


class EmptyCurve(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class MaskShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PruneThresholds:
    """tau_i governs forward activations, tau_t backward gradients. Weights
    use a static ratio unless an override threshold is given."""

    tau_i: float = 0.0
    tau_t: float = 0.0
    overrides: tuple = ()  # ((role, tau), ...)

    def __post_init__(self):
        if self.tau_i < 0 or self.tau_t < 0:
            raise ValueError("thresholds must be >= 0")
        for role, tau in self.overrides:
            if role not in ROLES or tau < 0:
                raise ValueError(f"bad override ({role}, {tau})")

    def for_role(self, role: str) -> float | None:
        for r, tau in self.overrides:
            if r == role:
                return tau
        if role == "activation":
            return self.tau_i
        if role == "gradient":
            return self.tau_t
        return None


@dataclass(frozen=True, eq=False)
class MaskedTile:
    shape: tuple
    values: np.ndarray  # zero-free payload, row-major order of kept elements
    mask: np.ndarray    # bool, True = pruned

    @property
    def elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def payload_bytes(self, elem_bytes: int) -> int:
        return self.nnz * elem_bytes

    @property
    def mask_bytes(self) -> int:
        return math.ceil(self.elements / 8)

    def packed_bytes(self, elem_bytes: int) -> int:
        return self.payload_bytes(elem_bytes) + self.mask_bytes


def prune_tile(t, tau: float) -> np.ndarray:
    """Zero every element with |v| < tau."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    t = np.asarray(t, dtype=float)
    return np.where(np.abs(t) >= tau, t, 0.0)


def prune_masked(t, tau: float) -> MaskedTile:
    """Prune and pack in one step; the mask also flags exact zeros."""
    return pack_zero_free(prune_tile(t, tau))


def pruning_ratio(t) -> float:
    if isinstance(t, MaskedTile):
        return float(t.mask.sum()) / t.elements if t.elements else 0.0
    t = np.asarray(t)
    return float(np.count_nonzero(t == 0)) / t.size if t.size else 0.0


def pack_zero_free(t) -> MaskedTile:
    t = np.asarray(t, dtype=float)
    mask = t == 0
    return MaskedTile(t.shape, t[~mask].copy(), mask)


def unpack(mt: MaskedTile) -> np.ndarray:
    if mt.mask.shape != tuple(mt.shape):
        raise MaskShapeMismatch(f"mask {mt.mask.shape} vs tile {mt.shape}")
    kept = int((~mt.mask).sum())
    if kept != mt.values.size:
        raise MaskShapeMismatch(f"{kept} unmasked slots vs {mt.values.size} values")
    out = np.zeros(mt.shape)
    out[~mt.mask] = mt.values
    return out


def zero_free_matmul(a: MaskedTile, b: MaskedTile) -> np.ndarray:
    """Tile product that only touches effectual pairs: for each k, the
    nonzeros of column k of A meet the nonzeros of row k of B."""
    A = unpack(a)
    B = unpack(b)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise MaskShapeMismatch(f"{A.shape} x {B.shape}")
    out = np.zeros((A.shape[0], B.shape[1]))
    for k in range(A.shape[1]):
        ri = np.flatnonzero(~a.mask[:, k])
        cj = np.flatnonzero(~b.mask[k, :])
        if ri.size and cj.size:
            out[np.ix_(ri, cj)] += np.outer(A[ri, k], B[k, cj])
    return out


def effectual_macs(a_mask: np.ndarray, b_mask: np.ndarray) -> int:
    """Multiply-accumulates with both operands kept."""
    col_nnz = (~np.asarray(a_mask, bool)).sum(axis=-2)
    row_nnz = (~np.asarray(b_mask, bool)).sum(axis=-1)
    return int(np.sum(col_nnz * row_nnz))


# --------------------------------------------------------------------------
# transfer curves
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SparsityCurve:
    role: str
    points: tuple[tuple[float, float], ...]
    kind: str = "all"  # layer-kind granularity

    def __post_init__(self):
        pts = tuple((float(t), float(r)) for t, r in self.points)
        for (t0, r0), (t1, r1) in zip(pts, pts[1:]):
            if t1 < t0 or r1 < r0 - 1e-12:
                raise ValueError("curve must be sorted by tau with non-decreasing rho")
        for _, r in pts:
            if not 0.0 <= r <= 1.0:
                raise ValueError("rho outside [0, 1]")
        object.__setattr__(self, "points", pts)

    @property
    def taus(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def rhos(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def rho_at(self, tau: float) -> float:
        if not self.points:
            raise EmptyCurve(self.role)
        return float(np.interp(tau, self.taus, self.rhos))

    def to_dict(self) -> dict:
        return {"role": self.role, "kind": self.kind, "points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityCurve":
        return cls(d["role"], tuple(tuple(p) for p in d["points"]), d.get("kind", "all"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SparsityCurve":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lookup_tau(curve: SparsityCurve, rho: float) -> float:
    """Inverse of the transfer curve by linear interpolation, clamped."""
    if not curve.points:
        raise EmptyCurve(curve.role)
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    taus, rhos = curve.taus, curve.rhos
    if rho <= rhos[0]:
        return float(taus[0])
    if rho >= rhos[-1]:
        return float(taus[-1])
    # first sample reaching rho; flat stretches resolve to their left end
    i = int(np.searchsorted(rhos, rho, side="left"))
    r0, r1 = rhos[i - 1], rhos[i]
    t0, t1 = taus[i - 1], taus[i]
    if r1 == r0:
        return float(t0)
    return float(t0 + (rho - r0) * (t1 - t0) / (r1 - r0))


def half_normal_curve(role: str, sigma: float, taus: Sequence[float]) -> SparsityCurve:
    """rho(tau) = P(|N(0, sigma^2)| < tau)."""
    from scipy.special import erf
    pts = [(float(t), float(erf(t / (sigma * math.sqrt(2.0))))) for t in sorted(taus)]
    return SparsityCurve(role, tuple(pts))


# sigma chosen so that P(|g| < 1e-4) = 0.9
GRAD_SIGMA = 1e-4 / (math.sqrt(2.0) * 1.1630871536766743)


def default_curves() -> dict[str, SparsityCurve]:
    act = half_normal_curve("activation", 1.0, np.linspace(0.0, 4.0, 81))
    grad = half_normal_curve("gradient", GRAD_SIGMA, np.linspace(0.0, 4e-4, 81))
    return {"activation": act, "gradient": grad}


DEFAULT_WEIGHT_RHO = 0.5


def role_ratios(curves: dict[str, SparsityCurve] | None, thresholds: PruneThresholds,
                weight_rho: float = DEFAULT_WEIGHT_RHO) -> dict[str, float]:
    """Expected pruning ratio per role under the given thresholds."""
    curves = curves if curves is not None else default_curves()
    out = {}
    for role in ROLES:
        tau = thresholds.for_role(role)
        if role == "weight" and tau is None:
            out[role] = float(weight_rho)
        elif role in curves:
            out[role] = curves[role].rho_at(tau)
        else:
            out[role] = 0.0
    return out


def tile_ratios(t: np.ndarray, tau: float, b: int, x: int) -> list[float]:
    """rho of every (b, x, x) tile of a 3-D tensor, real elements only."""
    t = np.asarray(t)
    if t.ndim == 2:
        t = t[None]
    B, R, C = t.shape
    out = []
    small = (np.abs(t) < tau) | (t == 0)
    for b0 in range(0, B, b):
        for r0 in range(0, R, x):
            for c0 in range(0, C, x):
                blk = small[b0:b0 + b, r0:r0 + x, c0:c0 + x]
                out.append(float(blk.mean()))
    return out


def profile_curve(graph, task_inputs: Iterable, role: str, tau_grid: Sequence[float], params=None,
                  b: int = 1, x: int = 16, seed: int = 0) -> SparsityCurve:
    """Run the graph on each input and average tile pruning ratios of the
    tensors of ``role`` at every grid threshold."""
    from .graph import evaluate, init_params

    if role not in ROLES:
        raise ValueError(f"unknown role {role}")
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise EmptyCurve("empty tau grid")
    if any(t1 < t0 for t0, t1 in zip(grid, grid[1:])):
        raise ValueError("tau grid must be ascending")
    inputs = list(task_inputs)
    if not inputs:
        raise EmptyInput("no task inputs")
    params = params if params is not None else init_params(graph, seed)
    rng = np.random.default_rng(seed)
    sums = np.zeros(len(grid))
    count = 0
    for x_in in inputs:
        feeds = {"x": x_in}
        if "dy" in graph.inputs:
            feeds["dy"] = rng.normal(size=graph.nodes[graph.inputs["dy"]].shape)
        vals = evaluate(graph, feeds, params)
        for tensor in _role_tensors(graph, vals, role):
            for i, tau in enumerate(grid):
                rs = tile_ratios(tensor, tau, b, x)
                sums[i] += sum(rs)
            count += len(tile_ratios(tensor, 0.0, b, x))
    if count == 0:
        raise EmptyInput(f"graph has no {role} tensors")
    rhos = np.maximum.accumulate(sums / count)  # float noise only; set inclusion already orders them
    return SparsityCurve(role, tuple(zip(grid, np.clip(rhos, 0.0, 1.0))))


def _role_tensors(graph, vals, role):
    for node in graph.nodes:
        if node.is_layout:
            continue
        if role == "weight" and node.kind == "Weight":
            yield vals[node.id]
        elif role == "activation" and node.phase == "forward" and not node.is_source:
            yield vals[node.id]
        elif role == "activation" and node.kind == "Input" and node.name == "x":
            yield vals[node.id]
        elif role == "gradient" and node.phase == "backward" and not node.is_layout:
            yield vals[node.id]


# --------------------------------------------------------------------------
# memory footprint
# --------------------------------------------------------------------------


def tensor_roles(graph) -> list[tuple[int, str]]:
    """(node id, role) of every tensor a training step keeps in storage."""
    out = []
    for node in graph.nodes:
        if node.is_layout or node.kind == "Band":
            continue
        if node.kind in ("Weight", "Const"):
            out.append((node.id, "weight"))
        elif node.phase == "forward":
            out.append((node.id, "activation"))
        elif node.phase == "backward":
            out.append((node.id, "gradient"))
    return out


def pruned_count(elements: int, rho: float) -> int:
    return int(round(rho * elements))


def memory_footprint(graph, ratios: dict[str, float] | None, bits: int = 16) -> int:
    """Bytes to hold every stored tensor; dense when ``ratios`` is None,
    otherwise zero-free payload plus one mask bit per element."""
    eb = bits // 8
    total = 0
    for nid, role in tensor_roles(graph):
        n = graph.nodes[nid].size
        if ratios is None:
            total += n * eb
        else:
            total += (n - pruned_count(n, ratios[role])) * eb + math.ceil(n / 8)
    return total


def prune_to_ratio(t: np.ndarray, rho: float) -> np.ndarray:
    """Zero the round(rho * n) smallest-magnitude elements (stable order)."""
    flat = np.asarray(t, dtype=float).ravel().copy()
    k = pruned_count(flat.size, rho)
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0.0
    return flat.reshape(np.shape(t))
