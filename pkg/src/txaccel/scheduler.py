"""Tiling of graph nodes into schedulable ops, prune insertion, PE
assignment, and the compute/memory stream split.

Ops live in a struct-of-arrays table. Each op may stand for several fine
(b, x, x) tiles when the graph is coarsened: ``par`` fine tiles run side
by side and ``ser`` of them run back to back. At granularity 1 every op
is exactly one fine tile.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynaprop import PruneThresholds
from .graph import (ELEMENTWISE_KINDS, ID, LAYOUT_KINDS, ROWWISE_KINDS, ZERO, EvalMode, Graph,
                    GraphNode)

MATMUL, SOFTMAX, LAYERNORM, ELEMWISE, PRUNE, LOAD, STORE = range(7)
KIND_NAMES = ("TileMatMulAcc", "TileSoftmax", "TileLayerNorm", "TileActivation", "TilePrune", "Load", "Store")
KIND_CODES = {n: i for i, n in enumerate(KIND_NAMES)}
LANE, SMX, LNM, PRN, MEM = range(5)
KIND_CLASS = (LANE, SMX, LNM, LANE, PRN, MEM, MEM)
WEIGHT, ACT, GRAD = 0, 1, 2
ROLE_NAMES = ("weight", "activation", "gradient")
PHASES = {"forward": 0, "backward": 1, "update": 2}
BUF_NONE, BUF_ACT, BUF_WEIGHT, BUF_MASK = -1, 0, 1, 2

POLICIES = {"least_loaded": 0, "round_robin": 1}


class CyclicGraph(ValueError):
    pass


@dataclass(frozen=True)
class TiledOp:
    id: int
    kind: str
    node: int
    tile: tuple[int, int, int, int]  # batch block, row block, col block, reduction step
    deps: tuple[int, ...]
    role: str | None = None


@dataclass(eq=False)
class OpTable:
    graph: Graph | None
    b: int
    x: int
    gb: int
    g: int
    kind: np.ndarray
    node: np.ndarray
    tile: np.ndarray      # (n, 4)
    par: np.ndarray
    ser: np.ndarray
    unit: np.ndarray      # padded work per fine tile: MACs or elements
    real: np.ndarray      # real MACs or elements
    role_a: np.ndarray
    role_b: np.ndarray
    phase: np.ndarray
    in_a: np.ndarray      # real elements read per operand
    in_b: np.ndarray
    out_el: np.ndarray    # real elements written
    res_buf: np.ndarray
    res_el: np.ndarray    # elements held in a buffer
    attached: np.ndarray
    dep_ptr: np.ndarray
    dep_idx: np.ndarray
    tau: np.ndarray       # threshold of prune ops, nan where static or absent
    has_prunes: bool = True

    def __len__(self) -> int:
        return int(self.kind.size)

    @property
    def cls(self) -> np.ndarray:
        return np.asarray(KIND_CLASS, dtype=np.int64)[self.kind]

    def deps(self, i: int) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dep_idx[self.dep_ptr[i]:self.dep_ptr[i + 1]])

    def op(self, i: int) -> TiledOp:
        k = int(self.kind[i])
        role = None
        if k == PRUNE or k in (LOAD, STORE):
            role = ROLE_NAMES[self.role_a[i]]
        return TiledOp(i, KIND_NAMES[k], int(self.node[i]), tuple(int(t) for t in self.tile[i]),
                       self.deps(i), role)

    def counts(self) -> dict[str, int]:
        c = Counter(int(k) for k in self.kind)
        return {KIND_NAMES[k]: c.get(k, 0) for k in range(len(KIND_NAMES))}

    def fine_counts(self) -> dict[str, int]:
        """Op counts at granularity 1, independent of coarsening."""
        fine = self.par * self.ser
        out = {}
        for k in range(len(KIND_NAMES)):
            out[KIND_NAMES[k]] = int(fine[self.kind == k].sum()) if k not in (LOAD, STORE) else int((self.kind == k).sum())
        return out


# --------------------------------------------------------------------------
# batch-map helpers
# --------------------------------------------------------------------------


def _map_range(m: tuple, v0: int, v1: int) -> tuple[int, int]:
    kind = m[0]
    if kind == "id":
        return v0, v1
    if kind == "zero":
        return 0, 1
    if kind == "mod":
        s = v0 % m[1]
        return s, s + (v1 - v0)
    if kind == "div":
        return v0 // m[1], (v1 - 1) // m[1] + 1
    raise ValueError(m)


def _fine_out(m: tuple, fv: int) -> int:
    return fv if m[0] in ("id", "mod") else 1


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


def matmul_chains(node: GraphNode, bt: int, X: int):
    """Output tile -> ordered reduction steps (virtual batch block, k block)."""
    vb = node.attrs["vbatch"]
    P, R = node.shape[1], node.shape[2]
    Q = node.attrs["inner"]
    mo = node.attrs["mo"]
    chains: dict[tuple, list] = {}
    for v in range(_cdiv(vb, bt)):
        o0, _ = _map_range(mo, v * bt, min(vb, (v + 1) * bt))
        ob = o0 // bt
        for i in range(_cdiv(P, X)):
            for j in range(_cdiv(R, X)):
                lst = chains.setdefault((ob, i, j), [])
                for k in range(_cdiv(Q, X)):
                    lst.append((v, k))
    return dict(sorted(chains.items()))


def tile_node(node: GraphNode, b: int, x: int) -> list[TiledOp]:
    """Tiles of one node on its own, with reduction-chain dependencies only."""
    ops: list[TiledOp] = []
    if node.kind == "MatMul":
        for (ob, i, j), steps in matmul_chains(node, b, x).items():
            prev = None
            for v, k in steps:
                oid = len(ops)
                ops.append(TiledOp(oid, "TileMatMulAcc", node.id, (ob if node.attrs["mo"] != ID else v, i, j, k),
                                   () if prev is None else (prev,)))
                prev = oid
        return ops
    if node.is_source or node.is_layout:
        return ops
    kind = "TileSoftmax" if node.kind in ("Softmax", "SoftmaxGrad") else \
        "TileLayerNorm" if node.kind in ("LayerNorm", "LayerNormGrad") else \
        "TileMatMulAcc" if node.kind == "ConvGrad" else "TileActivation"
    B, R, C = node.shape
    for bb in range(_cdiv(B, b)):
        for i in range(_cdiv(R, x)):
            for j in range(_cdiv(C, x)):
                ops.append(TiledOp(len(ops), kind, node.id, (bb, i, j, 0), ()))
    return ops


def execute_tiled(ops: list[TiledOp], a: np.ndarray, bmat: np.ndarray, b: int, x: int) -> np.ndarray:
    """Run TileMatMulAcc ops of an (id-mapped) batched matmul on zero-padded
    tiles and crop the result."""
    a = np.asarray(a, dtype=float)
    bmat = np.asarray(bmat, dtype=float)
    B, P, Q = a.shape
    R = bmat.shape[2]
    pad = lambda n, s: _cdiv(n, s) * s
    ap = np.zeros((pad(B, b), pad(P, x), pad(Q, x)))
    ap[:B, :P, :Q] = a
    bp = np.zeros((pad(B, b), pad(Q, x), pad(R, x)))
    bp[:B, :Q, :R] = bmat
    out = np.zeros((pad(B, b), pad(P, x), pad(R, x)))
    for op in ops:
        if op.kind != "TileMatMulAcc":
            continue
        bb, i, j, k = op.tile
        sb = slice(bb * b, (bb + 1) * b)
        out[sb, i * x:(i + 1) * x, j * x:(j + 1) * x] += (
            ap[sb, i * x:(i + 1) * x, k * x:(k + 1) * x] @ bp[sb, k * x:(k + 1) * x, j * x:(j + 1) * x])
    return out[:B, :P, :R]


# --------------------------------------------------------------------------
# whole-graph tiling
# --------------------------------------------------------------------------


def _base(graph: Graph, nid: int) -> GraphNode:
    node = graph.nodes[nid]
    while node.kind in LAYOUT_KINDS:
        node = graph.nodes[node.preds[0]]
    return node


def node_role(graph: Graph, nid: int) -> int:
    node = _base(graph, nid)
    if node.kind in ("Weight", "Const", "Band"):
        return WEIGHT
    if node.kind == "Input":
        return GRAD if node.name == "dy" else ACT
    if node.phase == "forward":
        return ACT
    if node.phase == "backward":
        return GRAD
    return WEIGHT


class _Tiler:
    def __init__(self, graph: Graph, b: int, x: int, gb: int, g: int, prune: bool):
        self.graph = graph
        self.b, self.x = b, x
        self.bt, self.X = b * gb, x * g
        self.gb, self.g = gb, g
        self.prune = prune
        self.cols: dict[str, list] = {k: [] for k in (
            "kind", "node", "tile", "par", "ser", "unit", "real", "role_a", "role_b", "phase",
            "in_a", "in_b", "out_el", "res_buf", "res_el", "attached")}
        self.deps: list[list[int]] = []
        self.fin: dict[int, np.ndarray] = {}
        self.src_ops: dict[tuple, int] = {}
        self.prunes: dict[tuple, int] = {}

    # -- op creation
    def add(self, kind, node, tile, par, ser, unit, real, role_a=-1, role_b=-1, phase=0,
            in_a=0, in_b=0, out_el=0, res_buf=BUF_NONE, res_el=0, attached=-1, deps=()) -> int:
        c = self.cols
        oid = len(c["kind"])
        for key, val in (("kind", kind), ("node", node), ("tile", tile), ("par", par), ("ser", ser),
                         ("unit", unit), ("real", real), ("role_a", role_a), ("role_b", role_b),
                         ("phase", phase), ("in_a", in_a), ("in_b", in_b), ("out_el", out_el),
                         ("res_buf", res_buf), ("res_el", res_el), ("attached", attached)):
            c[key].append(val)
        self.deps.append(list(dict.fromkeys(deps)))
        return oid

    def fine(self, n: int, size: int) -> int:
        return _cdiv(n, size)

    # -- region providers
    def provide(self, nid: int, b0, b1, r0, r1, c0, c1, consumer: int) -> list[int]:
        node = self.graph.nodes[nid]
        k = node.kind
        if k == "Transpose":
            return self.provide(node.preds[0], b0, b1, c0, c1, r0, r1, consumer)
        if k == "Concat":
            B = node.attrs["batch"]
            out = []
            for p, (g, d, col0) in zip(node.preds, node.attrs["layout"]):
                for j in range(g):
                    h0 = col0 + j * d
                    lo, hi = max(c0, h0), min(c1, h0 + d)
                    if lo < hi:
                        out += self.provide(p, j * B + b0, j * B + b1, r0, r1, lo - h0, hi - h0, consumer)
            return out
        if k == "Slice":
            a = node.attrs
            B, d = a["batch"], a["d"]
            out = []
            for j in range(b0 // B, (b1 - 1) // B + 1):
                s0, s1 = max(b0, j * B) - j * B, min(b1, (j + 1) * B) - j * B
                base = a["col0"] + j * d
                out += self.provide(node.preds[0], s0, s1, r0, r1, base + c0, base + c1, consumer)
            return out
        bt, X = self.bt, self.X
        if node.is_source:
            out = []
            for bb in range(b0 // bt, (b1 - 1) // bt + 1):
                for i in range(r0 // X, (r1 - 1) // X + 1):
                    for j in range(c0 // X, (c1 - 1) // X + 1):
                        out.append(self.source_tile(node, bb, i, j, consumer))
            return out
        grid = self.fin[nid]
        return grid[b0 // bt:(b1 - 1) // bt + 1, r0 // X:(r1 - 1) // X + 1, c0 // X:(c1 - 1) // X + 1].ravel().tolist()

    def source_tile(self, node: GraphNode, bb, i, j, consumer) -> int:
        key = (node.id, bb, i, j, consumer)
        got = self.src_ops.get(key)
        if got is not None:
            return got
        B, R, C = node.shape
        bt, X, b, x = self.bt, self.X, self.b, self.x
        rb, rr, rc = min(B, (bb + 1) * bt) - bb * bt, min(R, (i + 1) * X) - i * X, min(C, (j + 1) * X) - j * X
        el = rb * rr * rc
        par = self.fine(rb, b) * self.fine(rr, x) * self.fine(rc, x)
        role = node_role(self.graph, node.id)
        phase = PHASES[self.graph.nodes[consumer].phase]
        if role == WEIGHT:
            ld = self.add(LOAD, node.id, (bb, i, j, 0), par, 1, 0, el, WEIGHT, -1, phase,
                          out_el=el, res_buf=BUF_WEIGHT, res_el=el)
            if self.prune:
                pr = self.add(PRUNE, node.id, (bb, i, j, 0), par, 1, b * x * x, el, WEIGHT, -1, phase,
                              in_a=el, out_el=el, res_buf=BUF_MASK, res_el=el, attached=ld, deps=(ld,))
            else:
                pr = ld
        else:
            pr = self.add(LOAD, node.id, (bb, i, j, 0), par, 1, 0, el, role, -1, phase,
                          out_el=el, res_buf=BUF_ACT, res_el=el)
        self.src_ops[key] = pr
        return pr

    def operand(self, consumer: int, slot: int, pred: int, b0, b1, r0, r1, c0, c1) -> list[int]:
        """Producers of an operand region of a lane op; activation and
        gradient operands pass through one prune per (consumer, slot, region)."""
        role = node_role(self.graph, pred)
        if not self.prune or role == WEIGHT:
            return self.provide(pred, b0, b1, r0, r1, c0, c1, consumer)
        key = (consumer, slot, b0, r0, c0)
        got = self.prunes.get(key)
        if got is not None:
            return [got]
        deps = self.provide(pred, b0, b1, r0, r1, c0, c1, consumer)
        b, x = self.b, self.x
        el = (b1 - b0) * (r1 - r0) * (c1 - c0)
        par = self.fine(b1 - b0, b) * self.fine(r1 - r0, x) * self.fine(c1 - c0, x)
        pr = self.add(PRUNE, pred, (b0 // self.bt, r0 // self.X, c0 // self.X, slot), par, 1, b * x * x, el,
                      role, -1, PHASES[self.graph.nodes[consumer].phase], in_a=el, out_el=el,
                      res_buf=BUF_MASK, res_el=el, deps=deps)
        self.prunes[key] = pr
        return [pr]

    # -- node kinds
    def matmul(self, node: GraphNode):
        a, bsrc = node.preds
        ma, mb, mo = node.attrs["ma"], node.attrs["mb"], node.attrs["mo"]
        vb = node.attrs["vbatch"]
        P, R = node.shape[1], node.shape[2]
        Q = node.attrs["inner"]
        bt, X, b, x = self.bt, self.X, self.b, self.x
        ph = PHASES[node.phase]
        ra, rbr = node_role(self.graph, a), node_role(self.graph, bsrc)
        grid = np.full((_cdiv(node.shape[0], bt), _cdiv(P, X), _cdiv(R, X)), -1, dtype=np.int64)
        for (ob, i, j), steps in matmul_chains(node, bt, X).items():
            r0, r1 = i * X, min(P, (i + 1) * X)
            c0, c1 = j * X, min(R, (j + 1) * X)
            prev = -1
            for v, k in steps:
                v0, v1 = v * bt, min(vb, (v + 1) * bt)
                k0, k1 = k * X, min(Q, (k + 1) * X)
                deps = [] if prev < 0 else [prev]
                deps += self.operand(node.id, 0, a, *_map_range(ma, v0, v1), r0, r1, k0, k1)
                deps += self.operand(node.id, 1, bsrc, *_map_range(mb, v0, v1), k0, k1, c0, c1)
                vr, pr, cr, kr = v1 - v0, r1 - r0, c1 - c0, k1 - k0
                fv = self.fine(vr, b)
                nfo = _fine_out(mo, fv)
                par = self.fine(pr, x) * self.fine(cr, x) * nfo
                ser = self.fine(kr, x) * (fv // nfo)
                out_entries = vr if mo[0] in ("id", "mod") else 1
                prev = self.add(MATMUL, node.id, (ob, i, j, k), par, ser, b * x ** 3,
                                vr * pr * cr * kr, ra, rbr, ph, in_a=vr * pr * kr, in_b=vr * kr * cr,
                                out_el=out_entries * pr * cr, deps=deps)
            grid[ob, i, j] = prev
            # final step holds the finished output tile
            ob_rows = min(node.shape[0], (ob + 1) * bt) - ob * bt
            self.cols["res_buf"][prev] = BUF_ACT
            self.cols["res_el"][prev] = ob_rows * (r1 - r0) * (c1 - c0)
        self.fin[node.id] = grid

    def convgrad(self, node: GraphNode):
        delta, p = node.preds
        kk = node.attrs["k"]
        half = kk // 2
        mo = node.attrs["mo"]
        Bv, N, C = self.graph.nodes[delta].shape
        bt, X, b, x = self.bt, self.X, self.b, self.x
        ph = PHASES[node.phase]
        grid = np.full((_cdiv(node.shape[0], bt), 1, 1), -1, dtype=np.int64)
        prev_of: dict[int, int] = {}
        step = Counter()
        for v in range(_cdiv(Bv, bt)):
            v0, v1 = v * bt, min(Bv, (v + 1) * bt)
            ob = _map_range(mo, v0, v1)[0] // bt
            for i in range(_cdiv(N, X)):
                r0, r1 = i * X, min(N, (i + 1) * X)
                h0, h1 = max(0, r0 - half), min(N, r1 + half)
                for j in range(_cdiv(C, X)):
                    c0, c1 = j * X, min(C, (j + 1) * X)
                    deps = [prev_of[ob]] if ob in prev_of else []
                    deps += self.operand(node.id, 0, delta, v0, v1, r0, r1, c0, c1)
                    deps += self.operand(node.id, 1, p, v0, v1, h0, h1, c0, c1)
                    vr, rr, cr = v1 - v0, r1 - r0, c1 - c0
                    par = self.fine(vr, b) * self.fine(rr, x) * self.fine(cr, x)
                    op = self.add(MATMUL, node.id, (ob, 0, 0, step[ob]), par, 1, kk * b * x * x,
                                  kk * vr * rr * cr, GRAD, node_role(self.graph, p), ph,
                                  in_a=vr * rr * cr, in_b=vr * (h1 - h0) * cr, out_el=kk, deps=deps)
                    step[ob] += 1
                    prev_of[ob] = op
        for ob, op in prev_of.items():
            grid[ob, 0, 0] = op
            self.cols["res_buf"][op] = BUF_ACT
            self.cols["res_el"][op] = node.shape[2] * (min(node.shape[0], (ob + 1) * bt) - ob * bt)
        self.fin[node.id] = grid

    def tilewise(self, node: GraphNode, kind: int):
        B, R, C = node.shape
        bt, X, b, x = self.bt, self.X, self.b, self.x
        rowwise = node.kind in ROWWISE_KINDS
        ph = PHASES[node.phase]
        role = node_role(self.graph, node.preds[0])
        grid = np.full((_cdiv(B, bt), _cdiv(R, X), _cdiv(C, X)), -1, dtype=np.int64)
        row_deps: dict[tuple, list] = {}
        for bb in range(grid.shape[0]):
            b0, b1 = bb * bt, min(B, (bb + 1) * bt)
            for i in range(grid.shape[1]):
                r0, r1 = i * X, min(R, (i + 1) * X)
                if rowwise:
                    deps = []
                    for p in node.preds:
                        deps += self.provide(p, b0, b1, r0, r1, 0, C, node.id)
                for j in range(grid.shape[2]):
                    c0, c1 = j * X, min(C, (j + 1) * X)
                    if not rowwise:
                        deps = []
                        for p in node.preds:
                            deps += self.provide(p, b0, b1, r0, r1, c0, c1, node.id)
                    el = (b1 - b0) * (r1 - r0) * (c1 - c0)
                    par = self.fine(b1 - b0, b) * self.fine(r1 - r0, x) * self.fine(c1 - c0, x)
                    grid[bb, i, j] = self.add(kind, node.id, (bb, i, j, 0), par, 1, b * x * x, el, role, -1, ph,
                                              in_a=el * len(node.preds), out_el=el, res_buf=BUF_ACT, res_el=el,
                                              deps=deps)
        self.fin[node.id] = grid

    def stores(self, nid: int, role: int):
        node = self.graph.nodes[nid]
        B, R, C = node.shape
        bt, X, b, x = self.bt, self.X, self.b, self.x
        grid = self.fin[nid]
        ph = PHASES[node.phase]
        for bb in range(grid.shape[0]):
            for i in range(grid.shape[1]):
                for j in range(grid.shape[2]):
                    el = (min(B, (bb + 1) * bt) - bb * bt) * (min(R, (i + 1) * X) - i * X) * \
                         (min(C, (j + 1) * X) - j * X)
                    self.add(STORE, nid, (bb, i, j, 0), 1, 1, 0, el, role, -1, ph, in_a=el,
                             deps=(int(grid[bb, i, j]),))

    def run(self) -> OpTable:
        g = self.graph
        for node in g.nodes:
            k = node.kind
            if node.is_source or node.is_layout:
                continue
            if k == "MatMul":
                self.matmul(node)
            elif k == "ConvGrad":
                self.convgrad(node)
            elif k in ("Softmax", "SoftmaxGrad"):
                self.tilewise(node, SOFTMAX)
            elif k in ("LayerNorm", "LayerNormGrad"):
                self.tilewise(node, LAYERNORM)
            elif k in ELEMENTWISE_KINDS:
                self.tilewise(node, ELEMWISE)
            else:
                raise NotImplementedError(k)
        out = g.outputs["out"]
        if g.nodes[out].kind not in LAYOUT_KINDS:
            self.stores(out, ACT)
        for upd in g.updates.values():
            self.stores(upd, WEIGHT)
        return self.table()

    def table(self) -> OpTable:
        c = self.cols
        n = len(c["kind"])
        ptr = np.zeros(n + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(d) for d in self.deps])
        idx = np.fromiter((d for ds in self.deps for d in ds), dtype=np.int64, count=int(ptr[-1]))
        arr = lambda k: np.asarray(c[k], dtype=np.int64)
        tile = np.asarray(c["tile"], dtype=np.int64).reshape(n, 4)
        return OpTable(self.graph, self.b, self.x, self.gb, self.g, arr("kind"), arr("node"), tile,
                       arr("par"), arr("ser"), arr("unit"), arr("real"), arr("role_a"), arr("role_b"),
                       arr("phase"), arr("in_a"), arr("in_b"), arr("out_el"), arr("res_buf"), arr("res_el"),
                       arr("attached"), ptr, idx, np.full(n, np.nan), self.prune)


def estimate_ops(graph: Graph, b: int, x: int, gb: int, g: int) -> int:
    """Rough op count at a coarsening level, used to pick the level."""
    bt, X = b * gb, x * g
    n = 0
    for node in graph.nodes:
        if node.is_source or node.is_layout:
            continue
        B, R, C = node.shape
        if node.kind == "MatMul":
            vb = node.attrs["vbatch"]
            nk = _cdiv(node.attrs["inner"], X)
            n += _cdiv(vb, bt) * _cdiv(R, X) * _cdiv(C, X) * nk
            n += _cdiv(vb, bt) * nk * (_cdiv(R, X) + _cdiv(C, X))  # operand prunes and loads
        elif node.kind == "ConvGrad":
            Bv, N, Cd = graph.nodes[node.preds[0]].shape
            n += 3 * _cdiv(Bv, bt) * _cdiv(N, X) * _cdiv(Cd, X)
        else:
            n += _cdiv(B, bt) * _cdiv(R, X) * _cdiv(C, X)
    return n


def coarsening_levels(graph: Graph, b: int, x: int):
    """(gb, g) pairs from finest to coarsest."""
    B = graph.batch
    maxdim = max(max(n.shape[1], n.shape[2]) for n in graph.nodes)
    level = 0
    while True:
        g = 2 ** level
        gb = 1
        if B % b == 0:
            while gb * 2 <= g and (B // b) % (gb * 2) == 0:
                gb *= 2
        yield gb, g
        if x * g >= maxdim and b * gb >= B:
            return
        level += 1


def tile_graph(graph: Graph, b: int, x: int, max_ops: int | None = None, prune: bool = True,
               granularity: tuple[int, int] | None = None) -> OpTable:
    """Tile every node, wire tile-exact dependencies, add loads, stores and
    (optionally) prunes. ``max_ops`` coarsens uniformly until the table fits."""
    fused = any(n.kind == "MatMul" and (n.attrs["ma"][0] in ("mod", "div") or n.attrs["mb"][0] in ("mod", "div"))
                for n in graph.nodes)
    if granularity is not None:
        levels = [granularity]
    elif max_ops is None:
        levels = [(1, 1)]
    else:
        levels = list(coarsening_levels(graph, b, x))
    table = None
    for gb, g in levels:
        if fused and graph.batch % (b * gb):
            raise ValueError(f"stacked heads need batch {graph.batch} divisible by tile batch {b * gb}")
        if max_ops is not None and granularity is None and estimate_ops(graph, b, x, gb, g) > 2 * max_ops \
                and (gb, g) != levels[-1]:
            continue
        table = _Tiler(graph, b, x, gb, g, prune).run()
        if max_ops is None or len(table) <= max_ops:
            break
    return table


def insert_prune_ops(ops: OpTable, thresholds: PruneThresholds, mode: EvalMode | str = EvalMode.INFERENCE) -> OpTable:
    """Return a table where every lane-op operand passes through one prune,
    each tagged with the threshold that governs it (tau_I for activations,
    tau_T for gradients, static ratio for weights)."""
    mode = EvalMode(mode)
    table = ops if ops.has_prunes else _Tiler(ops.graph, ops.b, ops.x, ops.gb, ops.g, True).run()
    tau = np.full(len(table), np.nan)
    is_p = table.kind == PRUNE
    w_tau = thresholds.for_role("weight")
    tau[is_p & (table.role_a == ACT)] = thresholds.tau_i
    if mode == EvalMode.TRAINING:
        tau[is_p & (table.role_a == GRAD)] = thresholds.tau_t
    if w_tau is not None:
        tau[is_p & (table.role_a == WEIGHT)] = w_tau
    table.tau = tau
    return table


# --------------------------------------------------------------------------
# assignment
# --------------------------------------------------------------------------


def group_size(table: OpTable, acc) -> int:
    """PEs pooled per scheduling slot. Fine tables use single PEs; coarse
    tables gang PEs so that a typical coarse matmul fills its group's
    lanes, keeping total module counts unchanged."""
    if table.gb == 1 and table.g == 1:
        return 1
    mm = table.kind == MATMUL
    if not mm.any():
        return 1
    # MAC-weighted median of the fine-tile parallelism
    par, work = table.par[mm], table.real[mm].astype(float)
    idx = np.argsort(par, kind="stable")
    cum = np.cumsum(work[idx])
    med = par[idx][int(np.searchsorted(cum, cum[-1] / 2))]
    want = float(med) / acc.lanes_per_pe
    s = 1
    while s * 2 <= want and s * 2 <= acc.num_pes:
        s *= 2
    while acc.num_pes % s:
        s //= 2
    return s


def module_counts(acc, group: int = 1) -> np.ndarray:
    return np.array([acc.lanes_per_pe, acc.softmax_per_pe, acc.layernorm_per_pe, 1], dtype=np.int64) * group


def op_widths(table: OpTable, acc, group: int = 1) -> np.ndarray:
    """Modules an op occupies at once: one per fine tile, up to what its
    PE (group) holds. Memory ops take the single memory pipe."""
    cls = table.cls
    width = np.ones(len(table), dtype=np.int64)
    counts = module_counts(acc, group)
    for c in (LANE, SMX, LNM, PRN):
        m = cls == c
        width[m] = np.minimum(table.par[m], counts[c])
    return width


@dataclass(eq=False)
class Schedule:
    table: OpTable
    acc: object
    pe: np.ndarray
    est_start: np.ndarray
    width: np.ndarray
    est_dur: np.ndarray
    order: np.ndarray  # op ids sorted by (estimated start, id)
    policy: str = "least_loaded"
    group: int = 1     # PEs per scheduling slot; pe[] indexes slots

    @property
    def num_slots(self) -> int:
        return self.acc.num_pes // self.group

    @property
    def num_ops(self) -> int:
        return len(self.table)

    def queues(self) -> dict[tuple[int, int], list[int]]:
        cls = self.table.cls
        out: dict[tuple[int, int], list[int]] = {}
        for o in self.order:
            if cls[o] != MEM:
                out.setdefault((int(self.pe[o]), int(cls[o])), []).append(int(o))
        return out

    def pe_queues(self) -> dict[int, list[int]]:
        cls = self.table.cls
        out: dict[int, list[int]] = {}
        for o in self.order:
            if cls[o] != MEM:
                out.setdefault(int(self.pe[o]), []).append(int(o))
        return out

    def memory_stream(self) -> list[int]:
        cls = self.table.cls
        return [int(o) for o in self.order if cls[o] == MEM]

    def counts(self) -> dict[str, int]:
        return self.table.counts()

    def to_json(self) -> str:
        t = self.table
        rows = [[int(o), KIND_NAMES[t.kind[o]], int(self.pe[o]), int(self.est_start[o]), list(t.deps(int(o)))]
                for o in self.order]
        return json.dumps({"policy": self.policy, "ops": rows, "counts": self.counts()}, sort_keys=True)


def assign_and_order(table: OpTable, acc, policy: str = "least_loaded", calib=None,
                     est_dur: np.ndarray | None = None) -> Schedule:
    """Greedy list scheduling on dense durations. Ready ops are taken in
    ascending id; each compute op goes to the PE where it can start
    earliest (ties: fewer operands produced on other PEs, then least
    accumulated work, then lowest PE index). Coarse tables schedule onto
    PE groups, see group_size."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    group = group_size(table, acc)
    width = op_widths(table, acc, group)
    if est_dur is None:
        from .simcore import dense_durations, load_calibration
        est_dur = dense_durations(table, acc, calib or load_calibration(), group)
    try:
        pe, est = kernels.list_schedule(table.cls, width, est_dur, table.dep_ptr, table.dep_idx,
                                        acc.num_pes // group, module_counts(acc, group), POLICIES[policy])
    except ValueError as e:
        raise CyclicGraph(str(e)) from None
    order = np.lexsort((np.arange(len(table)), est)).astype(np.int64)
    return Schedule(table, acc, np.asarray(pe, dtype=np.int64), np.asarray(est), width, np.asarray(est_dur),
                    order, policy, group)


def split_streams(schedule: Schedule) -> tuple[list[int], list[int]]:
    """Compute ops (in queue order) and the memory stream."""
    cls = schedule.table.cls
    compute = [int(o) for o in schedule.order if cls[o] != MEM]
    memory = [int(o) for o in schedule.order if cls[o] == MEM]
    return compute, memory


def dependency_replay_ok(schedule: Schedule, start: np.ndarray, finish: np.ndarray) -> bool:
    """No op starts before all of its dependencies finished."""
    t = schedule.table
    for o in range(len(t)):
        for d in t.deps(o):
            if start[o] < finish[d]:
                return False
    return True
