"""Computational graphs for transformer encoders.

A graph is a flat list of nodes in topological order. Every tensor is
three-dimensional, (batch, rows, cols). Sources (Input, Weight, Const,
Band) hold data; every other node is an operation that the hardware
either executes (MatMul, Softmax, ...) or resolves by addressing
(Transpose, Concat, Slice).

MatMul is batched through index maps: for every virtual batch index v,
``out[mo(v)] += A[ma(v)] @ B[mb(v)]``. A map is one of ``("id",)``,
``("zero",)``, ``("mod", m)`` or ``("div", m)``. This covers broadcast
weights, weight gradients that sum over the batch, and heads that are
stacked into the batch dimension.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .spaces import (HeadOp, LayerConfig, TransformerConfig, ValidationMode,
                     validate_transformer)


class InvalidConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class KernelTooLarge(ValueError):
    pass


class EvalMode(str, enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"


SOURCE_KINDS = frozenset({"Input", "Weight", "Const", "Band"})
LAYOUT_KINDS = frozenset({"Transpose", "Concat", "Slice"})
ROWWISE_KINDS = frozenset({"Softmax", "LayerNorm", "SoftmaxGrad", "LayerNormGrad"})
ELEMENTWISE_KINDS = frozenset({"Activation", "Add", "Scale", "ActivationGrad", "WeightUpdate"})

LN_EPS = 1e-12

ID = ("id",)
ZERO = ("zero",)


def map_index(m: tuple, v: np.ndarray) -> np.ndarray:
    if m[0] == "id":
        return v
    if m[0] == "zero":
        return np.zeros_like(v)
    if m[0] == "mod":
        return v % m[1]
    if m[0] == "div":
        return v // m[1]
    raise ValueError(f"unknown batch map {m}")


@dataclass(frozen=True, eq=False)
class GraphNode:
    id: int
    kind: str
    shape: tuple[int, int, int]
    preds: tuple[int, ...] = ()
    name: str = ""
    phase: str = "forward"
    attrs: dict = field(default_factory=dict)

    @property
    def is_source(self) -> bool:
        return self.kind in SOURCE_KINDS

    @property
    def is_layout(self) -> bool:
        return self.kind in LAYOUT_KINDS

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]


@dataclass
class Graph:
    nodes: list[GraphNode]
    inputs: dict[str, int]
    outputs: dict[str, int]
    params: dict[str, tuple[int, int]]  # name -> (weight node, index within the stack)
    grads: dict[int, int] = field(default_factory=dict)     # weight node -> gradient node
    updates: dict[int, int] = field(default_factory=dict)   # weight node -> update node
    mode: EvalMode = EvalMode.INFERENCE
    seq_len: int = 0
    batch: int = 1
    activation: str = "GeLU"
    lr: float = 0.0
    layout: str = "pre-norm"

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, i: int) -> GraphNode:
        return self.nodes[i]

    def count(self, kind: str | None = None, phase: str | None = None, sources: bool = False) -> int:
        n = 0
        for nd in self.nodes:
            if nd.is_source and not sources:
                continue
            if kind is not None and nd.kind != kind:
                continue
            if phase is not None and nd.phase != phase:
                continue
            n += 1
        return n

    def consumers(self) -> list[list[int]]:
        out = [[] for _ in self.nodes]
        for nd in self.nodes:
            for p in nd.preds:
                out[p].append(nd.id)
        return out

    def to_json(self) -> str:
        rows = [{"id": n.id, "kind": n.kind, "shape": list(n.shape), "preds": list(n.preds),
                 "phase": n.phase, "name": n.name} for n in self.nodes]
        return json.dumps({"mode": self.mode.value, "seq_len": self.seq_len, "batch": self.batch,
                           "layout": self.layout, "nodes": rows}, sort_keys=True)


# --------------------------------------------------------------------------
# standalone matrices and formulas
# --------------------------------------------------------------------------


def build_transform_matrix(kind: str, n: int) -> np.ndarray:
    """Real N x N transform: real part of the DFT matrix, or orthonormal DCT-II."""
    if n < 1:
        raise ValueError("N_T must be >= 1")
    j = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    if kind in ("DFT", "LT-DFT"):
        return np.cos(2.0 * np.pi * ((j * k) % n) / n)
    if kind in ("DCT", "LT-DCT"):
        v = np.cos(np.pi * (2 * k + 1) * j / (2.0 * n))
        v[0, :] *= math.sqrt(1.0 / n)
        v[1:, :] *= math.sqrt(2.0 / n)
        return v
    raise ValueError(f"unknown transform {kind!r}")


def conv_as_matmul(w: Sequence[float], n: int, padding: str = "same") -> np.ndarray:
    """Banded N x N matrix B with (B @ x)[i] = sum_t w[t] x[i - t + k//2]."""
    w = np.asarray(w, dtype=float).ravel()
    k = w.size
    if padding != "same":
        raise ValueError("only same padding is supported")
    if k % 2 == 0:
        raise ValueError("kernel length must be odd")
    if k > n:
        raise KernelTooLarge(f"kernel {k} longer than sequence {n}")
    c = k // 2
    i = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    t = i - m + c
    inside = (t >= 0) & (t < k)
    out = np.zeros((n, n))
    out[inside] = w[t[inside]]
    return out


def backward_matmul(delta_next, w_next, preact, fprime) -> np.ndarray:
    """delta = W_next^T delta_next * f'(preact), column-vector convention."""
    delta_next = np.asarray(delta_next, dtype=float)
    w_next = np.asarray(w_next, dtype=float)
    if w_next.shape[0] != delta_next.shape[0]:
        raise ShapeMismatch(f"W_next {w_next.shape} vs delta {delta_next.shape}")
    back = w_next.T @ delta_next
    deriv = fprime(np.asarray(preact, dtype=float))
    if np.shape(deriv) not in ((), back.shape):
        raise ShapeMismatch(f"f' shape {np.shape(deriv)} vs {back.shape}")
    return back * deriv


def weight_update(delta, x_prev, lr: float, w) -> np.ndarray:
    """W - lr * delta x_prev^T."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    w = np.asarray(w, dtype=float)
    if delta.shape[1] != x_prev.shape[1]:
        raise ShapeMismatch(f"delta {delta.shape} vs x_prev {x_prev.shape}")
    grad = delta @ x_prev.T
    if grad.shape != w.shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs W {w.shape}")
    return w - lr * grad


def conv_weight_grad(delta: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    """Gradient of a same-padded convolution kernel: correlation of delta
    with the input, i.e. g[t] = sum_n delta[n] x[n - t + k//2].

    delta, x: (N,) or (N, C); columns are summed."""
    delta = np.asarray(delta, dtype=float)
    x = np.asarray(x, dtype=float)
    if delta.shape != x.shape:
        raise ShapeMismatch(f"delta {delta.shape} vs input {x.shape}")
    if delta.ndim == 1:
        delta = delta[:, None]
        x = x[:, None]
    n = delta.shape[0]
    c = k // 2
    g = np.zeros(k)
    for t in range(k):
        s = t - c  # x index = n - s
        if s >= 0:
            g[t] = np.sum(delta[s:] * x[:n - s]) if s < n else 0.0
        else:
            g[t] = np.sum(delta[:n + s] * x[-s:]) if -s < n else 0.0
    return g


def backward_conv(delta, x_prev, lr: float, w) -> np.ndarray:
    """Kernel update w - lr * (delta correlated with the layer input)."""
    w = np.asarray(w, dtype=float)
    return w - lr * conv_weight_grad(delta, x_prev, w.size)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(float)


ACT_FN = {"ReLU": relu, "GeLU": gelu, "Identity": lambda x: x}
ACT_GRAD = {"ReLU": relu_grad, "GeLU": gelu_grad, "Identity": lambda x: np.ones_like(x)}


def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_rows(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def head_dims(hidden: int, n_heads: int) -> list[int]:
    """Split the hidden width over heads; the first hidden % n heads get one extra column."""
    base, extra = divmod(hidden, n_heads)
    if base == 0:
        raise ShapeMismatch(f"hidden {hidden} < heads {n_heads}")
    return [base + 1 if i < extra else base for i in range(n_heads)]


# --------------------------------------------------------------------------
# builder
# --------------------------------------------------------------------------


class GraphBuilder:
    def __init__(self, phase: str = "forward"):
        self.nodes: list[GraphNode] = []
        self.params: dict[str, tuple[int, int]] = {}
        self.inputs: dict[str, int] = {}
        self.phase = phase

    def add(self, kind, shape, preds=(), name="", **attrs) -> int:
        nid = len(self.nodes)
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeMismatch(f"{kind} {name}: empty shape {shape}")
        self.nodes.append(GraphNode(nid, kind, shape, tuple(preds), name, self.phase, attrs))
        return nid

    def shape(self, nid: int) -> tuple[int, int, int]:
        return self.nodes[nid].shape

    # sources
    def input(self, name: str, shape) -> int:
        nid = self.add("Input", shape, name=name)
        self.inputs[name] = nid
        return nid

    def weight(self, names: Sequence[str] | str, rows: int, cols: int) -> int:
        if isinstance(names, str):
            names = [names]
        nid = self.add("Weight", (len(names), rows, cols), name=names[0], heads=tuple(names))
        for i, nm in enumerate(names):
            if nm in self.params:
                raise ValueError(f"duplicate parameter {nm}")
            self.params[nm] = (nid, i)
        return nid

    def const(self, name: str, value: np.ndarray) -> int:
        value = np.asarray(value, dtype=float)
        if value.ndim == 2:
            value = value[None]
        return self.add("Const", value.shape, name=name, value=value)

    def band(self, w: int, n: int, name: str = "") -> int:
        g, _, k = self.shape(w)
        if k % 2 == 0:
            raise ValueError("kernel length must be odd")
        if k > n:
            raise KernelTooLarge(f"kernel {k} longer than sequence {n}")
        return self.add("Band", (g, n, n), (w,), name=name, k=k)

    # operations
    def matmul(self, a: int, b: int, ma=None, mb=None, mo=None, out_batch=None, name="") -> int:
        ba, p, q = self.shape(a)
        bb, q2, r = self.shape(b)
        if q != q2:
            raise ShapeMismatch(f"matmul {name}: inner dims {q} vs {q2}")
        if ma is None and mb is None:
            if ba == bb:
                ma, mb = ID, ID
            elif ba == 1:
                ma, mb = ZERO, ID
            elif bb == 1:
                ma, mb = ID, ZERO
            else:
                raise ShapeMismatch(f"matmul {name}: batches {ba} vs {bb} need explicit maps")
        vb = max(ba, bb) if out_batch is None or mo is None else max(ba, bb, out_batch)
        if mo is None:
            mo = ID
            out_batch = vb
        v = np.arange(vb)
        for m, size in ((ma, ba), (mb, bb), (mo, out_batch)):
            idx = map_index(m, v)
            if idx.max() >= size:
                raise ShapeMismatch(f"matmul {name}: map {m} exceeds batch {size}")
        return self.add("MatMul", (out_batch, p, r), (a, b), name=name, ma=ma, mb=mb, mo=mo, vbatch=vb,
                        inner=q)

    def transpose(self, a: int, name="") -> int:
        node = self.nodes[a]
        if node.kind == "Transpose":
            return node.preds[0]
        b, r, c = node.shape
        return self.add("Transpose", (b, c, r), (a,), name=name)

    def scale(self, a: int, factor: float, name="") -> int:
        return self.add("Scale", self.shape(a), (a,), name=name, factor=float(factor))

    def softmax(self, a: int, name="") -> int:
        return self.add("Softmax", self.shape(a), (a,), name=name)

    def layernorm(self, a: int, name="") -> int:
        return self.add("LayerNorm", self.shape(a), (a,), name=name)

    def activation(self, a: int, fn: str, name="") -> int:
        if fn not in ACT_FN:
            raise ValueError(f"unknown activation {fn}")
        return self.add("Activation", self.shape(a), (a,), name=name, fn=fn)

    def addn(self, a: int, b: int, name="") -> int:
        if self.shape(a) != self.shape(b):
            raise ShapeMismatch(f"add {name}: {self.shape(a)} vs {self.shape(b)}")
        return self.add("Add", self.shape(a), (a, b), name=name)

    def concat(self, parts: Sequence[int], batch: int, name="") -> int:
        """Join head outputs along columns. A part of batch g*batch holds g
        stacked heads (head-major) and contributes g*d columns."""
        layout = []
        cols = 0
        rows = None
        for p in parts:
            pb, pr, pc = self.shape(p)
            if pb % batch:
                raise ShapeMismatch(f"concat {name}: part batch {pb} vs {batch}")
            rows = pr if rows is None else rows
            if pr != rows:
                raise ShapeMismatch(f"concat {name}: rows {pr} vs {rows}")
            layout.append((pb // batch, pc, cols))
            cols += (pb // batch) * pc
        return self.add("Concat", (batch, rows, cols), tuple(parts), name=name,
                        layout=tuple(layout), batch=batch)

    def slice(self, a: int, col0: int, g: int, d: int, batch: int, name="") -> int:
        b, r, c = self.shape(a)
        if b != batch or col0 + g * d > c:
            raise ShapeMismatch(f"slice {name} out of range")
        return self.add("Slice", (g * batch, r, d), (a,), name=name, col0=col0, g=g, d=d, batch=batch)


# --------------------------------------------------------------------------
# forward construction
# --------------------------------------------------------------------------


def _head_groups(layer: LayerConfig, dims: list[int]) -> list[tuple[HeadOp, int, list[int]]]:
    """Consecutive heads with identical (op, width) form one group."""
    groups = []
    for i, (op, d) in enumerate(zip(layer.heads, dims)):
        if groups and groups[-1][0] == op and groups[-1][1] == d:
            groups[-1][2].append(i)
        else:
            groups.append((op, d, [i]))
    return groups


def _emit_head_group(gb: GraphBuilder, xn: int, op: HeadOp, d: int, heads: list[int], prefix: str,
                     seq_len: int, hidden: int, batch: int, fused: bool) -> list[int]:
    """Emit one group of heads reading xn (batch, N, hidden). Returns the
    output nodes, one per head, or one stacked node when fused."""
    members = [heads] if fused else [[h] for h in heads]
    outs = []
    for mem in members:
        g = len(mem)
        names = lambda s: [f"{prefix}.h{h}.{s}" for h in mem]
        if fused and g > 1:
            kw_in = dict(ma=("mod", batch), mb=("div", batch), mo=ID, out_batch=g * batch)
        else:
            kw_in = {}
        tag = f"{prefix}.h{mem[0]}" + (f"-{mem[-1]}" if g > 1 else "")
        wo = gb.weight(names("o"), d, d)
        if op.kind in ("SA-SDP", "SA-WMA"):
            hd = _attention_core(gb, xn, op.kind, d, hidden, names, tag, kw_in, g, batch)
        elif op.kind in ("LT-DFT", "LT-DCT"):
            w_in = gb.weight(names("in"), hidden, d)
            p = gb.matmul(xn, w_in, name=f"{tag}.p", **kw_in)
            v = gb.const(f"{tag}.V", build_transform_matrix(op.kind, seq_len))
            hd = gb.matmul(v, p, name=f"{tag}.lt")
        elif op.kind == "DSC":
            w_in = gb.weight(names("in"), hidden, d)
            p = gb.matmul(xn, w_in, name=f"{tag}.p", **kw_in)
            w = gb.weight(names("w"), 1, op.param)
            band = gb.band(w, seq_len, name=f"{tag}.band")
            if g > 1:
                hd = gb.matmul(band, p, ma=("div", batch), mb=ID, name=f"{tag}.conv")
            else:
                hd = gb.matmul(band, p, name=f"{tag}.conv")
        else:
            raise InvalidConfig(f"unknown head kind {op.kind}")
        if g > 1:
            out = gb.matmul(hd, wo, ma=ID, mb=("div", batch), name=f"{tag}.out")
        else:
            out = gb.matmul(hd, wo, name=f"{tag}.out")
        outs.append(out)
    return outs


def _attention_core(gb, xn, kind, d, hidden, names, tag, kw_in, g, batch):
    wq = gb.weight(names("q"), hidden, d)
    wk = gb.weight(names("k"), hidden, d)
    wv = gb.weight(names("v"), hidden, d)
    q = gb.matmul(xn, wq, name=f"{tag}.q", **kw_in)
    k = gb.matmul(xn, wk, name=f"{tag}.k", **kw_in)
    v = gb.matmul(xn, wv, name=f"{tag}.v", **kw_in)
    if kind == "SA-WMA":
        wa = gb.weight(names("a"), d, d)
        if g > 1:
            q = gb.matmul(q, wa, ma=ID, mb=("div", batch), name=f"{tag}.qa")
        else:
            q = gb.matmul(q, wa, name=f"{tag}.qa")
    kt = gb.transpose(k, name=f"{tag}.kt")
    s = gb.matmul(q, kt, name=f"{tag}.s")
    sc = gb.scale(s, 1.0 / math.sqrt(hidden), name=f"{tag}.scale")
    a = gb.softmax(sc, name=f"{tag}.softmax")
    av = gb.matmul(a, v, name=f"{tag}.av")
    return av


def map_self_attention(kind: str, seq_len: int, hidden: int, n_heads: int, head_dim: int | None = None,
                       batch: int = 1, builder: GraphBuilder | None = None, x: int | None = None) -> list[int]:
    """Emit a single attention head of ``kind`` ("SDP"/"WMA") and return
    the operation nodes it adds (weights and inputs excluded)."""
    kind = kind if kind.startswith("SA-") else f"SA-{kind}"
    if kind not in ("SA-SDP", "SA-WMA"):
        raise ValueError(f"not an attention kind: {kind}")
    if head_dim is None:
        if hidden % n_heads:
            raise ShapeMismatch(f"hidden {hidden} not divisible by {n_heads} heads")
        head_dim = hidden // n_heads
    gb = builder or GraphBuilder()
    if x is None:
        x = gb.input("x", (batch, seq_len, hidden))
    start = len(gb.nodes)
    out = _emit_head_group(gb, x, HeadOp(kind), head_dim, [0], "attn", seq_len, hidden, batch, False)
    return [n.id for n in gb.nodes[start:] if not n.is_source]


def _emit_forward(gb: GraphBuilder, cfg: TransformerConfig, seq_len: int, batch: int,
                  activation: str, fused: bool) -> int:
    h0 = cfg.layers[0].hidden
    x = gb.input("x", (batch, seq_len, h0))
    h_prev = h0
    for j, layer in enumerate(cfg.layers):
        pre = f"L{j}"
        h = layer.hidden
        if h != h_prev:
            wp = gb.weight(f"{pre}.proj", h_prev, h)
            x = gb.matmul(x, wp, name=f"{pre}.proj")
        xn = gb.layernorm(x, name=f"{pre}.ln1")
        dims = head_dims(h, layer.num_heads)
        parts = []
        for op, d, heads in _head_groups(layer, dims):
            parts.extend(_emit_head_group(gb, xn, op, d, heads, pre, seq_len, h, batch, fused))
        cat = gb.concat(parts, batch, name=f"{pre}.concat")
        r1 = gb.addn(x, cat, name=f"{pre}.res1")
        y = gb.layernorm(r1, name=f"{pre}.ln2")
        widths = [h, *layer.ff, h]
        for m in range(len(widths) - 1):
            w = gb.weight(f"{pre}.ff{m}", widths[m], widths[m + 1])
            y = gb.matmul(y, w, name=f"{pre}.ff{m}")
            if m < len(widths) - 2:
                y = gb.activation(y, activation, name=f"{pre}.act{m}")
        x = gb.addn(r1, y, name=f"{pre}.res2")
        h_prev = h
    return x


# --------------------------------------------------------------------------
# backward construction
# --------------------------------------------------------------------------


def _requires_grad(nodes: list[GraphNode]) -> list[bool]:
    req = [False] * len(nodes)
    for n in nodes:
        if n.kind == "Weight":
            req[n.id] = True
        elif n.kind in ("Input", "Const"):
            req[n.id] = False
        else:
            req[n.id] = any(req[p] for p in n.preds)
    return req


def _emit_backward(gb: GraphBuilder, out: int, lr: float) -> tuple[dict, dict]:
    fwd = list(gb.nodes)
    req = _requires_grad(fwd)
    gb.phase = "backward"
    dy = gb.input("dy", gb.shape(out))
    contrib: dict[int, list[int]] = {out: [dy]}

    def push(target: int, g: int):
        contrib.setdefault(target, []).append(g)

    def total(nid: int) -> int | None:
        lst = contrib.get(nid)
        if not lst:
            return None
        acc = lst[0]
        for g in lst[1:]:
            acc = gb.addn(acc, g, name=f"acc.{fwd[nid].name}")
        contrib[nid] = [acc]
        return acc

    grads = {}
    for node in reversed(fwd):
        if not req[node.id]:
            continue
        if node.kind == "Weight":
            g = total(node.id)
            if g is not None:
                grads[node.id] = g
            continue
        if node.kind == "Band":
            continue
        dC = total(node.id)
        if dC is None:
            continue
        nm = node.name
        k = node.kind
        if k == "MatMul":
            a, b = node.preds
            ma, mb, mo = node.attrs["ma"], node.attrs["mb"], node.attrs["mo"]
            if req[a]:
                if fwd[a].kind == "Band":
                    w = fwd[a].preds[0]
                    gw = gb.add("ConvGrad", gb.shape(w), (dC, b), name=f"d.{nm}.w",
                                k=fwd[a].attrs["k"], mo=ma)
                    push(w, gw)
                else:
                    bt = gb.transpose(b, name=f"{nm}.bT")
                    push(a, gb.matmul(dC, bt, ma=mo, mb=mb, mo=ma, out_batch=fwd[a].shape[0],
                                      name=f"d.{nm}.a"))
            if req[b]:
                at = gb.transpose(a, name=f"{nm}.aT")
                push(b, gb.matmul(at, dC, ma=ma, mb=mo, mo=mb, out_batch=fwd[b].shape[0],
                                  name=f"d.{nm}.b"))
        elif k == "Scale":
            push(node.preds[0], gb.scale(dC, node.attrs["factor"], name=f"d.{nm}"))
        elif k == "Softmax":
            push(node.preds[0], gb.add("SoftmaxGrad", node.shape, (node.id, dC), name=f"d.{nm}"))
        elif k == "LayerNorm":
            push(node.preds[0], gb.add("LayerNormGrad", node.shape, (node.preds[0], dC), name=f"d.{nm}"))
        elif k == "Activation":
            push(node.preds[0], gb.add("ActivationGrad", node.shape, (node.preds[0], dC),
                                       name=f"d.{nm}", fn=node.attrs["fn"]))
        elif k == "Add":
            for p in node.preds:
                if req[p]:
                    push(p, dC)
        elif k == "Transpose":
            push(node.preds[0], gb.transpose(dC, name=f"d.{nm}"))
        elif k == "Concat":
            for p, (g, d, col0) in zip(node.preds, node.attrs["layout"]):
                if req[p]:
                    push(p, gb.slice(dC, col0, g, d, node.attrs["batch"], name=f"d.{nm}.{p}"))
        else:
            raise NotImplementedError(f"no backward rule for {k}")

    gb.phase = "update"
    updates = {}
    for wid, g in grads.items():
        updates[wid] = gb.add("WeightUpdate", fwd[wid].shape, (wid, g), name=f"upd.{fwd[wid].name}", lr=lr)
    return grads, updates


def build_graph(cfg: TransformerConfig, seq_len: int, mode: EvalMode | str = EvalMode.INFERENCE,
                batch: int = 1, activation: str = "GeLU", lr: float = 1e-3, fuse_heads: bool = False,
                validation: ValidationMode | None = ValidationMode.EXTENDED) -> Graph:
    """Build the forward (and for training, backward and update) graph.

    ``fuse_heads`` stacks heads with the same operation and width into the
    batch dimension; values are unchanged, node count drops. ``validation``
    picks the value-set check; None skips it (useful for toy widths).
    """
    mode = EvalMode(mode)
    if seq_len < 1:
        raise InvalidConfig("seq_len must be >= 1")
    if batch < 1:
        raise InvalidConfig("batch must be >= 1")
    if not cfg.layers:
        raise InvalidConfig("no layers")
    if validation is not None:
        rep = validate_transformer(cfg, validation)
        if not rep.valid:
            raise InvalidConfig("; ".join(map(str, rep.violations)))
    for layer in cfg.layers:
        if layer.num_heads < 1 or not layer.ff:
            raise InvalidConfig("every layer needs heads and a feed-forward stack")
    gb = GraphBuilder()
    out = _emit_forward(gb, cfg, seq_len, batch, activation, fuse_heads)
    grads, updates = {}, {}
    if mode == EvalMode.TRAINING:
        grads, updates = _emit_backward(gb, out, lr)
    return Graph(gb.nodes, dict(gb.inputs), {"out": out}, dict(gb.params), grads, updates,
                 mode, seq_len, batch, activation, lr)


# --------------------------------------------------------------------------
# numeric evaluation
# --------------------------------------------------------------------------


def init_params(graph: Graph, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name in sorted(graph.params):
        nid, _ = graph.params[name]
        _, r, c = graph.nodes[nid].shape
        if r == 1:  # convolution kernel
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(c), size=(r, c))
        else:
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, c))
    return out


def _matmul_eval(a, b, node):
    vb = node.attrs["vbatch"]
    v = np.arange(vb)
    ia = map_index(node.attrs["ma"], v)
    ib = map_index(node.attrs["mb"], v)
    io = map_index(node.attrs["mo"], v)
    prod = np.matmul(a[ia], b[ib])
    if node.attrs["mo"] == ID and node.shape[0] == vb:
        return prod
    out = np.zeros(node.shape)
    np.add.at(out, io, prod)
    return out


def _convgrad_eval(delta, p, node):
    k = node.attrs["k"]
    vb = delta.shape[0]
    io = map_index(node.attrs["mo"], np.arange(vb))
    out = np.zeros(node.shape)
    for v in range(vb):
        out[io[v], 0, :] += conv_weight_grad(delta[v], p[v], k)
    return out


def evaluate(graph: Graph, feeds: dict[str, np.ndarray], params: dict[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node in 64-bit floating point; returns values by node id."""
    vals: list[np.ndarray | None] = [None] * len(graph.nodes)
    for node in graph.nodes:
        k = node.kind
        p = [vals[i] for i in node.preds]
        if k == "Input":
            if node.name not in feeds:
                raise KeyError(f"missing feed {node.name!r}")
            x = np.asarray(feeds[node.name], dtype=float)
            if x.shape != node.shape:
                raise ShapeMismatch(f"feed {node.name}: {x.shape} vs {node.shape}")
            v = x
        elif k == "Weight":
            v = np.stack([np.asarray(params[h], dtype=float).reshape(node.shape[1:]) for h in node.attrs["heads"]])
        elif k == "Const":
            v = node.attrs["value"]
        elif k == "Band":
            n = node.shape[1]
            v = np.stack([conv_as_matmul(w[0], n) for w in p[0]])
        elif k == "MatMul":
            v = _matmul_eval(p[0], p[1], node)
        elif k == "Softmax":
            v = softmax_rows(p[0])
        elif k == "LayerNorm":
            v = layernorm_rows(p[0])
        elif k == "Activation":
            v = ACT_FN[node.attrs["fn"]](p[0])
        elif k == "Add":
            v = p[0] + p[1]
        elif k == "Scale":
            v = p[0] * node.attrs["factor"]
        elif k == "Transpose":
            v = np.swapaxes(p[0], 1, 2)
        elif k == "Concat":
            B = node.attrs["batch"]
            blocks = []
            for x, (g, d, _) in zip(p, node.attrs["layout"]):
                blocks.append(x.reshape(g, B, x.shape[1], d).transpose(1, 2, 0, 3).reshape(B, x.shape[1], g * d))
            v = np.concatenate(blocks, axis=2)
        elif k == "Slice":
            a = node.attrs
            x = p[0][:, :, a["col0"]:a["col0"] + a["g"] * a["d"]]
            B, n = x.shape[0], x.shape[1]
            v = x.reshape(B, n, a["g"], a["d"]).transpose(2, 0, 1, 3).reshape(a["g"] * B, n, a["d"])
        elif k == "SoftmaxGrad":
            y, dy = p
            v = y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
        elif k == "LayerNormGrad":
            x, dy = p
            mu = x.mean(axis=-1, keepdims=True)
            sd = np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
            xh = (x - mu) / sd
            v = (dy - dy.mean(axis=-1, keepdims=True) - xh * np.mean(dy * xh, axis=-1, keepdims=True)) / sd
        elif k == "ActivationGrad":
            x, dy = p
            v = ACT_GRAD[node.attrs["fn"]](x) * dy
        elif k == "ConvGrad":
            v = _convgrad_eval(p[0], p[1], node)
        elif k == "WeightUpdate":
            v = p[0] - node.attrs["lr"] * p[1]
        else:
            raise NotImplementedError(k)
        if v.shape != node.shape:
            raise ShapeMismatch(f"node {node.id} {k}: value {v.shape} vs declared {node.shape}")
        vals[node.id] = v
    return vals


def param_grads(graph: Graph, vals: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Per-parameter gradients from an evaluated training graph."""
    out = {}
    for name, (nid, i) in graph.params.items():
        g = graph.grads.get(nid)
        if g is not None:
            out[name] = vals[g][i]
    return out


def param_updates(graph: Graph, vals: list[np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, (nid, i) in graph.params.items():
        u = graph.updates.get(nid)
        if u is not None:
            out[name] = vals[u][i]
    return out


# --------------------------------------------------------------------------
# straight-line reference
# --------------------------------------------------------------------------


def reference_forward(cfg: TransformerConfig, x: np.ndarray, params: dict[str, np.ndarray],
                      activation: str = "GeLU") -> np.ndarray:
    """Direct per-head implementation used to check the graph mapping."""
    act = ACT_FN[activation]
    x = np.asarray(x, dtype=float)
    n_t = x.shape[1]
    h_prev = x.shape[2]
    for j, layer in enumerate(cfg.layers):
        pre = f"L{j}"
        h = layer.hidden
        if h != h_prev:
            x = x @ params[f"{pre}.proj"]
        xn = layernorm_rows(x)
        outs = []
        for i, (op, d) in enumerate(zip(layer.heads, head_dims(h, layer.num_heads))):
            P = lambda s: params[f"{pre}.h{i}.{s}"]
            if op.kind in ("SA-SDP", "SA-WMA"):
                q = xn @ P("q")
                k = xn @ P("k")
                v = xn @ P("v")
                if op.kind == "SA-WMA":
                    s = q @ P("a") @ np.swapaxes(k, 1, 2)
                else:
                    s = q @ np.swapaxes(k, 1, 2)
                hd = softmax_rows(s / math.sqrt(h)) @ v
            elif op.kind in ("LT-DFT", "LT-DCT"):
                hd = build_transform_matrix(op.kind, n_t) @ (xn @ P("in"))
            else:
                w = P("w").ravel()
                p = xn @ P("in")
                # direct sliding-window convolution along the sequence
                hd = np.zeros_like(p)
                c = w.size // 2
                for n in range(n_t):
                    for t in range(w.size):
                        m = n - t + c
                        if 0 <= m < n_t:
                            hd[:, n, :] += w[t] * p[:, m, :]
            outs.append(hd @ P("o"))
        r1 = x + np.concatenate(outs, axis=2)
        y = layernorm_rows(r1)
        m_last = len(layer.ff)
        for m in range(m_last + 1):
            y = y @ params[f"{pre}.ff{m}"]
            if m < m_last:
                y = act(y)
        x = r1 + y
        h_prev = h
    return x


def graph_loss(graph: Graph, x: np.ndarray, dy: np.ndarray, params: dict[str, np.ndarray]) -> float:
    """Scalar loss sum(out * dy) of the forward part."""
    vals = evaluate_forward(graph, x, params)
    return float(np.sum(vals[graph.outputs["out"]] * dy))


def evaluate_forward(graph: Graph, x: np.ndarray, params: dict[str, np.ndarray]) -> list:
    fwd = Graph([n for n in graph.nodes if n.phase == "forward"], {"x": graph.inputs["x"]},
                graph.outputs, graph.params)
    return evaluate(fwd, {"x": x}, params)
