"""Transformer and accelerator design spaces.

Holds the permissible value sets, the frozen config types, validation,
exhaustive counting, embeddings for the surrogate, and seeded sampling.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class ValidationMode(str, enum.Enum):
    STRICT = "strict"
    EXTENDED = "extended"


HEAD_KINDS = ("SA-SDP", "SA-WMA", "LT-DFT", "LT-DCT", "DSC")
# embedding head categories, in slot order
HEAD_CATEGORIES = ("SA-SDP", "SA-WMA", "LT-DFT", "LT-DCT", "DSC-5", "DSC-9", "DSC-13")
ACTIVATIONS = ("ReLU", "GeLU")

# 1-based index == position in this tuple + 1; never reorder
MEMORY_CONFIGS = (
    ("RRAM", 16, 2, 2),
    ("RRAM", 8, 2, 4),
    ("RRAM", 4, 2, 8),
    ("RRAM", 2, 2, 16),
    ("RRAM", 32, 2, 1),
    ("RRAM", 1, 2, 32),
    ("DRAM", 16, 2, 2),
    ("DRAM", 8, 2, 4),
    ("DRAM", 32, 2, 1),
    ("DRAM", 16, 4, 1),
    ("HBM", 32, 1, 4),
)

TXF_EMBEDDING_VERSION = 1
MAX_LAYER_SLOTS = 12
MAX_FF_SLOTS = 3
SLOT_WIDTH = 1 + len(HEAD_CATEGORIES) + MAX_FF_SLOTS
TXF_EMBEDDING_DIM = MAX_LAYER_SLOTS * SLOT_WIDTH
ACC_EMBEDDING_DIM = 12
ACC_EMBEDDING_DIM_EXT = 13


@dataclass(frozen=True)
class Invalid:
    """Marker returned by decoders for out-of-set vectors."""

    reason: str

    def __bool__(self) -> bool:
        return False


# --------------------------------------------------------------------------
# config types
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class HeadOp:
    kind: str
    param: int | None = None

    @property
    def category(self) -> str:
        if self.kind == "DSC":
            return f"DSC-{self.param}"
        return self.kind

    @classmethod
    def from_category(cls, cat: str) -> "HeadOp":
        if cat.startswith("DSC-"):
            return cls("DSC", int(cat[4:]))
        return cls(cat)

    def __str__(self) -> str:
        return self.category


@dataclass(frozen=True)
class LayerConfig:
    hidden: int
    heads: tuple[HeadOp, ...]
    ff: tuple[int, ...]

    def __post_init__(self):
        # multiset semantics: canonical order
        object.__setattr__(self, "heads", tuple(sorted(self.heads, key=_head_sort_key)))
        object.__setattr__(self, "ff", tuple(int(f) for f in self.ff))

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def head_counts(self) -> Counter:
        return Counter(h.category for h in self.heads)


def _head_sort_key(h: HeadOp) -> int:
    try:
        return HEAD_CATEGORIES.index(h.category)
    except ValueError:
        # unknown categories sort last, by name
        return len(HEAD_CATEGORIES) + hash(h.category) % 1000


@dataclass(frozen=True)
class TransformerConfig:
    layers: tuple[LayerConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            counts = layer.head_counts()
            heads = []
            for cat in HEAD_CATEGORIES:
                if counts.get(cat):
                    op = HeadOp.from_category(cat)
                    d = {"kind": op.kind, "count": counts[cat]}
                    if op.param is not None:
                        d["kernel"] = op.param
                    heads.append(d)
            out.append({"hidden": layer.hidden, "heads": heads, "ff": list(layer.ff)})
        return {"layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        layers = []
        for ld in d["layers"]:
            heads = []
            for hd in ld["heads"]:
                op = HeadOp(hd["kind"], hd.get("kernel"))
                heads.extend([op] * int(hd.get("count", 1)))
            layers.append(LayerConfig(int(ld["hidden"]), tuple(heads), tuple(ld["ff"])))
        return cls(tuple(layers))


@dataclass(frozen=True)
class MemoryConfig:
    type: str
    banks: int
    ranks: int
    channels: int

    def as_tuple(self) -> tuple:
        return (self.type, self.banks, self.ranks, self.channels)

    def __str__(self) -> str:
        return f"{self.type}[{self.banks},{self.ranks},{self.channels}]"


@dataclass(frozen=True)
class AcceleratorConfig:
    batch_tile: int
    spatial_tile: int
    activation: str
    num_pes: int
    lanes_per_pe: int
    macs_per_lane: int
    softmax_per_pe: int
    batch_size: int
    act_buffer_mb: int
    weight_buffer_mb: int
    mask_buffer_mb: int
    memory: MemoryConfig
    # exactly one layer-norm module per PE; not a tunable
    layernorm_per_pe: int = field(default=1, init=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("layernorm_per_pe")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AcceleratorConfig":
        d = dict(d)
        mem = d.pop("memory")
        if isinstance(mem, (list, tuple)):
            mem = MemoryConfig(*mem)
        else:
            mem = MemoryConfig(**mem)
        d.pop("layernorm_per_pe", None)
        return cls(memory=mem, **{k: (v if k == "activation" else int(v)) for k, v in d.items()})


# --------------------------------------------------------------------------
# value sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpace:
    """Permissible value sets; defaults are the published tables."""

    batch_tile: tuple = (1, 4)
    spatial_tile: tuple = (8, 16, 32)
    activation: tuple = ACTIVATIONS
    num_pes: tuple = (64, 128, 256, 512, 1024)
    lanes_per_pe: tuple = (8, 16, 32, 64, 128)
    macs_per_lane: tuple = (1, 16)
    softmax_per_pe: tuple = (2, 4, 8, 16, 32, 64)
    batch_size: tuple = (4, 16, 32)
    act_buffer_mb: tuple = (4, 8, 16, 32, 64)
    weight_buffer_mb: tuple = (8, 16, 32, 64, 128)
    mask_buffer_mb: tuple = (1, 2, 4, 8, 16)
    memory: tuple = MEMORY_CONFIGS

    num_layers: tuple = (2, 4, 6, 8, 10, 12)
    num_heads: tuple = (2, 4, 8, 12)
    hidden: tuple = (128, 256)
    hidden_ext: tuple = (128, 256, 512)
    ff_dims: tuple = (256, 512, 1024, 2048, 3072, 4096)
    ff_stack: tuple = (1, 2, 3)
    head_kinds: tuple = HEAD_KINDS
    dsc_kernels: tuple = (5, 9)
    dsc_kernels_ext: tuple = (5, 9, 13)

    ACC_FIELDS = (
        "batch_tile", "spatial_tile", "activation", "num_pes", "lanes_per_pe",
        "macs_per_lane", "softmax_per_pe", "batch_size", "act_buffer_mb",
        "weight_buffer_mb", "mask_buffer_mb", "memory",
    )

    @classmethod
    def from_json(cls, path: str | Path) -> "DesignSpace":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "DesignSpace":
        kw = {}
        for k, v in raw.items():
            if k not in cls.__dataclass_fields__:
                raise KeyError(f"unknown design-space key {k!r}")
            if k == "memory":
                kw[k] = tuple(tuple(m) for m in v)
            else:
                kw[k] = tuple(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: [list(m) for m in v] if k == "memory" else list(v) for k, v in asdict(self).items()}

    def memory_index(self, mem: MemoryConfig) -> int | None:
        try:
            return self.memory.index(mem.as_tuple()) + 1
        except ValueError:
            return None

    def hidden_set(self, mode: ValidationMode) -> tuple:
        return self.hidden if mode == ValidationMode.STRICT else self.hidden_ext

    def kernel_set(self, mode: ValidationMode) -> tuple:
        return self.dsc_kernels if mode == ValidationMode.STRICT else self.dsc_kernels_ext


DEFAULT_SPACE = DesignSpace()


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    field: str
    value: object
    allowed: object = None

    def __str__(self) -> str:
        if self.allowed is None:
            return f"{self.field}={self.value!r}"
        return f"{self.field}={self.value!r} not in {self.allowed}"


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid

    @property
    def fields(self) -> set[str]:
        return {v.field for v in self.violations}


def validate_accelerator(cfg: AcceleratorConfig, mode: ValidationMode = ValidationMode.STRICT,
                         space: DesignSpace = DEFAULT_SPACE) -> ValidityReport:
    # mode is accepted for symmetry; the accelerator space has one mode
    bad = []
    for name in DesignSpace.ACC_FIELDS:
        value = getattr(cfg, name)
        allowed = getattr(space, name)
        if name == "memory":
            if value.as_tuple() not in allowed:
                bad.append(Violation("memory", str(value), "memory-config list"))
        elif value not in allowed:
            bad.append(Violation(name, value, allowed))
    if cfg.layernorm_per_pe != 1:
        bad.append(Violation("layernorm_per_pe", cfg.layernorm_per_pe, (1,)))
    return ValidityReport(tuple(bad))


def validate_transformer(cfg: TransformerConfig, mode: ValidationMode = ValidationMode.STRICT,
                         space: DesignSpace = DEFAULT_SPACE) -> ValidityReport:
    mode = ValidationMode(mode)
    bad = []
    if cfg.num_layers not in space.num_layers:
        bad.append(Violation("num_layers", cfg.num_layers, space.num_layers))
    hidden_ok = space.hidden_set(mode)
    kernels_ok = space.kernel_set(mode)
    for j, layer in enumerate(cfg.layers):
        tag = f"layers[{j}]"
        if layer.hidden not in hidden_ok:
            bad.append(Violation(f"{tag}.hidden", layer.hidden, hidden_ok))
        if layer.num_heads not in space.num_heads:
            bad.append(Violation(f"{tag}.num_heads", layer.num_heads, space.num_heads))
        if len(layer.ff) not in space.ff_stack:
            bad.append(Violation(f"{tag}.ff_stack", len(layer.ff), space.ff_stack))
        for f in layer.ff:
            if f not in space.ff_dims:
                bad.append(Violation(f"{tag}.ff", f, space.ff_dims))
        seen_bad = set()
        for h in layer.heads:
            if h.kind not in space.head_kinds:
                key = ("kind", h.kind)
                if key not in seen_bad:
                    bad.append(Violation(f"{tag}.head.kind", h.kind, space.head_kinds))
                    seen_bad.add(key)
                continue
            if (h.kind == "DSC") != (h.param is not None):
                key = ("param", h.category)
                if key not in seen_bad:
                    bad.append(Violation(f"{tag}.head.param", h.category))
                    seen_bad.add(key)
                continue
            if h.kind == "DSC" and h.param not in kernels_ok:
                key = ("kernel", h.param)
                if key not in seen_bad:
                    bad.append(Violation(f"{tag}.head.kernel", h.param, kernels_ok))
                    seen_bad.add(key)
        if mode == ValidationMode.STRICT and len(set(layer.heads)) > 1:
            bad.append(Violation(f"{tag}.heads", "mixed:" + ",".join(sorted({h.category for h in layer.heads})),
                                 "one operation type per layer"))
    return ValidityReport(tuple(bad))


# --------------------------------------------------------------------------
# counting
# --------------------------------------------------------------------------


def count_accelerator_space(space: DesignSpace = DEFAULT_SPACE) -> int:
    return math.prod(len(getattr(space, name)) for name in DesignSpace.ACC_FIELDS)


def iter_accelerator_tuples(space: DesignSpace = DEFAULT_SPACE) -> Iterator[tuple]:
    return itertools.product(*(getattr(space, name) for name in DesignSpace.ACC_FIELDS))


def enumerate_accelerator_count(space: DesignSpace = DEFAULT_SPACE,
                                reference: DesignSpace = DEFAULT_SPACE) -> int:
    """Count by walking every tuple of ``space`` and checking each field
    against ``reference``'s permissible sets."""
    allowed = [frozenset(getattr(reference, name)) for name in DesignSpace.ACC_FIELDS]
    a0, a1, a2, a3, a4, a5, a6, a7, a8, a9, a10, a11 = allowed
    n = 0
    for t in iter_accelerator_tuples(space):
        if (t[0] in a0 and t[1] in a1 and t[2] in a2 and t[3] in a3 and t[4] in a4
                and t[5] in a5 and t[6] in a6 and t[7] in a7 and t[8] in a8
                and t[9] in a9 and t[10] in a10 and t[11] in a11):
            n += 1
    return n


def count_transformer_space(space: DesignSpace = DEFAULT_SPACE) -> int:
    """Strict-mode transformer count by the product formula."""
    op_choices = 0
    for kind in space.head_kinds:
        op_choices += len(space.dsc_kernels) if kind == "DSC" else 1
    stacks = sum(len(space.ff_dims) ** s for s in space.ff_stack)
    per_layer = len(space.hidden) * op_choices * len(space.num_heads) * stacks
    return sum(per_layer ** l for l in space.num_layers)


def iter_strict_layers(space: DesignSpace = DEFAULT_SPACE) -> Iterator[LayerConfig]:
    ops = []
    for kind in space.head_kinds:
        if kind == "DSC":
            ops.extend(HeadOp("DSC", k) for k in space.dsc_kernels)
        else:
            ops.append(HeadOp(kind))
    stacks = [s for n in space.ff_stack for s in itertools.product(space.ff_dims, repeat=n)]
    for h in space.hidden:
        for op in ops:
            for n in space.num_heads:
                for ff in stacks:
                    yield LayerConfig(h, (op,) * n, ff)


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


def encode_accelerator(cfg: AcceleratorConfig, extended: bool = False,
                       space: DesignSpace = DEFAULT_SPACE) -> list[int]:
    idx = space.memory_index(cfg.memory)
    if idx is None:
        raise ValueError(f"memory config {cfg.memory} not in design space")
    e = [cfg.batch_tile, cfg.spatial_tile, cfg.spatial_tile, cfg.num_pes, cfg.lanes_per_pe,
         cfg.macs_per_lane, cfg.softmax_per_pe, cfg.batch_size, cfg.act_buffer_mb,
         cfg.weight_buffer_mb, cfg.mask_buffer_mb, idx]
    if extended:
        e.append(space.activation.index(cfg.activation))
    return e


def _as_int(v) -> int | None:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return None
    if not math.isfinite(f) or f != round(f):
        return None
    return int(round(f))


def decode_accelerator(e: Sequence, space: DesignSpace = DEFAULT_SPACE,
                       activation: str = "GeLU") -> AcceleratorConfig | Invalid:
    """Decode a 12- or 13-dim embedding. A 12-dim vector carries no
    activation slot; ``activation`` fills it."""
    if len(e) not in (ACC_EMBEDDING_DIM, ACC_EMBEDDING_DIM_EXT):
        return Invalid(f"length {len(e)}")
    vals = [_as_int(v) for v in e]
    if any(v is None for v in vals):
        return Invalid("non-integer entry")
    b, x, y, pes, lanes, macs, sm, batch, ab, wb, mb, mem = vals[:12]
    if x != y:
        return Invalid("e2 != e3")
    if len(vals) == 13:
        if not 0 <= vals[12] < len(space.activation):
            return Invalid(f"e13={vals[12]}")
        activation = space.activation[vals[12]]
    if not 1 <= mem <= len(space.memory):
        return Invalid(f"e12={mem}")
    cfg = AcceleratorConfig(b, x, activation, pes, lanes, macs, sm, batch, ab, wb, mb,
                            MemoryConfig(*space.memory[mem - 1]))
    rep = validate_accelerator(cfg, space=space)
    if not rep.valid:
        return Invalid("; ".join(map(str, rep.violations)))
    return cfg


def encode_transformer(cfg: TransformerConfig) -> list[float]:
    if not 1 <= cfg.num_layers <= MAX_LAYER_SLOTS:
        raise ValueError(f"{cfg.num_layers} layers do not fit {MAX_LAYER_SLOTS} slots")
    e = [0.0] * TXF_EMBEDDING_DIM
    for j, layer in enumerate(cfg.layers):
        if len(layer.ff) > MAX_FF_SLOTS:
            raise ValueError("feed-forward stack too deep for the embedding")
        base = j * SLOT_WIDTH
        e[base] = float(layer.hidden)
        counts = layer.head_counts()
        for c, cat in enumerate(HEAD_CATEGORIES):
            e[base + 1 + c] = float(counts.get(cat, 0))
        unknown = set(counts) - set(HEAD_CATEGORIES)
        if unknown:
            raise ValueError(f"head categories {sorted(unknown)} have no embedding slot")
        for s, f in enumerate(layer.ff):
            e[base + 1 + len(HEAD_CATEGORIES) + s] = float(f)
    return e


def decode_transformer(e: Sequence, mode: ValidationMode = ValidationMode.STRICT,
                       space: DesignSpace = DEFAULT_SPACE) -> TransformerConfig | Invalid:
    if len(e) != TXF_EMBEDDING_DIM:
        return Invalid(f"length {len(e)}")
    vals = [_as_int(v) for v in e]
    if any(v is None or v < 0 for v in vals):
        return Invalid("non-integer or negative entry")
    layers = []
    ended = False
    for j in range(MAX_LAYER_SLOTS):
        slot = vals[j * SLOT_WIDTH:(j + 1) * SLOT_WIDTH]
        if not any(slot):
            ended = True
            continue
        if ended:
            return Invalid(f"populated slot {j} after an empty slot")
        hidden = slot[0]
        heads = []
        for c, cat in enumerate(HEAD_CATEGORIES):
            heads.extend([HeadOp.from_category(cat)] * slot[1 + c])
        ff_raw = slot[1 + len(HEAD_CATEGORIES):]
        ff = []
        gap = False
        for f in ff_raw:
            if f == 0:
                gap = True
            elif gap:
                return Invalid(f"slot {j}: feed-forward padding not trailing")
            else:
                ff.append(f)
        if hidden == 0 or not heads or not ff:
            return Invalid(f"slot {j}: partially populated")
        layers.append(LayerConfig(hidden, tuple(heads), tuple(ff)))
    if not layers:
        return Invalid("no layers")
    cfg = TransformerConfig(tuple(layers))
    rep = validate_transformer(cfg, mode, space)
    if not rep.valid:
        return Invalid("; ".join(map(str, rep.violations)))
    return cfg


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _pick(rng: np.random.Generator, seq: Sequence):
    return seq[int(rng.integers(len(seq)))]


def sample_accelerator(rng: np.random.Generator, space: DesignSpace = DEFAULT_SPACE) -> AcceleratorConfig:
    vals = {name: _pick(rng, getattr(space, name)) for name in DesignSpace.ACC_FIELDS}
    vals["memory"] = MemoryConfig(*vals["memory"])
    return AcceleratorConfig(**vals)


def sample_layer(rng: np.random.Generator, mode: ValidationMode = ValidationMode.STRICT,
                 space: DesignSpace = DEFAULT_SPACE) -> LayerConfig:
    hidden = _pick(rng, space.hidden_set(mode))
    n = _pick(rng, space.num_heads)
    kernels = space.kernel_set(mode)

    def one_op() -> HeadOp:
        kind = _pick(rng, space.head_kinds)
        return HeadOp(kind, _pick(rng, kernels) if kind == "DSC" else None)

    if mode == ValidationMode.STRICT:
        heads = (one_op(),) * n
    else:
        heads = tuple(one_op() for _ in range(n))
    depth = _pick(rng, space.ff_stack)
    ff = tuple(_pick(rng, space.ff_dims) for _ in range(depth))
    return LayerConfig(hidden, heads, ff)


def sample_transformer(rng: np.random.Generator, mode: ValidationMode = ValidationMode.STRICT,
                       space: DesignSpace = DEFAULT_SPACE, num_layers: int | None = None) -> TransformerConfig:
    l = num_layers if num_layers is not None else _pick(rng, space.num_layers)
    return TransformerConfig(tuple(sample_layer(rng, mode, space) for _ in range(l)))


def sample_space(seed: int, n: int, mode: ValidationMode = ValidationMode.STRICT,
                 space: DesignSpace = DEFAULT_SPACE, stratified: bool = False
                 ) -> list[tuple[TransformerConfig, AcceleratorConfig]]:
    """Draw ``n`` valid (transformer, accelerator) pairs.

    With ``stratified`` the layer count and memory config cycle through
    their value sets (in a seeded order) so small designs cover both.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    layer_order = list(rng.permutation(len(space.num_layers)))
    mem_order = list(rng.permutation(len(space.memory)))
    out = []
    for i in range(n):
        if stratified:
            txf = sample_transformer(rng, mode, space,
                                     num_layers=space.num_layers[layer_order[i % len(layer_order)]])
            acc = sample_accelerator(rng, space)
            acc = replace(acc, memory=MemoryConfig(*space.memory[mem_order[i % len(mem_order)]]))
        else:
            txf = sample_transformer(rng, mode, space)
            acc = sample_accelerator(rng, space)
        out.append((txf, acc))
    return out


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def load_transformer(path: str | Path) -> TransformerConfig:
    with open(path) as f:
        return TransformerConfig.from_dict(json.load(f))


def load_accelerator(path: str | Path) -> AcceleratorConfig:
    with open(path) as f:
        return AcceleratorConfig.from_dict(json.load(f))


def load_config(path: str | Path) -> TransformerConfig | AcceleratorConfig:
    """Load either config kind, recognised by its keys."""
    with open(path) as f:
        raw = json.load(f)
    if "layers" in raw:
        return TransformerConfig.from_dict(raw)
    return AcceleratorConfig.from_dict(raw)
