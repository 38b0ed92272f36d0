"""Accuracy oracles. Neither is a claim about real benchmark scores: the
synthetic oracle is a fixed formula, the toy trainer fits a tiny task."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..graph import EvalMode, InvalidConfig, build_graph, evaluate, evaluate_forward, init_params, param_grads
from ..spaces import LayerConfig, TransformerConfig, ValidationMode, validate_transformer


def head_params(kind: str, hidden: int, d: int, kernel: int | None = None) -> int:
    if kind == "SA-SDP":
        return 4 * hidden * d
    if kind == "SA-WMA":
        return 4 * hidden * d + d * d
    if kind in ("LT-DFT", "LT-DCT"):
        return 2 * hidden * d
    return 2 * hidden * d + int(kernel or 0)


def param_count(cfg: TransformerConfig) -> int:
    """Trainable weights of the mapped model."""
    from ..graph import head_dims
    total = 0
    h_prev = cfg.layers[0].hidden
    for layer in cfg.layers:
        h = layer.hidden
        if h != h_prev:
            total += h_prev * h
        for op, d in zip(layer.heads, head_dims(h, layer.num_heads)):
            total += head_params(op.kind, h, d, op.param)
        dims = (h,) + tuple(layer.ff) + (h,)
        total += sum(a * b for a, b in zip(dims, dims[1:]))
        h_prev = h
    return total


@dataclass(frozen=True)
class SyntheticOracle:
    """acc = base + span * (1 - exp(-params / scale)) + bonus * (distinct head categories - 1) / 6

    Deterministic, bounded below 1, increasing in parameter count with
    saturating returns, and rewarding head-type diversity."""
    base: float = 0.55
    span: float = 0.35
    scale: float = 15e6
    bonus: float = 0.04
    validation: ValidationMode = ValidationMode.EXTENDED

    def __call__(self, cfg: TransformerConfig) -> float:
        rep = validate_transformer(cfg, self.validation)
        if not rep.valid:
            raise InvalidConfig("; ".join(map(str, rep.violations)))
        p = param_count(cfg)
        cats = {h.category for layer in cfg.layers for h in layer.heads}
        acc = self.base + self.span * (1.0 - math.exp(-p / self.scale)) + self.bonus * (len(cats) - 1) / 6.0
        return min(1.0, max(0.0, acc))


def shrink_config(cfg: TransformerConfig, hidden_div: int = 16, ff_div: int = 64,
                  max_layers: int = 2) -> TransformerConfig:
    layers = []
    for layer in cfg.layers[:max_layers]:
        h = max(layer.num_heads, layer.hidden // hidden_div)
        ff = tuple(max(4, f // ff_div) for f in layer.ff)
        layers.append(LayerConfig(h, layer.heads, ff))
    return TransformerConfig(tuple(layers))


@dataclass
class ToyTrainer:
    """Held-out accuracy of a shrunken copy of the model trained with SGD
    on a synthetic two-class sequence task, through the graph's own
    forward and backward passes."""
    seed: int = 0
    seq_len: int = 8
    n_train: int = 128
    n_test: int = 128
    batch: int = 16
    steps: int = 80
    lr: float = 0.05
    hidden_div: int = 16
    ff_div: int = 64
    max_layers: int = 2
    activation: str = "GeLU"

    def task(self, d: int):
        rng = np.random.default_rng(self.seed + 7919)
        n = self.n_train + self.n_test
        x = rng.normal(size=(n, self.seq_len, d))
        # label: does the first half of the features outweigh the second, averaged over tokens
        # where the token's own sign gate is on
        gate = (x[:, :, :1] > 0).astype(float)
        score = (gate * (x[:, :, : d // 2].mean(-1, keepdims=True) - x[:, :, d // 2:].mean(-1, keepdims=True))).mean((1, 2))
        y = (score > 0).astype(int)
        return x[:self.n_train], y[:self.n_train], x[self.n_train:], y[self.n_train:]

    def __call__(self, cfg: TransformerConfig) -> float:
        small = shrink_config(cfg, self.hidden_div, self.ff_div, self.max_layers)
        d = small.layers[0].hidden
        g_train = build_graph(small, self.seq_len, EvalMode.TRAINING, batch=self.batch, activation=self.activation,
                              validation=None)
        params = init_params(g_train, self.seed)
        h_out = small.layers[-1].hidden
        rng = np.random.default_rng(self.seed)
        wc = rng.normal(0, 1 / math.sqrt(h_out), size=(h_out, 2))
        bc = np.zeros(2)
        xtr, ytr, xte, yte = self.task(d)
        out_id = g_train.outputs["out"]
        for step in range(self.steps):
            idx = rng.choice(self.n_train, self.batch, replace=False)
            xb, yb = xtr[idx], ytr[idx]
            out = evaluate_forward(g_train, xb, params)[out_id]
            pooled = out.mean(1)
            logits = pooled @ wc + bc
            p = np.exp(logits - logits.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            dlog = p.copy()
            dlog[np.arange(self.batch), yb] -= 1.0
            dlog /= self.batch
            dpooled = dlog @ wc.T
            dy = np.repeat(dpooled[:, None, :] / self.seq_len, self.seq_len, axis=1)
            wc -= self.lr * pooled.T @ dlog
            bc -= self.lr * dlog.sum(0)
            vals = evaluate(g_train, {"x": xb, "dy": dy}, params)
            for name, grad in param_grads(g_train, vals).items():
                params[name] = params[name] - self.lr * grad
        correct = 0
        for s in range(0, self.n_test, self.batch):
            xb = xte[s:s + self.batch]
            if xb.shape[0] < self.batch:
                xb = np.concatenate([xb, np.zeros((self.batch - xb.shape[0],) + xb.shape[1:])])
            out = evaluate_forward(g_train, xb, params)[out_id]
            pred = (out.mean(1) @ wc + bc).argmax(1)[: min(self.batch, self.n_test - s)]
            correct += int((pred == yte[s:s + pred.size]).sum())
        return correct / self.n_test


ORACLES = {"synthetic": SyntheticOracle, "toy": ToyTrainer}


def make_oracle(name: str = "synthetic", **kw):
    try:
        return ORACLES[name](**kw)
    except KeyError:
        raise ValueError(f"unknown oracle {name!r}") from None
