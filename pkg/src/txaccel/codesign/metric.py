"""Scalar performance of a transformer-accelerator pair."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

P_MIN = -1.0
MEASURES = ("latency", "area", "dynamic_energy", "leakage_energy", "accuracy")
COST_MEASURES = MEASURES[:4]


class UnnormalizedMeasure(ValueError):
    pass


class MissingReference(KeyError):
    pass


@dataclass(frozen=True)
class PerfWeights:
    alpha: float = 0.1    # latency
    beta: float = 0.1     # area
    gamma: float = 0.2    # dynamic energy
    delta: float = 0.1    # leakage energy
    epsilon: float = 0.5  # accuracy

    def __post_init__(self):
        w = self.as_tuple()
        if any(v < 0 for v in w):
            raise ValueError("weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {sum(w)}, expected 1")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.alpha, self.beta, self.gamma, self.delta, self.epsilon)

    @classmethod
    def from_seq(cls, w) -> "PerfWeights":
        if isinstance(w, dict):
            return cls(**w)
        return cls(*map(float, w))


DEFAULT_WEIGHTS = PerfWeights()


def performance(measures, weights: PerfWeights = DEFAULT_WEIGHTS) -> float:
    """alpha(1-L) + beta(1-A) + gamma(1-D) + delta(1-K) + epsilon*Acc.

    ``measures`` is (L, A, D, K, Acc) or a dict keyed by MEASURES, all
    normalized to [0, 1]."""
    if isinstance(measures, dict):
        measures = [measures[k] for k in MEASURES]
    m = [float(v) for v in measures]
    if len(m) != 5:
        raise ValueError("need five measures")
    for name, v in zip(MEASURES, m):
        if not 0.0 <= v <= 1.0:
            raise UnnormalizedMeasure(f"{name}={v} outside [0, 1]")
    a, b, g, d, e = weights.as_tuple()
    L, A, D, K, acc = m
    return a * (1 - L) + b * (1 - A) + g * (1 - D) + d * (1 - K) + e * acc


@dataclass(frozen=True)
class ReferenceMaxima:
    latency: float
    area: float
    dynamic_energy: float
    leakage_energy: float
    settings: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceMaxima":
        missing = [k for k in COST_MEASURES if k not in d]
        if missing:
            raise MissingReference(f"reference maxima missing {missing}")
        return cls(*(float(d[k]) for k in COST_MEASURES), dict(d.get("settings", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ReferenceMaxima":
        if path is None:
            with resources.files("txaccel").joinpath("data/reference_maxima.json").open() as f:
                return cls.from_dict(json.load(f))
        with open(path) as f:
            return cls.from_dict(json.load(f))


def normalize_measures(raw: dict, maxima, accuracy: float | None = None) -> dict:
    """Cost measures divided by their reference maxima, clamped to [0, 1].
    ``raw`` holds latency, area, dynamic_energy, leakage_energy (and
    optionally accuracy, already in [0, 1])."""
    if maxima is None:
        raise MissingReference("no reference maxima")
    if isinstance(maxima, ReferenceMaxima):
        maxima = maxima.to_dict()
    out = {}
    for k in COST_MEASURES:
        ref = maxima.get(k)
        if ref is None or not ref > 0:
            raise MissingReference(f"reference maximum for {k} missing or not positive")
        out[k] = min(1.0, max(0.0, float(raw[k]) / float(ref)))
    acc = accuracy if accuracy is not None else raw.get("accuracy")
    if acc is not None:
        out["accuracy"] = min(1.0, max(0.0, float(acc)))
    return out
