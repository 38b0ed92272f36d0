import pytest

from txaccel.codesign.metric import (DEFAULT_WEIGHTS, P_MIN, MissingReference, PerfWeights, ReferenceMaxima,
                                     UnnormalizedMeasure, normalize_measures, performance)


@pytest.mark.parametrize("measures,expected", [
    ((0.0, 0.0, 0.0, 0.0, 0.62), 0.81),
    ((1.0, 1.0, 1.0, 1.0, 1.0), 0.5),
    ((0.5, 0.2, 0.4, 1.0, 0.9), 0.05 + 0.08 + 0.12 + 0.0 + 0.45),
    ((0.0, 0.0, 0.0, 0.0, 0.0), 0.5),
])
def test_default_weights_hand_values(measures, expected):
    assert abs(performance(measures, PerfWeights(0.1, 0.1, 0.2, 0.1, 0.5)) - expected) < 1e-12


def test_other_weights_and_dict_input():
    w = PerfWeights(0.25, 0.25, 0.0, 0.0, 0.5)
    m = {"latency": 0.2, "area": 0.6, "dynamic_energy": 0.9, "leakage_energy": 0.1, "accuracy": 0.8}
    assert abs(performance(m, w) - (0.25 * 0.8 + 0.25 * 0.4 + 0.5 * 0.8)) < 1e-12
    assert DEFAULT_WEIGHTS == PerfWeights.from_seq([0.1, 0.1, 0.2, 0.1, 0.5])


def test_penalty_value():
    assert P_MIN == -1.0


@pytest.mark.parametrize("w", [(0.5, 0.5, 0.5, 0.0, 0.0), (-0.1, 0.3, 0.3, 0.0, 0.5)])
def test_bad_weights(w):
    with pytest.raises(ValueError):
        PerfWeights(*w)


def test_unnormalized_measure():
    with pytest.raises(UnnormalizedMeasure):
        performance((1.2, 0, 0, 0, 0.5))
    with pytest.raises(ValueError):
        performance((0, 0, 0, 0.5))


def test_normalize_clamps_and_needs_maxima(tmp_path):
    ref = ReferenceMaxima(2.0, 100.0, 4.0, 8.0, {})
    out = normalize_measures({"latency": 1.0, "area": 250.0, "dynamic_energy": 0.0, "leakage_energy": 2.0}, ref,
                             accuracy=0.7)
    assert out == {"latency": 0.5, "area": 1.0, "dynamic_energy": 0.0, "leakage_energy": 0.25, "accuracy": 0.7}
    with pytest.raises(MissingReference):
        normalize_measures({"latency": 1.0}, None)
    with pytest.raises(MissingReference):
        ReferenceMaxima.from_dict({"latency": 1.0})
    ref.save(tmp_path / "m.json")
    assert ReferenceMaxima.load(tmp_path / "m.json") == ref


def test_shipped_maxima_load():
    m = ReferenceMaxima.load()
    assert m.latency > 0 and m.area > 0 and m.dynamic_energy > 0 and m.leakage_energy > 0
