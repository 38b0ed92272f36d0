"""Co-design search over transformer x accelerator pairs."""
from .metric import (DEFAULT_WEIGHTS, MEASURES, P_MIN, MissingReference, PerfWeights, ReferenceMaxima,
                     UnnormalizedMeasure, normalize_measures, performance)
from .oracle import SyntheticOracle, ToyTrainer, make_oracle, param_count
from .search import (METHODS, Constraints, EvalPoint, EvalSettings, Evaluator, JointSpace, Lattice, SearchTrace,
                     compute_reference_maxima, corner_pair, evaluate_pair, gobi_maximize, repair_transformer,
                     run_search)
from .surrogate import Surrogate, UnfittedSurrogate

__all__ = [
    "DEFAULT_WEIGHTS", "MEASURES", "P_MIN", "MissingReference", "PerfWeights", "ReferenceMaxima",
    "UnnormalizedMeasure", "normalize_measures", "performance", "SyntheticOracle", "ToyTrainer", "make_oracle",
    "param_count", "METHODS", "Constraints", "EvalPoint", "EvalSettings", "Evaluator", "JointSpace", "Lattice",
    "SearchTrace", "compute_reference_maxima", "corner_pair", "evaluate_pair", "gobi_maximize",
    "repair_transformer", "run_search", "Surrogate", "UnfittedSurrogate",
]
