"""Detect adversarial examples and classify their threat model with a linear head over fixed embeddings."""
__version__ = "0.1.0"

from .errors import (AttackError, ConfigError, CorruptionError, DegenerateDefenseError, FormatError,
                     InvalidInputError, SimCatError, StateError, TrainingDivergedError, UndefinedCorrelationError)
from .heads import (LabeledEmbeddingSet, LinearHead, classify, detect, ensemble_detect, fit_classifier, fit_detector,
                    logistic_objective)
from .solver import SolverConfig, solve

__all__ = [
    "AttackError", "ConfigError", "CorruptionError", "DegenerateDefenseError", "FormatError", "InvalidInputError",
    "SimCatError", "StateError", "TrainingDivergedError", "UndefinedCorrelationError", "LabeledEmbeddingSet",
    "LinearHead", "classify", "detect", "ensemble_detect", "fit_classifier", "fit_detector", "logistic_objective",
    "SolverConfig", "solve",
]
