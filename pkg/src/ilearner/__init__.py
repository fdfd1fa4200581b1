"""Orthogonal meta-learners for E(Y^1 | Z), including the targeted imputation learner."""

from .errors import (ConfigError, ConvergenceError, DegenerateCovariateError, DegenerateTreatmentError,
                     DomainError, ILearnerError, InsufficientSupportError)
from .metalearners import (KINDS, CrossFitPlan, Dataset, FinalFitConfig, LearnerResult, NuisanceConfig,
                           fit_all, fit_metalearner, flip_treatment, make_crossfit_plan, predict)
from .nuisance import KnownFunction, NuisanceLearnerSpec
from .targeting import TargetingConfig, target_q

__version__ = "0.1.0"

__all__ = [
    "KINDS", "ConfigError", "ConvergenceError", "CrossFitPlan", "Dataset", "DegenerateCovariateError",
    "DegenerateTreatmentError", "DomainError", "FinalFitConfig", "ILearnerError",
    "InsufficientSupportError", "KnownFunction", "LearnerResult", "NuisanceConfig",
    "NuisanceLearnerSpec", "TargetingConfig", "fit_all", "fit_metalearner", "flip_treatment",
    "make_crossfit_plan", "predict", "target_q",
]
