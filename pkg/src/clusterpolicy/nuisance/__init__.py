from .gbt import GBTLearner
from .knn import KNNLearner
from .logit import LogitLearner, SeparationWarning
from .model import (
    ConfigurationError,
    ConstantTreatment,
    LearnerSpec,
    NuisanceModel,
    cluster_G,
    cluster_H,
    fit_nuisance,
    fit_outcome,
    fit_propensity,
)
from .stack import StackedLearner, project_simplex, stack_weights

__all__ = [
    "GBTLearner", "KNNLearner", "LogitLearner", "SeparationWarning", "ConfigurationError",
    "ConstantTreatment", "LearnerSpec", "NuisanceModel", "cluster_G", "cluster_H", "fit_nuisance",
    "fit_outcome", "fit_propensity", "StackedLearner", "project_simplex", "stack_weights",
]
