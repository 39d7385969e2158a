"""Inverse uncertainty quantification of computer-model parameters.

Frequentist estimators (CIRCE, MLE/MAP, deterministic MCDA), Bayesian
calibration (modular Bayesian with GP surrogates and MCMC, probabilistic MCDA)
and empirical range finders (IPREM, DIPE, sample adjustment), all exercised on
synthetic experiments with a known truth.
"""

from .errors import (BracketError, CollinearityError, IUQError, ModelFailure,
                     NotPositiveDefiniteError, NumericalError, SurrogateError, ValidationError)
from .models import (DesignPoint, ExperimentRecord, ModelSpec, QoIVector, affine_model,
                     exponential_model, generate_synthetic_experiments, reflood_model)
from .stats import GaussianParamSpec, RngStream

__version__ = "0.1.0"

__all__ = ["BracketError", "CollinearityError", "IUQError", "ModelFailure",
           "NotPositiveDefiniteError", "NumericalError", "SurrogateError", "ValidationError",
           "DesignPoint", "ExperimentRecord", "ModelSpec", "QoIVector", "affine_model",
           "exponential_model", "generate_synthetic_experiments", "reflood_model",
           "GaussianParamSpec", "RngStream", "__version__"]
