"""Bayesian simultaneous non-crossing quantile regression with penalised splines.

Quantile curves are linear in B-spline coefficients whose values at the
vertices of a polytope enclosing the spline moment curve carry quantile
pyramid priors; monotone vertex quantiles give curves that cannot cross.
"""

from .model import Dataset, ModelConfig, build_geometry, initial_state, log_posterior
from .sampler import ChainResult, MCMCConfig, fit
from .simharness import DesignSpec, generate, run_study

__all__ = ["ChainResult", "Dataset", "DesignSpec", "MCMCConfig", "ModelConfig", "build_geometry",
           "fit", "generate", "initial_state", "log_posterior", "run_study"]
__version__ = "0.1.0"
