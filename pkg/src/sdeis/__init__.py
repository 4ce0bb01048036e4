"""Importance sampling of SDE paths conditioned on an end-time observation.

Proposals are built around the most likely path: a global Gaussian (linear
map), a step-by-step re-optimized Gaussian (dynamic linear map), and their
antithetic symmetrizations.
"""
from .diagnostics import (
    EnsembleStats,
    WeightedHistogram,
    loglog_slope,
    mode_mass,
    relative_variance,
    weighted_marginal,
    zero_crossings,
)
from .model import MODEL_NAMES, PathGrid, SdeModel, Stepper, builtin_model
from .optimize import NewtonSettings, OptimalPathResult, minimize_path, minimize_path_from_rest
from .pathspace import BlockTridiag, path_cost, path_cost_grad, path_cost_hessian
from .samplers import Ensemble, SamplerKind, WeightedPath, run_ensemble, symmetrize

__version__ = "0.1.0"

__all__ = [
    "BlockTridiag", "Ensemble", "EnsembleStats", "MODEL_NAMES", "NewtonSettings",
    "OptimalPathResult", "PathGrid", "SamplerKind", "SdeModel", "Stepper",
    "WeightedHistogram", "WeightedPath", "builtin_model", "loglog_slope",
    "minimize_path", "minimize_path_from_rest", "mode_mass", "path_cost",
    "path_cost_grad", "path_cost_hessian", "relative_variance", "run_ensemble",
    "symmetrize", "weighted_marginal", "zero_crossings",
]
