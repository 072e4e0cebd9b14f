"""Nonnegative matrix factorization with side information, from linear
measurements: mask operators, link-function fitting, two alternating
solvers, identifiability checks and a synthetic benchmark harness."""

from .operators import (
    MaskKind,
    MeasurementOperator,
    MeasurementVector,
    make_periodic_aggregates,
    make_random_aggregates,
    project_polytope,
)
from .linkmodels import (
    FeatureSet,
    LinearLink,
    SplineLink,
    KernelRidgeLink,
    SplineBasis,
    build_spline_basis,
    fit_linear,
    fit_spline,
    fit_kernel_ridge,
    reduce_subproblem,
)
from .solver import FactorModel, SolverConfig, fit, kkt_residual, predict
from .solver2 import build_normal_system, fit2, solve_update
from .identifiability import (
    construct_certified_features,
    is_separable,
    is_strongly_boundary_close,
    worked_example_k4,
)
from . import bench, errors

__all__ = [
    "MaskKind",
    "MeasurementOperator",
    "MeasurementVector",
    "make_periodic_aggregates",
    "make_random_aggregates",
    "project_polytope",
    "FeatureSet",
    "LinearLink",
    "SplineLink",
    "KernelRidgeLink",
    "SplineBasis",
    "build_spline_basis",
    "fit_linear",
    "fit_spline",
    "fit_kernel_ridge",
    "reduce_subproblem",
    "FactorModel",
    "SolverConfig",
    "fit",
    "kkt_residual",
    "predict",
    "build_normal_system",
    "fit2",
    "solve_update",
    "construct_certified_features",
    "is_separable",
    "is_strongly_boundary_close",
    "worked_example_k4",
    "bench",
    "errors",
]

__version__ = "0.1.0"
