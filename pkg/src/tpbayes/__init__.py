"""Bayesian tensor-product B-spline regression with derivative credible sets."""

__version__ = "0.1.0"

from .credible import Grid, contains, l2_ball, l2_radius, pointwise_interval, sup_band
from .derivop import build_deriv_operator, eval_derivative, lift_basis
from .design import BandedSymMatrix, build_design, factorize, gram
from .posterior import (
    EmpiricalBayes,
    FitPlan,
    FixedSigma,
    HierarchicalIG,
    PosteriorState,
    PriorSpec,
    fit,
    sample_function,
    sigma_posterior,
)
from .splinebasis import BasisSpec, KnotVector, eval_axis_basis, eval_tensor_basis, make_knots

__all__ = [
    "BandedSymMatrix",
    "BasisSpec",
    "EmpiricalBayes",
    "FitPlan",
    "FixedSigma",
    "Grid",
    "HierarchicalIG",
    "KnotVector",
    "PosteriorState",
    "PriorSpec",
    "build_deriv_operator",
    "build_design",
    "contains",
    "eval_axis_basis",
    "eval_derivative",
    "eval_tensor_basis",
    "factorize",
    "fit",
    "gram",
    "l2_ball",
    "l2_radius",
    "lift_basis",
    "make_knots",
    "pointwise_interval",
    "sample_function",
    "sigma_posterior",
    "sup_band",
]
