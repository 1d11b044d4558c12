"""Debiased estimation of linear functionals of a regression via generalized
Riesz regression, with orthogonal scores, cross-fitting and TMLE."""

from .estimator import Estimate, EstimatorConfig, estimate
from .simulate import DgpSpec, sample, true_theta
from .types import Dataset, read_csv, write_csv

__all__ = [
    "Dataset",
    "DgpSpec",
    "Estimate",
    "EstimatorConfig",
    "estimate",
    "read_csv",
    "sample",
    "true_theta",
    "write_csv",
]
