"""
Spatially deconfounded doubly robust effect estimation for continuous treatments.

This package builds MEM/ICAR spectral bases from an areal adjacency graph,
fits selectively penalized nuisance models (basis columns penalized,
treatment and confounders not), and combines cross-fitted generalized
propensity score weights with the outcome model into a doubly robust effect
estimate with an influence-function standard error.
"""

__version__ = "0.1.0"
__author__ = "spatial_dr contributors"

from .config import (
    BasisFamily,
    CvConfig,
    EstimationConfig,
    MarginalDensity,
    MoranMethod,
    RunConfig,
    config_hash,
    load_run_config,
)
from .data_model import ColumnSpec, Dataset, align_graph, load_dataset, write_dataset
from .diagnostics import FitMetrics, MoranResult, SweepReport, basis_sweep, fit_metrics, morans_i
from .dr_estimator import (
    CrossFitPlan,
    DrResult,
    crossfit_nuisances,
    dr_estimate,
    make_plan,
    naive_ols,
    run_treatment,
)
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DataError,
    NumericalError,
    ParameterError,
    SpatialDrError,
)
from .gps import GpsModel, WeightVector, balance_table, fit_gps, stabilized_weights
from .graph import AdjacencyGraph, PrecisionSpec, from_edge_list, rook_lattice
from .penalized_regression import DesignSpec, PenalizedFit, cv_lambda, fit_lasso, fit_lasso_cv
from .pipeline import Pipeline, Stage, run_bounded
from .spectral_basis import BasisMatrix, build_basis, icar_basis, mem_basis, select_K
from .synthetic import DgpSpec, generate, write_simulation

__all__ = [
    "AdjacencyGraph",
    "BasisFamily",
    "BasisMatrix",
    "ColumnSpec",
    "ConfigurationError",
    "ConvergenceError",
    "CrossFitPlan",
    "CvConfig",
    "DataError",
    "Dataset",
    "DesignSpec",
    "DgpSpec",
    "DrResult",
    "EstimationConfig",
    "FitMetrics",
    "GpsModel",
    "MarginalDensity",
    "MoranMethod",
    "MoranResult",
    "NumericalError",
    "ParameterError",
    "PenalizedFit",
    "Pipeline",
    "PrecisionSpec",
    "RunConfig",
    "SpatialDrError",
    "Stage",
    "SweepReport",
    "WeightVector",
    "align_graph",
    "balance_table",
    "basis_sweep",
    "build_basis",
    "config_hash",
    "crossfit_nuisances",
    "cv_lambda",
    "dr_estimate",
    "fit_gps",
    "fit_lasso",
    "fit_lasso_cv",
    "fit_metrics",
    "from_edge_list",
    "generate",
    "icar_basis",
    "load_dataset",
    "load_run_config",
    "make_plan",
    "mem_basis",
    "morans_i",
    "naive_ols",
    "rook_lattice",
    "run_bounded",
    "run_treatment",
    "select_K",
    "stabilized_weights",
    "write_dataset",
    "write_simulation",
]
