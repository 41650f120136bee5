"""
Spatial and fit-quality diagnostics.

This module provides Moran's I with its analytic (normality) and permutation
tests, RMSE/MAE/R² fit metrics, and the basis sweep that tabulates fit
quality and residual autocorrelation across basis dimensions.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.stats import norm
from sklearn.metrics import mean_absolute_error, mean_squared_error, r2_score

from .config import BasisFamily, EstimationConfig, MoranMethod
from .errors import DegenerateDataError, ParameterError
from .graph import AdjacencyGraph, PrecisionSpec

if TYPE_CHECKING:
    from .data_model import Dataset
    from .penalized_regression import PenalizedFit
    from .spectral_basis import BasisMatrix, KSelection

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoranResult:
    """Global Moran's I with its test.

    For binary W the statistic is not confined to [-1, 1].
    """

    I: float  # noqa: E741
    expected: float
    variance: float
    z: float
    p_value: float
    method: MoranMethod
    permutations: int = 0


@dataclass(frozen=True)
class FitMetrics:
    rmse: float
    mae: float
    r2: float
    active_bases: int = 0


def _centered_checked(values: NDArray[np.float64], graph: AdjacencyGraph) -> NDArray[np.float64]:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (graph.n,):
        raise ParameterError(
            f"values of shape {values.shape} for a {graph.n}-node graph",
            operation="morans_i",
        )
    if graph.edge_count == 0:
        raise DegenerateDataError(
            "Moran's I is undefined on a graph without edges (S0 = 0)",
            operation="morans_i",
        )
    centered = values - values.mean()
    if not np.any(np.abs(centered) > 1e-12 * max(1.0, float(np.max(np.abs(values))))):
        raise DegenerateDataError(
            "Moran's I is undefined for constant values", operation="morans_i"
        )
    return centered


def _statistic(centered: NDArray[np.float64], graph: AdjacencyGraph) -> float:
    n = graph.n
    lag = graph.adjacency @ centered
    return float((n / graph.total_weight) * (centered @ lag) / (centered @ centered))


def moran_statistic(values: NDArray[np.float64], graph: AdjacencyGraph) -> float:
    """I = (n/S0)·(e'We)/(e'e) on centered values e."""
    return _statistic(_centered_checked(values, graph), graph)


def _analytic_moments(graph: AdjacencyGraph) -> tuple[float, float]:
    """E[I] and Var[I] under the normality assumption."""
    n = graph.n
    s0 = graph.total_weight
    # For symmetric binary W: S1 = 2·S0 and S2 = sum_i (2 d_i)^2.
    s1 = 2.0 * s0
    s2 = float(np.sum((2.0 * graph.degree) ** 2))
    expected = -1.0 / (n - 1)
    second = (n * n * s1 - n * s2 + 3.0 * s0 * s0) / ((n * n - 1.0) * s0 * s0)
    return expected, second - expected * expected


def morans_i(
    values: NDArray[np.float64],
    graph: AdjacencyGraph,
    method: MoranMethod = MoranMethod.ANALYTIC,
    permutations: int = 999,
    seed: int = 0,
) -> MoranResult:
    """Moran's I of `values` over `graph` with a two-sided test.

    The analytic p-value uses the normal approximation with E[I] = -1/(n-1)
    and the normality-assumption variance. The permutation p-value is
    (1 + #{|I_b - E| >= |I - E|}) / (B + 1) over B seeded permutations.

    Raises:
        DegenerateDataError: If values are constant or the graph has no edges
    """
    centered = _centered_checked(values, graph)
    statistic = _statistic(centered, graph)
    expected, variance = _analytic_moments(graph)
    z = (statistic - expected) / np.sqrt(variance) if variance > 0 else np.nan

    if method is MoranMethod.ANALYTIC:
        p_value = float(2.0 * norm.sf(abs(z)))
        return MoranResult(
            I=statistic,
            expected=expected,
            variance=variance,
            z=float(z),
            p_value=p_value,
            method=method,
        )

    if permutations < 1:
        raise ParameterError("permutations must be >= 1", operation="morans_i")
    rng = np.random.default_rng(seed)
    shuffled = rng.permuted(np.tile(centered, (permutations, 1)), axis=1)
    lags = (graph.adjacency @ shuffled.T).T
    replicates = (graph.n / graph.total_weight) * np.einsum(
        "ij,ij->i", shuffled, lags
    ) / (centered @ centered)
    extreme = np.abs(replicates - expected) >= abs(statistic - expected) - 1e-12
    p_value = float((1 + np.sum(extreme)) / (permutations + 1))
    return MoranResult(
        I=statistic,
        expected=expected,
        variance=variance,
        z=float(z),
        p_value=p_value,
        method=method,
        permutations=permutations,
    )


def fit_metrics(
    y: NDArray[np.float64],
    y_hat: NDArray[np.float64],
    fit: "PenalizedFit | None" = None,
) -> FitMetrics:
    """RMSE, MAE and R² of predictions, with the fit's active basis count.

    Raises:
        DegenerateDataError: If y is constant (R² undefined)
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ParameterError(
            f"y has shape {y.shape} but predictions {y_hat.shape}",
            operation="fit_metrics",
        )
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise DegenerateDataError(
            "R² is undefined for a constant response", operation="fit_metrics"
        )
    return FitMetrics(
        rmse=float(np.sqrt(mean_squared_error(y, y_hat))),
        mae=float(mean_absolute_error(y, y_hat)),
        r2=float(r2_score(y, y_hat)),
        active_bases=fit.active_count if fit is not None else 0,
    )


@dataclass(frozen=True, eq=False)
class SweepReport:
    """Basis sweep of one family: fit quality and residual Moran per K."""

    family: BasisFamily
    treatment_name: str
    selection: "KSelection"

    @property
    def selected_K(self) -> int:
        return self.selection.K

    @property
    def no_pass(self) -> bool:
        return self.selection.no_pass

    def to_frame(self) -> pd.DataFrame:
        return self.selection.to_frame(self.family)


def basis_sweep(
    dataset: "Dataset",
    treatment_name: str,
    graph: AdjacencyGraph,
    family: BasisFamily,
    K_grid: Sequence[int],
    config: EstimationConfig,
    precision: PrecisionSpec = PrecisionSpec(),
    basis: "BasisMatrix | None" = None,
) -> SweepReport:
    """Evaluate the outcome model at each K of the grid.

    Residuals are cross-validated (out-of-fold) outcome predictions, so the
    autocorrelation test is not flattered by in-sample fit. The basis is
    decomposed once at max(K_grid) and truncated per K.

    Args:
        dataset: Units in graph order
        treatment_name: Treatment entering the outcome model unpenalized
        graph: Graph aligned to the dataset
        family: Basis family to sweep
        K_grid: Ascending basis dimensions
        config: Estimation settings (folds, seed, CV, Moran test)
        precision: ICAR precision parameters
        basis: Optional precomputed basis with at least max(K_grid) columns

    Returns:
        SweepReport whose selection marks the smallest passing K
    """
    from .dr_estimator import crossfit_outcome, fit_outcome, make_plan
    from .spectral_basis import KEvaluation, build_basis, select_K

    if not K_grid:
        raise ParameterError("K grid must not be empty", operation="basis_sweep")
    largest = max(K_grid)
    if basis is None or basis.family is not family or basis.K < largest:
        basis = build_basis(graph, family, largest, precision)
    plan = make_plan(dataset.n, config.folds, config.seed)

    def evaluate(K: int) -> KEvaluation:
        Z = basis.truncate(K)
        predictions = crossfit_outcome(dataset, treatment_name, Z, plan, config.cv)
        full_fit = fit_outcome(dataset, treatment_name, Z, config.cv).fit
        residuals = dataset.outcome - predictions.g_hat
        metrics = fit_metrics(dataset.outcome, predictions.g_hat, full_fit)
        logger.info(
            "%s K=%d rmse=%.4g r2=%.4f active=%d",
            family.value,
            K,
            metrics.rmse,
            metrics.r2,
            metrics.active_bases,
        )
        return KEvaluation(residuals=residuals, metrics=metrics)

    def moran(values: NDArray[np.float64], g: AdjacencyGraph) -> MoranResult:
        return morans_i(
            values,
            g,
            method=config.moran_method,
            permutations=config.moran_permutations,
            seed=config.seed,
        )

    selection = select_K(list(K_grid), evaluate, graph, config.alpha, moran=moran)
    return SweepReport(family=family, treatment_name=treatment_name, selection=selection)
