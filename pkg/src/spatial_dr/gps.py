"""
Generalized propensity score for a continuous treatment.

This module provides the normal GPS model A | X, Z ~ N(mu(X, Z), sigma²) with
a selectively penalized mean model, the stabilized weights
w = f(A) / f(A | X, Z), and the covariate balance table behind love plots.

The marginal density f(A) is a normal with the treatment's sample moments by
default; a Gaussian kernel density estimate with Silverman's bandwidth is
available instead.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.stats import gaussian_kde, norm

from .config import CvConfig, MarginalDensity
from .data_model import Dataset
from .errors import DegenerateDataError, ExtremeWeightError, ParameterError
from .penalized_regression import Design, PenalizedFit, assemble_design, fit_lasso_cv
from .spectral_basis import BasisMatrix

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300


def gps_design(
    dataset: Dataset, basis: BasisMatrix | None, rows: NDArray[np.intp] | None = None
) -> Design:
    """[intercept, confounders] unpenalized, basis columns penalized."""
    idx = np.arange(dataset.n) if rows is None else rows
    penalized = basis.Z[idx] if basis is not None and basis.K else None
    names = basis.column_names() if basis is not None and basis.K else None
    return assemble_design(
        {name: values[idx] for name, values in dataset.confounders.items()},
        penalized,
        names,
        n=len(idx),
    )


def require_variation(values: NDArray[np.float64], name: str, operation: str) -> None:
    if float(np.var(values)) <= 1e-14 * max(1.0, float(np.mean(values**2))):
        raise DegenerateDataError(
            f"treatment {name!r} has zero variance", operation=operation
        )


@dataclass(frozen=True, eq=False)
class GpsModel:
    """A fitted normal GPS model and the marginal treatment density."""

    treatment_name: str
    mean_fit: PenalizedFit | None
    fitted_mean: NDArray[np.float64]
    sigma2: float
    marginal_mean: float
    marginal_var: float
    marginal: MarginalDensity = MarginalDensity.NORMAL
    kde: gaussian_kde | None = None

    def __post_init__(self) -> None:
        errors = []
        if not self.sigma2 > 0:
            errors.append(f"sigma2 must be positive, got {self.sigma2}")
        if not self.marginal_var > 0:
            errors.append(f"marginal_var must be positive, got {self.marginal_var}")
        if errors:
            raise DegenerateDataError(
                "GPS model has a non-positive variance", errors, operation="GpsModel"
            )

    def marginal_density(self, a: NDArray[np.float64]) -> NDArray[np.float64]:
        """f(A) at the given treatment values."""
        a = np.asarray(a, dtype=np.float64)
        if self.marginal is MarginalDensity.KDE and self.kde is not None:
            return np.asarray(self.kde(a), dtype=np.float64)
        return np.asarray(
            norm.pdf(a, loc=self.marginal_mean, scale=np.sqrt(self.marginal_var)),
            dtype=np.float64,
        )


def fit_gps(
    dataset: Dataset,
    treatment_name: str,
    Z: BasisMatrix | None,
    cv_config: CvConfig = CvConfig(),
    marginal: MarginalDensity = MarginalDensity.NORMAL,
) -> GpsModel:
    """Fit the GPS mean model on the full sample.

    Confounders and the intercept enter unpenalized, basis columns
    penalized. sigma2 is the mean squared residual (denominator n); the
    marginal moments are the treatment's sample mean and variance.

    Raises:
        DegenerateDataError: If the treatment is constant
    """
    a = dataset.treatment(treatment_name)
    require_variation(a, treatment_name, "fit_gps")
    if Z is not None and Z.n != dataset.n:
        raise ParameterError(
            f"basis has {Z.n} rows for {dataset.n} units", operation="fit_gps"
        )
    design = gps_design(dataset, Z)
    fit = fit_lasso_cv(design.X, a, design.spec, cv_config)
    sigma2 = fit.residual_variance
    if sigma2 <= 0.0:
        # perfect fit; keep the density finite
        sigma2 = float(np.finfo(float).tiny)
    kde = None
    if marginal is MarginalDensity.KDE:
        kde = gaussian_kde(a, bw_method="silverman")
        logger.info("Marginal treatment density for %s: Gaussian KDE", treatment_name)
    else:
        logger.debug("Marginal treatment density for %s: normal", treatment_name)
    logger.debug(
        "GPS %s: lambda=%.4g active=%d sigma2=%.4g",
        treatment_name,
        fit.lambda_,
        fit.active_count,
        fit.residual_variance,
    )
    return GpsModel(
        treatment_name=treatment_name,
        mean_fit=fit,
        fitted_mean=fit.predict(design.X),
        sigma2=sigma2,
        marginal_mean=float(np.mean(a)),
        marginal_var=float(np.var(a)),
        marginal=marginal,
        kde=kde,
    )


def gps_density(
    model: GpsModel,
    a: float | NDArray[np.float64],
    mu: float | NDArray[np.float64],
    sigma2: float | NDArray[np.float64] | None = None,
) -> NDArray[np.float64]:
    """Conditional normal density φ(a; mu, σ²), σ² defaulting to the model's."""
    variance = model.sigma2 if sigma2 is None else sigma2
    return np.asarray(
        norm.pdf(a, loc=mu, scale=np.sqrt(variance)), dtype=np.float64
    )


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Stabilized weights and the truncation applied to them, if any."""

    w: NDArray[np.float64]
    truncation: tuple[float, float] | None = None
    bounds: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.w)) or np.any(self.w <= 0):
            raise ExtremeWeightError(
                "weights must be positive and finite", operation="WeightVector"
            )
        self.w.setflags(write=False)

    def summary(self) -> dict[str, float]:
        return {
            "min": float(self.w.min()),
            "mean": float(self.w.mean()),
            "max": float(self.w.max()),
        }


def stabilized_weights(
    model: GpsModel,
    dataset: Dataset,
    treatment_name: str,
    truncation: tuple[float, float] | None = None,
    *,
    fitted_mean: NDArray[np.float64] | None = None,
    sigma2: float | NDArray[np.float64] | None = None,
) -> WeightVector:
    """w_j = f(A_j) / φ(A_j; mu_j, σ²), never renormalized.

    Args:
        model: Fitted GPS model (supplies the marginal density)
        dataset: Units aligned with the model
        treatment_name: Treatment the model was fitted for
        truncation: Optional (low, high) percentiles to clamp weights to
        fitted_mean: Per-unit conditional means; defaults to the model's
            in-sample fit (cross-fitting passes out-of-fold means here)
        sigma2: Conditional variance, scalar or per unit; defaults to the
            model's

    Raises:
        ExtremeWeightError: If a conditional density underflows
    """
    a = dataset.treatment(treatment_name)
    mu = model.fitted_mean if fitted_mean is None else np.asarray(fitted_mean)
    variance = model.sigma2 if sigma2 is None else sigma2
    conditional = gps_density(model, a, mu, variance)
    if np.any(conditional < DENSITY_FLOOR):
        worst = int(np.argmin(conditional))
        raise ExtremeWeightError(
            f"conditional treatment density underflows for {treatment_name!r}; "
            "consider weight truncation or a richer treatment model",
            operation="stabilized_weights",
            unit=dataset.unit_ids[worst],
        )
    marginal = model.marginal_density(a)
    w = marginal / conditional
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ExtremeWeightError(
            f"non-finite or zero weights for {treatment_name!r}; consider truncation",
            operation="stabilized_weights",
        )

    if truncation is None:
        return WeightVector(w=w)
    low, high = truncation
    bounds = np.percentile(w, [low, high])
    clipped = int(np.sum((w < bounds[0]) | (w > bounds[1])))
    logger.info(
        "Truncated %d weights of %s to percentiles [%g, %g] = [%.4g, %.4g]",
        clipped,
        treatment_name,
        low,
        high,
        bounds[0],
        bounds[1],
    )
    return WeightVector(
        w=np.clip(w, bounds[0], bounds[1]),
        truncation=(float(low), float(high)),
        bounds=(float(bounds[0]), float(bounds[1])),
    )


def weighted_correlation(
    x: NDArray[np.float64], y: NDArray[np.float64], w: NDArray[np.float64]
) -> float:
    """Pearson correlation under weights normalized to sum to one.

    Returns NaN when either variable has zero weighted variance.
    """
    p = w / w.sum()
    dx = x - p @ x
    dy = y - p @ y
    vx, vy = p @ (dx * dx), p @ (dy * dy)
    if vx <= 0.0 or vy <= 0.0:
        return float("nan")
    return float((p @ (dx * dy)) / np.sqrt(vx * vy))


def balance_table(
    dataset: Dataset,
    treatment_name: str,
    weights: WeightVector,
    basis: BasisMatrix | None = None,
) -> pd.DataFrame:
    """Unweighted and weighted treatment correlations per confounder.

    With a basis, two summary rows follow: the mean and the maximum absolute
    correlation over the basis columns.
    """
    a = dataset.treatment(treatment_name)
    ones = np.ones(dataset.n)
    rows: list[dict[str, object]] = []
    for name, values in dataset.confounders.items():
        rows.append(
            {
                "confounder": name,
                "rho_unweighted": weighted_correlation(values, a, ones),
                "rho_weighted": weighted_correlation(values, a, weights.w),
            }
        )
    if basis is not None and basis.K:
        raw = np.array([abs(weighted_correlation(z, a, ones)) for z in basis.Z.T])
        weighted = np.array([abs(weighted_correlation(z, a, weights.w)) for z in basis.Z.T])
        rows.append(
            {
                "confounder": "basis_mean_abs",
                "rho_unweighted": float(np.nanmean(raw)),
                "rho_weighted": float(np.nanmean(weighted)),
            }
        )
        rows.append(
            {
                "confounder": "basis_max_abs",
                "rho_unweighted": float(np.nanmax(raw)),
                "rho_weighted": float(np.nanmax(weighted)),
            }
        )
    return pd.DataFrame.from_records(
        rows, columns=["confounder", "rho_unweighted", "rho_weighted"]
    )
