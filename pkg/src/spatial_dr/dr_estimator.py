"""
Cross-fitted doubly robust effect estimation.

This module provides the cross-fitting plan, the out-of-fold nuisance
predictions (GPS mean mu and outcome regression g), the doubly robust
estimator

    tau = beta + [(1/n)·Σ w_j (A_j - mu_j)(y_j - g_j)] / [(1/n)·Σ (A_j - mu_j) A_j]

with its influence-function standard error, and run_treatment, which composes
these into one complete analysis of a single treatment.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.linalg
from numpy.typing import NDArray

from .config import CvConfig, EstimationConfig
from .data_model import Dataset
from .diagnostics import MoranResult, morans_i
from .errors import (
    DegenerateDataError,
    ParameterError,
    SingularDenominatorError,
    SpatialDrError,
)
from .gps import (
    GpsModel,
    WeightVector,
    balance_table,
    fit_gps,
    gps_design,
    require_variation,
    stabilized_weights,
)
from .graph import AdjacencyGraph
from .penalized_regression import (
    Design,
    PenalizedFit,
    assemble_design,
    fit_lasso_cv,
    fold_assignment,
)
from .spectral_basis import BasisMatrix

logger = logging.getLogger(__name__)

DENOMINATOR_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class CrossFitPlan:
    """Fold label per unit; a pure function of (n, folds, seed)."""

    n: int
    folds: int
    seed: int
    assignment: NDArray[np.intp]

    def test_rows(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.assignment == fold)

    def train_rows(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.folds).tolist()


def make_plan(n: int, folds: int = 10, seed: int = 0) -> CrossFitPlan:
    """Shuffled, balanced fold assignment (sizes differ by at most one).

    Raises:
        ParameterError: If folds < 2 or folds > n
    """
    assignment = fold_assignment(n, folds, seed)
    assignment.setflags(write=False)
    return CrossFitPlan(n=n, folds=folds, seed=seed, assignment=assignment)


def _fold_cv(cv: CvConfig, fold: int) -> CvConfig:
    seed = int(np.random.SeedSequence([cv.seed, fold]).generate_state(1)[0])
    return cv.with_seed(seed)


def outcome_design(
    dataset: Dataset,
    treatment_name: str,
    basis: BasisMatrix | None,
    rows: NDArray[np.intp] | None = None,
) -> Design:
    """[intercept, treatment, confounders] unpenalized, basis penalized."""
    idx = np.arange(dataset.n) if rows is None else rows
    unpenalized = {treatment_name: dataset.treatment(treatment_name)[idx]}
    unpenalized.update({k: v[idx] for k, v in dataset.confounders.items()})
    has_basis = basis is not None and basis.K > 0
    return assemble_design(
        unpenalized,
        basis.Z[idx] if has_basis else None,
        basis.column_names() if has_basis else None,
    )


@dataclass(frozen=True, eq=False)
class OutcomeFit:
    """Full-sample outcome model; its treatment coefficient is beta_hat."""

    treatment_name: str
    fit: PenalizedFit
    design: Design

    @property
    def beta_hat(self) -> float:
        return float(self.fit.coefficients[self.design.index(self.treatment_name)])

    def coefficient_frame(self) -> pd.DataFrame:
        """Raw-scale unpenalized coefficients (intercept, treatment, confounders)."""
        cols = list(self.fit.spec.unpenalized_cols)
        return pd.DataFrame(
            {
                "term": [self.design.names[c] for c in cols],
                "coefficient": self.fit.coefficients[cols],
            }
        )


def fit_outcome(
    dataset: Dataset,
    treatment_name: str,
    Z: BasisMatrix | None,
    cv_config: CvConfig = CvConfig(),
) -> OutcomeFit:
    """Unweighted outcome Lasso on the full sample."""
    design = outcome_design(dataset, treatment_name, Z)
    fit = fit_lasso_cv(design.X, dataset.outcome, design.spec, cv_config)
    return OutcomeFit(treatment_name=treatment_name, fit=fit, design=design)


@dataclass(frozen=True, eq=False)
class FoldRecord:
    """Bookkeeping for one cross-fitting fold."""

    fold: int
    train_rows: NDArray[np.intp]
    test_rows: NDArray[np.intp]
    gps_lambda: float | None = None
    gps_active: int | None = None
    gps_sigma2: float | None = None
    outcome_lambda: float | None = None
    outcome_active: int | None = None

    def to_record(self) -> dict[str, object]:
        return {
            "fold": self.fold,
            "n_train": len(self.train_rows),
            "n_test": len(self.test_rows),
            "gps_lambda": self.gps_lambda,
            "gps_active": self.gps_active,
            "outcome_lambda": self.outcome_lambda,
            "outcome_active": self.outcome_active,
        }


@dataclass(frozen=True, eq=False)
class OutcomePredictions:
    g_hat: NDArray[np.float64]
    folds: tuple[FoldRecord, ...]


@dataclass(frozen=True, eq=False)
class CrossFitResult:
    """Out-of-fold nuisance predictions for every unit."""

    mu_hat: NDArray[np.float64]
    sigma2_hat: NDArray[np.float64]
    g_hat: NDArray[np.float64]
    folds: tuple[FoldRecord, ...]


def _check_plan(dataset: Dataset, plan: CrossFitPlan) -> None:
    if plan.n != dataset.n:
        raise ParameterError(
            f"plan covers {plan.n} units but the dataset has {dataset.n}",
            operation="crossfit",
        )


def _annotate_fold(error: SpatialDrError, fold: int, model: str) -> None:
    error.context.setdefault("fold", fold)
    error.context.setdefault("model", model)
    logger.error("Nuisance fit failed in fold %d (%s): %s", fold, model, error)


def crossfit_outcome(
    dataset: Dataset,
    treatment_name: str,
    Z: BasisMatrix | None,
    plan: CrossFitPlan,
    cv_config: CvConfig = CvConfig(),
) -> OutcomePredictions:
    """Out-of-fold outcome predictions g_j from models that never saw fold(j)."""
    _check_plan(dataset, plan)
    g_hat = np.empty(dataset.n)
    records = []
    for k in range(plan.folds):
        train, test = plan.train_rows(k), plan.test_rows(k)
        try:
            design = outcome_design(dataset, treatment_name, Z, train)
            fit = fit_lasso_cv(design.X, dataset.outcome[train], design.spec, _fold_cv(cv_config, k))
        except SpatialDrError as exc:
            _annotate_fold(exc, k, "outcome")
            raise
        g_hat[test] = fit.predict(outcome_design(dataset, treatment_name, Z, test).X)
        records.append(
            FoldRecord(
                fold=k,
                train_rows=train,
                test_rows=test,
                outcome_lambda=fit.lambda_,
                outcome_active=fit.active_count,
            )
        )
    return OutcomePredictions(g_hat=g_hat, folds=tuple(records))


def crossfit_nuisances(
    dataset: Dataset,
    treatment_name: str,
    Z: BasisMatrix | None,
    plan: CrossFitPlan,
    cv_config: CvConfig = CvConfig(),
    basis_in_gps: bool = True,
    basis_in_outcome: bool = True,
) -> CrossFitResult:
    """Cross-fit both nuisance models over the plan's folds.

    For every unit j in fold k, mu_j and g_j come from models fitted on the
    other folds only; lambda for each model is chosen by inner
    cross-validation on the training folds. Either model can be denied the
    basis columns.

    Raises:
        SpatialDrError: Any fold failure, with the fold index in its context
    """
    _check_plan(dataset, plan)
    a = dataset.treatment(treatment_name)
    gps_basis = Z if basis_in_gps else None
    outcome_basis = Z if basis_in_outcome else None

    mu_hat = np.empty(dataset.n)
    sigma2_hat = np.empty(dataset.n)
    g_hat = np.empty(dataset.n)
    records = []
    for k in range(plan.folds):
        train, test = plan.train_rows(k), plan.test_rows(k)
        fold_cv = _fold_cv(cv_config, k)
        try:
            gps_train = gps_design(dataset, gps_basis, train)
            gps_fit = fit_lasso_cv(gps_train.X, a[train], gps_train.spec, fold_cv)
        except SpatialDrError as exc:
            _annotate_fold(exc, k, "gps")
            raise
        try:
            out_train = outcome_design(dataset, treatment_name, outcome_basis, train)
            out_fit = fit_lasso_cv(out_train.X, dataset.outcome[train], out_train.spec, fold_cv)
        except SpatialDrError as exc:
            _annotate_fold(exc, k, "outcome")
            raise

        mu_hat[test] = gps_fit.predict(gps_design(dataset, gps_basis, test).X)
        sigma2_hat[test] = gps_fit.residual_variance
        g_hat[test] = out_fit.predict(
            outcome_design(dataset, treatment_name, outcome_basis, test).X
        )
        records.append(
            FoldRecord(
                fold=k,
                train_rows=train,
                test_rows=test,
                gps_lambda=gps_fit.lambda_,
                gps_active=gps_fit.active_count,
                gps_sigma2=gps_fit.residual_variance,
                outcome_lambda=out_fit.lambda_,
                outcome_active=out_fit.active_count,
            )
        )
        logger.debug(
            "Fold %d: gps λ=%.3g (%d active), outcome λ=%.3g (%d active)",
            k,
            gps_fit.lambda_,
            gps_fit.active_count,
            out_fit.lambda_,
            out_fit.active_count,
        )
    return CrossFitResult(
        mu_hat=mu_hat, sigma2_hat=sigma2_hat, g_hat=g_hat, folds=tuple(records)
    )


@dataclass(frozen=True, eq=False)
class DrResult:
    """Doubly robust estimate for one treatment, in the treatment's raw units."""

    treatment_name: str
    tau_hat: float
    beta_hat: float
    correction: float
    se: float
    ci_low: float
    ci_high: float
    influence: NDArray[np.float64]
    n: int
    moran: MoranResult | None = None
    weight_summary: dict[str, float] = field(default_factory=dict)
    truncation: tuple[float, float] | None = None
    folds: tuple[FoldRecord, ...] = ()
    outcome_lambda: float | None = None
    gps_lambda: float | None = None
    naive: "NaiveEstimate | None" = None
    balance: pd.DataFrame | None = None
    coefficients: pd.DataFrame | None = None

    @property
    def moran_p(self) -> float | None:
        return self.moran.p_value if self.moran is not None else None

    def to_record(self) -> dict[str, object]:
        """JSON record: the effect table columns plus diagnostics."""
        record: dict[str, object] = {
            "treatment": self.treatment_name,
            "effect": self.tau_hat,
            "se": self.se,
            "lower95": self.ci_low,
            "upper95": self.ci_high,
            "beta_hat": self.beta_hat,
            "correction": self.correction,
            "n": self.n,
            "units": "outcome units per unit of the treatment column as supplied",
            "moran_i": self.moran.I if self.moran is not None else None,
            "moran_p": self.moran_p,
            "moran_method": self.moran.method.value if self.moran is not None else None,
            "weight_summary": self.weight_summary,
            "weight_truncation": list(self.truncation) if self.truncation else None,
            "lambda_records": {
                "outcome_full_sample": self.outcome_lambda,
                "gps_full_sample": self.gps_lambda,
                "folds": [f.to_record() for f in self.folds],
            },
        }
        if self.naive is not None:
            record["naive_ols"] = {"effect": self.naive.tau_hat, "se": self.naive.se}
        return record

    def influence_frame(self, unit_ids: tuple[str, ...]) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": list(unit_ids), "influence": self.influence})


def dr_estimate(
    dataset: Dataset,
    treatment_name: str,
    mu_hat: NDArray[np.float64],
    g_hat: NDArray[np.float64],
    weights: WeightVector | NDArray[np.float64],
    beta_hat: float,
    ci_quantile: float = 1.96,
) -> DrResult:
    """Doubly robust estimate with influence-function standard error.

    The influence values are
        phi_j = w_j (A_j - mu_j)(y_j - g_j) / D + (A_j - mu_j) A_j (beta - tau) / D
    with D = (1/n)·Σ (A_j - mu_j) A_j; they sum to zero by construction and
    SE = sqrt(Σ phi_j²) / n.

    Raises:
        SingularDenominatorError: If |D| < 1e-12·var(A)
    """
    a = dataset.treatment(treatment_name)
    y = dataset.outcome
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights)
    n = dataset.n
    for name, vector in (("mu_hat", mu_hat), ("g_hat", g_hat), ("weights", w)):
        if np.shape(vector) != (n,):
            raise ParameterError(
                f"{name} has shape {np.shape(vector)}, expected ({n},)",
                operation="dr_estimate",
            )

    treatment_resid = a - mu_hat
    outcome_resid = y - g_hat
    denominator = float(np.mean(treatment_resid * a))
    if abs(denominator) < DENOMINATOR_GUARD * float(np.var(a)):
        raise SingularDenominatorError(
            f"denominator (1/n)Σ(A-mu)A = {denominator:.3e} is numerically zero; "
            "the treatment model nearly interpolates the treatment",
            operation="dr_estimate",
            treatment=treatment_name,
        )
    score = w * treatment_resid * outcome_resid
    correction = float(np.mean(score)) / denominator
    tau_hat = beta_hat + correction
    influence = score / denominator + treatment_resid * a * (beta_hat - tau_hat) / denominator
    se = float(np.sqrt(np.sum(influence**2)) / n)
    influence.setflags(write=False)
    return DrResult(
        treatment_name=treatment_name,
        tau_hat=float(tau_hat),
        beta_hat=float(beta_hat),
        correction=correction,
        se=se,
        ci_low=float(tau_hat - ci_quantile * se),
        ci_high=float(tau_hat + ci_quantile * se),
        influence=influence,
        n=n,
    )


@dataclass(frozen=True)
class NaiveEstimate:
    """OLS treatment coefficient without spatial adjustment."""

    tau_hat: float
    se: float


def naive_ols(dataset: Dataset, treatment_name: str) -> NaiveEstimate:
    """OLS of y on [1, A, X] with the classical standard error."""
    design = outcome_design(dataset, treatment_name, None)
    X, y = design.X, dataset.outcome
    n, p = X.shape
    if n <= p:
        raise DegenerateDataError(
            f"naive OLS needs n > p, got n={n}, p={p}", operation="naive_ols"
        )
    coef, *_ = scipy.linalg.lstsq(X, y)
    residual = y - X @ coef
    sigma2 = float(residual @ residual) / (n - p)
    covariance = sigma2 * scipy.linalg.pinvh(X.T @ X)
    j = design.index(treatment_name)
    return NaiveEstimate(tau_hat=float(coef[j]), se=float(np.sqrt(covariance[j, j])))


def run_treatment(
    dataset: Dataset,
    treatment_name: str,
    Z: BasisMatrix | None,
    config: EstimationConfig = EstimationConfig(),
    graph: AdjacencyGraph | None = None,
) -> DrResult:
    """Complete doubly robust analysis of one treatment.

    Steps: cross-fitting plan, out-of-fold nuisances, full-sample GPS for the
    marginal density, stabilized weights from the out-of-fold GPS means and
    fold variances, full-sample outcome Lasso for beta_hat, the doubly
    robust estimate, and (given a graph) a Moran test on the out-of-fold
    outcome residuals.
    """
    require_variation(dataset.treatment(treatment_name), treatment_name, "run_treatment")
    plan = make_plan(dataset.n, config.folds, config.seed)
    crossfit = crossfit_nuisances(
        dataset,
        treatment_name,
        Z,
        plan,
        config.cv,
        basis_in_gps=config.basis_in_gps,
        basis_in_outcome=config.basis_in_outcome,
    )

    gps_basis = Z if config.basis_in_gps else None
    outcome_basis = Z if config.basis_in_outcome else None
    gps_model: GpsModel = fit_gps(
        dataset, treatment_name, gps_basis, config.cv, config.marginal_density
    )
    weights = stabilized_weights(
        gps_model,
        dataset,
        treatment_name,
        config.truncation,
        fitted_mean=crossfit.mu_hat,
        sigma2=crossfit.sigma2_hat,
    )
    outcome = fit_outcome(dataset, treatment_name, outcome_basis, config.cv)

    result = dr_estimate(
        dataset,
        treatment_name,
        crossfit.mu_hat,
        crossfit.g_hat,
        weights,
        outcome.beta_hat,
        config.ci_quantile,
    )

    moran = None
    if graph is not None:
        moran = morans_i(
            dataset.outcome - crossfit.g_hat,
            graph,
            method=config.moran_method,
            permutations=config.moran_permutations,
            seed=config.seed,
        )

    naive = None
    try:
        naive = naive_ols(dataset, treatment_name)
    except DegenerateDataError:
        logger.debug("Naive OLS baseline skipped for %s", treatment_name)

    logger.info(
        "%s: tau=%.5g se=%.3g beta=%.5g correction=%.3g",
        treatment_name,
        result.tau_hat,
        result.se,
        result.beta_hat,
        result.correction,
    )
    return replace(
        result,
        moran=moran,
        weight_summary=weights.summary(),
        truncation=weights.truncation,
        folds=crossfit.folds,
        outcome_lambda=outcome.fit.lambda_,
        gps_lambda=gps_model.mean_fit.lambda_ if gps_model.mean_fit else None,
        naive=naive,
        balance=balance_table(dataset, treatment_name, weights, gps_basis),
        coefficients=outcome.coefficient_frame(),
    )
