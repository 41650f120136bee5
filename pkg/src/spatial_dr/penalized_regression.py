"""
Least-squares Lasso with an unpenalized coefficient block.

This module provides the selectively penalized regression engine shared by
the propensity and outcome models: it minimizes

    (1/2n)·||y - X b||² + λ·Σ_{k penalized} |b_k|

by cyclic coordinate descent with covariance updates, and selects λ by
K-fold cross-validation over a log-spaced grid.

The unpenalized block is profiled out exactly (Frisch-Waugh-Lovell): the
response and the penalized columns are residualized on the unpenalized
columns, the Lasso runs on the residualized problem, and the unpenalized
coefficients are recovered by least squares. Penalized columns are scaled to
unit sample standard deviation internally; reported coefficients are always on
the original scale.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from numpy.typing import NDArray
from sklearn.model_selection import KFold

from .config import CvConfig
from .errors import ConvergenceError, DataError, ParameterError

logger = logging.getLogger(__name__)

# Penalized columns whose residualized variance falls below this fraction of
# their raw variance lie in the span of the unpenalized block; they stay at 0,
# as do penalized columns that are constant on the rows being fitted.
_COLLINEAR = 1e-12


@dataclass(frozen=True)
class DesignSpec:
    """Partition of design columns into unpenalized and penalized sets."""

    unpenalized_cols: tuple[int, ...]
    penalized_cols: tuple[int, ...]
    standardize_penalized: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "unpenalized_cols", tuple(int(c) for c in self.unpenalized_cols))
        object.__setattr__(self, "penalized_cols", tuple(int(c) for c in self.penalized_cols))
        overlap = set(self.unpenalized_cols) & set(self.penalized_cols)
        if overlap:
            raise ParameterError(
                "design column sets overlap",
                [f"column {c}" for c in sorted(overlap)],
                operation="DesignSpec",
            )

    @property
    def p(self) -> int:
        return len(self.unpenalized_cols) + len(self.penalized_cols)

    def check_covers(self, p: int) -> None:
        covered = sorted(self.unpenalized_cols + self.penalized_cols)
        if covered != list(range(p)):
            raise ParameterError(
                f"DesignSpec must cover columns 0..{p - 1} exactly once",
                operation="DesignSpec",
            )


@dataclass(frozen=True, eq=False)
class Design:
    """A design matrix with its column partition and column names."""

    X: NDArray[np.float64]
    spec: DesignSpec
    names: tuple[str, ...]

    def index(self, name: str) -> int:
        return self.names.index(name)


def assemble_design(
    unpenalized: Mapping[str, NDArray[np.float64]],
    penalized: NDArray[np.float64] | None = None,
    penalized_names: Sequence[str] | None = None,
    intercept: bool = True,
    standardize_penalized: bool = True,
    n: int | None = None,
) -> Design:
    """Build [intercept, unpenalized..., penalized...] and its DesignSpec.

    `n` is needed only when neither block has a column (intercept-only).
    """
    columns: list[NDArray[np.float64]] = []
    names: list[str] = []
    first = next(iter(unpenalized.values()), None)
    if first is not None:
        n = len(first)
    elif penalized is not None:
        n = penalized.shape[0]
    if n is None:
        raise ParameterError("design needs at least one column", operation="assemble_design")

    if intercept:
        columns.append(np.ones(n))
        names.append("intercept")
    for name, values in unpenalized.items():
        columns.append(np.asarray(values, dtype=np.float64))
        names.append(name)
    n_unpen = len(columns)

    if penalized is not None and penalized.shape[1]:
        columns.extend(penalized.T)
        if penalized_names is None:
            penalized_names = [f"basis_{k + 1}" for k in range(penalized.shape[1])]
        names.extend(penalized_names)

    X = np.column_stack(columns) if columns else np.zeros((n, 0))
    spec = DesignSpec(
        unpenalized_cols=tuple(range(n_unpen)),
        penalized_cols=tuple(range(n_unpen, X.shape[1])),
        standardize_penalized=standardize_penalized,
    )
    return Design(X=X, spec=spec, names=tuple(names))


@dataclass(frozen=True, eq=False)
class CvTable:
    """Cross-validated error along the λ grid."""

    lambdas: NDArray[np.float64]
    mean_error: NDArray[np.float64]
    fold_errors: NDArray[np.float64]
    selected_index: int = 0

    def to_frame(self) -> pd.DataFrame:
        folds = len(self.fold_errors)
        if folds > 1:
            se = self.fold_errors.std(axis=0, ddof=1) / np.sqrt(folds)
        else:
            se = np.zeros(len(self.lambdas))
        return pd.DataFrame(
            {
                "lambda": self.lambdas,
                "cv_mse": self.mean_error,
                "cv_se": se,
                "selected": np.arange(len(self.lambdas)) == self.selected_index,
            }
        )


@dataclass(frozen=True, eq=False)
class PenalizedFit:
    """A Lasso solution on the original column scale."""

    coefficients: NDArray[np.float64]
    lambda_: float
    active_count: int
    residual_variance: float
    spec: DesignSpec
    duality_gap: float = 0.0
    sweeps: int = 0
    objective_history: tuple[float, ...] = ()
    cv_table: CvTable | None = None
    penalty_scale: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))

    def predict(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(X @ self.coefficients, dtype=np.float64)

    @property
    def penalized_coefficients(self) -> NDArray[np.float64]:
        return self.coefficients[list(self.spec.penalized_cols)]

    @property
    def unpenalized_coefficients(self) -> NDArray[np.float64]:
        return self.coefficients[list(self.spec.unpenalized_cols)]


def _soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def _validate(X: NDArray[np.float64], y: NDArray[np.float64], spec: DesignSpec) -> None:
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ParameterError(
            f"design {X.shape} does not match response {y.shape}", operation="fit_lasso"
        )
    if X.shape[0] < 2:
        raise ParameterError("Lasso needs n >= 2 observations", operation="fit_lasso")
    spec.check_covers(X.shape[1])
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise DataError("non-finite values in design or response", operation="fit_lasso")


class _Problem:
    """A Lasso problem with the unpenalized block profiled out."""

    def __init__(self, X: NDArray[np.float64], y: NDArray[np.float64], spec: DesignSpec) -> None:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        _validate(X, y, spec)
        self.X, self.y, self.spec = X, y, spec
        self.n = X.shape[0]
        self.scale = max(1.0, float(np.max(np.abs(y))))
        self.unpen = list(spec.unpenalized_cols)
        self.pen = list(spec.penalized_cols)

        U = X[:, self.unpen]
        P = X[:, self.pen]
        constant = np.zeros(len(self.pen), dtype=bool)
        if self.pen:
            spread = P.std(axis=0)
            floor = 1e-12 * np.maximum(1.0, np.abs(P).max(axis=0))
            constant = spread <= floor
            if np.any(constant):
                # e.g. a basis column supported only on units outside these rows
                logger.debug(
                    "%d penalized columns are constant on these rows; held at 0: %s",
                    int(constant.sum()),
                    [self.pen[k] for k in np.flatnonzero(constant)],
                )
            if spec.standardize_penalized:
                self.col_scale = np.where(constant, 1.0, spread)
            else:
                self.col_scale = np.ones(len(self.pen))
        else:
            self.col_scale = np.ones(0)
        Ps = P / self.col_scale

        self.U = U
        if U.shape[1]:
            coef, *_ = scipy.linalg.lstsq(U, np.column_stack([y, Ps]))
            resid = np.column_stack([y, Ps]) - U @ coef
            self.y_tilde, self.P_tilde = resid[:, 0], resid[:, 1:]
        else:
            self.y_tilde, self.P_tilde = y.copy(), Ps
        self.Ps = Ps

        self.G = self.P_tilde.T @ self.P_tilde / self.n
        self.c = self.P_tilde.T @ self.y_tilde / self.n
        self.yy = float(self.y_tilde @ self.y_tilde / self.n)
        raw_var = (Ps**2).mean(axis=0) if self.pen else np.zeros(0)
        self.usable = np.flatnonzero(
            (np.diag(self.G) > _COLLINEAR * np.maximum(raw_var, 1e-300)) & ~constant
        )

    @property
    def lambda_max(self) -> float:
        """Smallest λ at which every penalized coefficient is 0."""
        return float(np.max(np.abs(self.c[self.usable]))) if len(self.usable) else 0.0

    def objective(self, a: NDArray[np.float64], grad: NDArray[np.float64], lam: float) -> float:
        return float(
            0.5 * self.yy - 0.5 * a @ self.c - 0.5 * a @ grad + lam * np.sum(np.abs(a))
        )

    def duality_gap(self, a: NDArray[np.float64], grad: NDArray[np.float64], lam: float) -> float:
        if lam == 0.0:
            return float(np.max(np.abs(grad))) if len(grad) else 0.0
        r2 = max(self.yy - a @ self.c - a @ grad, 0.0)
        dual_norm = float(np.max(np.abs(grad))) if len(grad) else 0.0
        if dual_norm > lam:
            const = lam / dual_norm
            gap = 0.5 * r2 * (1.0 + const * const)
        else:
            const = 1.0
            gap = r2
        gap += lam * float(np.sum(np.abs(a))) - const * (self.yy - a @ self.c)
        return abs(float(gap))

    def coordinate_descent(
        self,
        lam: float,
        start: NDArray[np.float64],
        tol: float,
        max_sweeps: int,
    ) -> tuple[NDArray[np.float64], int, list[float]]:
        """Cyclic coordinate descent with active-set cycling.

        A full sweep over all usable coordinates alternates with sweeps over
        the current nonzero set until a full sweep changes nothing beyond
        tol·scale.
        """
        a = start.copy()
        G, diag = self.G, np.diag(self.G)
        grad = self.c - G @ a
        history = [self.objective(a, grad, lam)]
        threshold = tol * self.scale
        active_only = False
        active = self.usable

        for sweep in range(1, max_sweeps + 1):
            coords = active if active_only else self.usable
            max_change = 0.0
            for k in coords:
                old = a[k]
                new = _soft_threshold(grad[k] + diag[k] * old, lam) / diag[k]
                if new != old:
                    delta = new - old
                    grad -= delta * G[:, k]
                    a[k] = new
                    max_change = max(max_change, abs(delta) * np.sqrt(diag[k]))
            history.append(self.objective(a, grad, lam))

            if max_change < threshold:
                if not active_only:
                    return a, sweep, history
                active_only = False
            elif not active_only:
                active = self.usable[a[self.usable] != 0.0]
                active_only = True

        grad = self.c - G @ a
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_sweeps} sweeps at λ={lam:.4g}",
            duality_gap=self.duality_gap(a, grad, lam),
            operation="fit_lasso",
            lambda_=lam,
        )

    def polish(self, a: NDArray[np.float64], lam: float) -> NDArray[np.float64]:
        """Solve the active-set stationarity equations exactly when consistent."""
        active = np.flatnonzero(a != 0.0)
        if len(active) == 0:
            return a
        signs = np.sign(a[active])
        rhs = self.c[active] - lam * signs
        try:
            solved, *_ = scipy.linalg.lstsq(self.G[np.ix_(active, active)], rhs)
        except (ValueError, scipy.linalg.LinAlgError):
            return a
        if np.any(np.sign(solved) != signs):
            return a
        candidate = np.zeros_like(a)
        candidate[active] = solved
        grad = self.c - self.G @ candidate
        inactive = np.setdiff1d(self.usable, active)
        bound = lam * (1 + 1e-12) + 1e-12 * self.scale
        if len(inactive) and np.max(np.abs(grad[inactive])) > bound:
            return a
        current = self.objective(a, self.c - self.G @ a, lam)
        if self.objective(candidate, grad, lam) > current + 1e-15 * self.scale**2:
            return a
        return candidate

    def solve(
        self, lam: float, start: NDArray[np.float64] | None, tol: float, max_sweeps: int
    ) -> PenalizedFit:
        p = len(self.pen)
        a = np.zeros(p) if start is None else start
        history: list[float] = []
        sweeps = 0
        if p and len(self.usable):
            if lam == 0.0:
                a = np.zeros(p)
                solved, *_ = scipy.linalg.lstsq(self.P_tilde[:, self.usable], self.y_tilde)
                a[self.usable] = solved
            else:
                a, sweeps, history = self.coordinate_descent(lam, a, tol, max_sweeps)
                a = self.polish(a, lam)
        grad = self.c - self.G @ a if p else np.zeros(0)
        return self._finish(a, lam, sweeps, history, self.duality_gap(a, grad, lam))

    def _finish(
        self,
        a: NDArray[np.float64],
        lam: float,
        sweeps: int,
        history: list[float],
        gap: float,
    ) -> PenalizedFit:
        coefficients = np.zeros(self.X.shape[1])
        if self.unpen:
            target = self.y - self.Ps @ a if len(a) else self.y
            gamma, *_ = scipy.linalg.lstsq(self.U, target)
            coefficients[self.unpen] = gamma
        if self.pen:
            coefficients[self.pen] = a / self.col_scale
        residual = self.y - self.X @ coefficients
        return PenalizedFit(
            coefficients=coefficients,
            lambda_=float(lam),
            active_count=int(np.count_nonzero(a)),
            residual_variance=float(np.mean(residual**2)),
            spec=self.spec,
            duality_gap=gap,
            sweeps=sweeps,
            objective_history=tuple(history),
            penalty_scale=self.col_scale.copy(),
        )

    def standardized(self, coefficients: NDArray[np.float64]) -> NDArray[np.float64]:
        return coefficients[self.pen] * self.col_scale


def fit_lasso(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    spec: DesignSpec,
    lambda_: float,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
) -> PenalizedFit:
    """Fit the selectively penalized Lasso at a single λ.

    Args:
        X: n×p design (include an intercept column if one is wanted)
        y: Response of length n
        spec: Column partition; must cover every column of X
        lambda_: Penalty, >= 0; λ = 0 gives least squares
        tol: Convergence threshold on coordinate change, relative to max(1, |y|∞)
        max_sweeps: Sweep budget

    Returns:
        PenalizedFit on the original column scale

    Raises:
        DataError: If X or y hold non-finite values
        ConvergenceError: If the sweep budget is exhausted
    """
    if lambda_ < 0:
        raise ParameterError(f"lambda must be >= 0, got {lambda_}", operation="fit_lasso")
    return _Problem(X, y, spec).solve(float(lambda_), None, tol, max_sweeps)


def lambda_max(
    X: NDArray[np.float64], y: NDArray[np.float64], spec: DesignSpec
) -> float:
    """Smallest λ at which every penalized coefficient is zero."""
    return _Problem(X, y, spec).lambda_max


def lambda_grid(
    lambda_max: float, n_lambdas: int = 100, min_ratio: float = 1e-4, scale: float = 1.0
) -> NDArray[np.float64]:
    """Descending log-spaced grid from λmax to min_ratio·λmax."""
    if n_lambdas < 1:
        raise ParameterError("n_lambdas must be >= 1", operation="lambda_grid")
    top = max(lambda_max, 1e-12 * scale)
    if n_lambdas == 1:
        return np.array([top])
    return np.geomspace(top, top * min_ratio, n_lambdas)


def lasso_path(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    spec: DesignSpec,
    lambdas: Sequence[float] | NDArray[np.float64],
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
) -> list[PenalizedFit]:
    """Fits along a descending λ grid, each warm-started from the previous."""
    return _path(_Problem(X, y, spec), lambdas, tol, max_sweeps)


def _path(
    problem: _Problem,
    lambdas: Sequence[float] | NDArray[np.float64],
    tol: float,
    max_sweeps: int,
) -> list[PenalizedFit]:
    fits = []
    start = None
    for lam in lambdas:
        fit = problem.solve(float(lam), start, tol, max_sweeps)
        start = problem.standardized(fit.coefficients)
        fits.append(fit)
    return fits


def fold_assignment(n: int, folds: int, seed: int) -> NDArray[np.intp]:
    """Fold label per observation; a pure function of (n, folds, seed)."""
    if folds < 2:
        raise ParameterError(f"folds must be >= 2, got {folds}", operation="fold_assignment")
    if folds > n:
        raise ParameterError(
            f"cannot split {n} observations into {folds} folds",
            operation="fold_assignment",
        )
    labels = np.empty(n, dtype=np.intp)
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for k, (_, test) in enumerate(splitter.split(np.zeros((n, 1)))):
        labels[test] = k
    return labels


def cv_lambda(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    spec: DesignSpec,
    lambda_grid: Sequence[float] | NDArray[np.float64],
    folds: int,
    seed: int,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
) -> tuple[float, CvTable]:
    """Select λ by K-fold cross-validated mean squared prediction error.

    Ties (within floating-point noise) go to the larger λ.

    Raises:
        ParameterError: If folds < 2, the grid is empty or not descending, or
            a training or held-out fold would hold fewer than 2 observations
    """
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if grid.size == 0:
        raise ParameterError("lambda grid must not be empty", operation="cv_lambda")
    if np.any(grid < 0) or np.any(np.diff(grid) > 0):
        raise ParameterError(
            "lambda grid must be non-negative and descending", operation="cv_lambda"
        )
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n // max(folds, 1) < 2:
        raise ParameterError(
            f"{folds} folds over {n} observations leave a fold with < 2 observations",
            operation="cv_lambda",
        )
    labels = fold_assignment(n, folds, seed)

    fold_errors = np.zeros((folds, grid.size))
    squared = np.zeros(grid.size)
    for k in range(folds):
        test = labels == k
        train = ~test
        fits = _path(_Problem(X[train], y[train], spec), grid, tol, max_sweeps)
        for j, fit in enumerate(fits):
            err = (y[test] - fit.predict(X[test])) ** 2
            squared[j] += err.sum()
            fold_errors[k, j] = err.mean()
    mean_error = squared / n

    scale = max(1.0, float(np.max(np.abs(y))))
    best = float(mean_error.min())
    ties = np.flatnonzero(mean_error <= best * (1 + 1e-9) + 1e-12 * scale**2)
    selected = int(ties[0])
    table = CvTable(
        lambdas=grid, mean_error=mean_error, fold_errors=fold_errors, selected_index=selected
    )
    logger.debug("CV selected λ=%.4g (index %d of %d)", grid[selected], selected, grid.size)
    return float(grid[selected]), table


def fit_lasso_cv(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    spec: DesignSpec,
    cv: CvConfig = CvConfig(),
) -> PenalizedFit:
    """Select λ by cross-validation on (X, y), then refit on all of it.

    Without penalized columns this is plain least squares.
    """
    problem = _Problem(X, y, spec)
    if not problem.pen:
        return problem.solve(0.0, None, cv.tol, cv.max_sweeps)
    grid = lambda_grid(problem.lambda_max, cv.n_lambdas, cv.lambda_min_ratio, problem.scale)
    lam, table = cv_lambda(X, y, spec, grid, cv.folds, cv.seed, cv.tol, cv.max_sweeps)
    fits = _path(problem, grid[: table.selected_index + 1], cv.tol, cv.max_sweeps)
    final = fits[-1]
    return PenalizedFit(
        coefficients=final.coefficients,
        lambda_=lam,
        active_count=final.active_count,
        residual_variance=final.residual_variance,
        spec=spec,
        duality_gap=final.duality_gap,
        sweeps=final.sweeps,
        objective_history=final.objective_history,
        cv_table=table,
        penalty_scale=final.penalty_scale,
    )


def kkt_violation(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    fit: PenalizedFit,
) -> float:
    """Largest violation of the Lasso optimality conditions.

    Gradients g_k = (1/n)·x_k'(y - Xb) are taken on the scale the penalty
    acts on (penalized columns divided by their standard deviation when
    standardization is on). Conditions: g_k = 0 for unpenalized k;
    g_k = λ·sign(b_k) for active penalized k; |g_k| <= λ otherwise.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    residual = y - X @ fit.coefficients
    grad = X.T @ residual / n
    spec = fit.spec
    worst = 0.0
    if spec.unpenalized_cols:
        worst = float(np.max(np.abs(grad[list(spec.unpenalized_cols)])))
    if spec.penalized_cols:
        pen = list(spec.penalized_cols)
        scale = fit.penalty_scale if len(fit.penalty_scale) == len(pen) else np.ones(len(pen))
        g = grad[pen] / scale
        b = fit.coefficients[pen]
        active = b != 0.0
        if np.any(active):
            worst = max(worst, float(np.max(np.abs(g[active] - fit.lambda_ * np.sign(b[active])))))
        if np.any(~active):
            worst = max(worst, float(np.max(np.maximum(np.abs(g[~active]) - fit.lambda_, 0.0))))
    return worst
