"""Tests for the selectively penalized Lasso engine."""

import numpy as np
import pytest

from spatial_dr.config import CvConfig
from spatial_dr.errors import (
    ConvergenceError,
    DataError,
    ParameterError,
)
from spatial_dr.penalized_regression import (
    DesignSpec,
    assemble_design,
    cv_lambda,
    fit_lasso,
    fit_lasso_cv,
    fold_assignment,
    kkt_violation,
    lambda_grid,
    lambda_max,
    lasso_path,
)


def random_problem(seed, n=None, p=None):
    """Random design with an intercept, a few unpenalized and many penalized columns."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(20, 201))
    p = p or int(rng.integers(3, 101))
    unpen = int(rng.integers(1, min(5, p)))
    X = rng.standard_normal((n, p)) * rng.uniform(0.5, 3.0, p)
    X[:, 0] = 1.0
    beta = np.zeros(p)
    beta[: unpen + 3] = rng.standard_normal(min(p, unpen + 3))
    y = X @ beta + rng.standard_normal(n)
    spec = DesignSpec(tuple(range(unpen)), tuple(range(unpen, p)))
    return X, y, spec


class TestDesignSpec:
    """Test column partitions."""

    def test_overlap_rejected(self):
        """Test that a column cannot be both penalized and unpenalized."""
        with pytest.raises(ParameterError):
            DesignSpec((0, 1), (1, 2))

    def test_must_cover_design(self):
        """Test that a partition missing a column is rejected at fit time."""
        X = np.random.default_rng(0).standard_normal((10, 3))
        with pytest.raises(ParameterError):
            fit_lasso(X, X[:, 0], DesignSpec((0,), (1,)), 0.1)

    def test_assemble_design(self):
        """Test the [intercept, unpenalized, penalized] layout."""
        basis = np.arange(12, dtype=float).reshape(4, 3)
        design = assemble_design(
            {"a": np.ones(4), "x": np.arange(4.0)}, basis, ["z1", "z2", "z3"]
        )
        assert design.names == ("intercept", "a", "x", "z1", "z2", "z3")
        assert design.spec.unpenalized_cols == (0, 1, 2)
        assert design.spec.penalized_cols == (3, 4, 5)
        assert design.index("x") == 2
        np.testing.assert_array_equal(design.X[:, 3:], basis)


class TestFitLasso:
    """Test single-λ fits."""

    @pytest.mark.parametrize("seed", range(50))
    def test_kkt_conditions(self, seed):
        """Test the optimality conditions on random mixed designs."""
        X, y, spec = random_problem(seed)
        for fraction in (0.5, 0.1, 0.01):
            lam = fraction * lambda_max(X, y, spec)
            fit = fit_lasso(X, y, spec, lam)
            scale = max(1.0, float(np.max(np.abs(y))))
            assert kkt_violation(X, y, fit) <= 1e-6 * scale

    def test_zero_lambda_matches_normal_equations(self):
        """Test that λ = 0 reproduces least squares."""
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(50), rng.standard_normal((50, 7))])
        y = X @ rng.standard_normal(8) + rng.standard_normal(50)
        fit = fit_lasso(X, y, DesignSpec((0, 1, 2), tuple(range(3, 8))), 0.0)
        oracle = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(fit.coefficients, oracle, rtol=1e-8, atol=1e-8)

    def test_above_lambda_max_zeroes_penalized(self):
        """Test that λ >= λmax keeps every penalized coefficient at zero."""
        X, y, spec = random_problem(3, n=80, p=20)
        fit = fit_lasso(X, y, spec, 1.0001 * lambda_max(X, y, spec))
        assert fit.active_count == 0
        assert np.all(fit.penalized_coefficients == 0.0)
        U = X[:, list(spec.unpenalized_cols)]
        ols = np.linalg.lstsq(U, y, rcond=None)[0]
        np.testing.assert_allclose(fit.unpenalized_coefficients, ols, atol=1e-10)

    def test_single_column_soft_threshold(self):
        """Test the closed form for one standardized penalized column."""
        rng = np.random.default_rng(8)
        n = 40
        x = rng.standard_normal(n)
        y = 1.0 + 0.7 * x + 0.2 * rng.standard_normal(n)
        X = np.column_stack([np.ones(n), x])
        sd = x.std()
        correlation = float((x - x.mean()) @ (y - y.mean()) / (n * sd))
        lam = 0.3 * abs(correlation)
        fit = fit_lasso(X, y, DesignSpec((0,), (1,)), lam)
        expected = np.sign(correlation) * (abs(correlation) - lam) / sd
        assert fit.coefficients[1] == pytest.approx(expected, rel=1e-10)

    def test_no_penalized_columns_is_ols(self):
        """Test that an all-unpenalized design is plain least squares."""
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
        y = rng.standard_normal(30)
        fit = fit_lasso_cv(X, y, DesignSpec((0, 1, 2), ()))
        np.testing.assert_allclose(
            fit.coefficients, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10
        )

    def test_objective_never_increases(self):
        """Test monotone coordinate descent."""
        X, y, spec = random_problem(11, n=100, p=40)
        fit = fit_lasso(X, y, spec, 0.05 * lambda_max(X, y, spec))
        history = np.array(fit.objective_history)
        assert np.all(np.diff(history) <= 1e-12 * max(1.0, abs(history[0])))

    def test_convergence_failure_reports_gap(self):
        """Test that an exhausted sweep budget raises with the duality gap."""
        X, y, spec = random_problem(4, n=100, p=60)
        with pytest.raises(ConvergenceError) as exc_info:
            fit_lasso(X, y, spec, 0.01 * lambda_max(X, y, spec), max_sweeps=1)
        assert exc_info.value.duality_gap >= 0.0
        assert "lambda_" in exc_info.value.context

    def test_constant_penalized_columns_held_at_zero(self):
        """Test that constant penalized columns stay at 0 and change nothing else."""
        X, y, spec = random_problem(5, n=60, p=8)
        lam = 0.1 * lambda_max(X, y, spec)
        reference = fit_lasso(X, y, spec, lam)

        padded = np.column_stack([X, np.zeros(60), np.full(60, 3.0)])
        padded_spec = DesignSpec(spec.unpenalized_cols, (*spec.penalized_cols, 8, 9))
        fit = fit_lasso(padded, y, padded_spec, lam)
        assert lambda_max(padded, y, padded_spec) == pytest.approx(lambda_max(X, y, spec))
        assert fit.coefficients[8] == 0.0
        assert fit.coefficients[9] == 0.0
        np.testing.assert_allclose(fit.coefficients[:8], reference.coefficients, atol=1e-10)
        np.testing.assert_allclose(fit.predict(padded), reference.predict(X), atol=1e-10)

    def test_standardization_round_trip(self):
        """Test that back-transformed coefficients reproduce the standardized fit."""
        X, y, spec = random_problem(6, n=80, p=12)
        lam = 0.05 * lambda_max(X, y, spec)
        fit = fit_lasso(X, y, spec, lam)
        pen = list(spec.penalized_cols)

        scaled = X.copy()
        scaled[:, pen] /= fit.penalty_scale
        raw_spec = DesignSpec(spec.unpenalized_cols, spec.penalized_cols, standardize_penalized=False)
        standardized = fit_lasso(scaled, y, raw_spec, lam)
        np.testing.assert_allclose(
            standardized.coefficients[pen] / fit.penalty_scale, fit.coefficients[pen], atol=1e-8
        )
        np.testing.assert_allclose(fit.predict(X), standardized.predict(scaled), atol=1e-8)

    def test_non_finite_values(self):
        """Test that NaN in the design is a data error."""
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        X[3, 1] = np.nan
        with pytest.raises(DataError):
            fit_lasso(X, np.arange(10.0), DesignSpec((0,), (1,)), 0.1)

    def test_negative_lambda(self):
        """Test the λ >= 0 precondition."""
        X, y, spec = random_problem(1, n=30, p=5)
        with pytest.raises(ParameterError):
            fit_lasso(X, y, spec, -1.0)

    def test_benchmark_fit(self, benchmark):
        """Benchmark one mid-path fit on a county-sized problem."""
        X, y, spec = random_problem(9, n=600, p=100)
        lam = 0.05 * lambda_max(X, y, spec)
        fit = benchmark(fit_lasso, X, y, spec, lam)
        assert kkt_violation(X, y, fit) <= 1e-6 * max(1.0, float(np.max(np.abs(y))))


class TestPath:
    """Test grids and warm-started paths."""

    def test_grid_shape(self):
        """Test a descending log-spaced grid from λmax."""
        grid = lambda_grid(2.0, 5, 1e-2)
        assert grid[0] == pytest.approx(2.0)
        assert grid[-1] == pytest.approx(0.02)
        assert np.all(np.diff(grid) < 0)
        np.testing.assert_allclose(np.diff(np.log(grid)), np.log(1e-2) / 4, rtol=1e-12)

    def test_warm_path_matches_cold_fits(self):
        """Test that warm starts reach the same solutions as cold starts."""
        X, y, spec = random_problem(6, n=120, p=30)
        grid = lambda_grid(lambda_max(X, y, spec), 8, 1e-2)
        path = lasso_path(X, y, spec, grid)
        for lam, warm in zip(grid, path, strict=True):
            cold = fit_lasso(X, y, spec, lam)
            np.testing.assert_allclose(warm.coefficients, cold.coefficients, atol=1e-6)


class TestCrossValidation:
    """Test λ selection."""

    def test_fold_assignment_balanced_and_deterministic(self):
        """Test fold sizes and reproducibility."""
        labels = fold_assignment(10, 3, seed=4)
        assert sorted(np.bincount(labels).tolist()) == [3, 3, 4]
        np.testing.assert_array_equal(labels, fold_assignment(10, 3, seed=4))

    def test_folds_out_of_range(self):
        """Test fold count bounds."""
        with pytest.raises(ParameterError):
            fold_assignment(5, 1, 0)
        with pytest.raises(ParameterError):
            fold_assignment(5, 6, 0)

    def test_ties_go_to_larger_lambda(self):
        """Test that identical CV errors select the largest λ."""
        X, y, spec = random_problem(7, n=60, p=10)
        top = lambda_max(X, y, spec)
        lam, table = cv_lambda(X, y, spec, [100 * top, 50 * top, 20 * top], folds=3, seed=0)
        assert lam == pytest.approx(100 * top)
        assert table.selected_index == 0

    def test_fold_too_small(self):
        """Test that folds leaving < 2 observations are rejected."""
        X, y, spec = random_problem(7, n=9, p=4)
        with pytest.raises(ParameterError):
            cv_lambda(X, y, spec, [1.0, 0.1], folds=5, seed=0)

    def test_fit_lasso_cv_reproducible(self):
        """Test that the same seed gives the same λ and coefficients."""
        X, y, spec = random_problem(10, n=90, p=25)
        config = CvConfig(folds=3, n_lambdas=20)
        first, second = fit_lasso_cv(X, y, spec, config), fit_lasso_cv(X, y, spec, config)
        assert first.lambda_ == second.lambda_
        np.testing.assert_array_equal(first.coefficients, second.coefficients)
        frame = first.cv_table.to_frame()
        assert list(frame.columns) == ["lambda", "cv_mse", "cv_se", "selected"]
        assert int(frame["selected"].sum()) == 1

    def test_selected_fit_satisfies_kkt(self):
        """Test that the refit at the selected λ is optimal."""
        X, y, spec = random_problem(12, n=100, p=30)
        fit = fit_lasso_cv(X, y, spec, CvConfig(folds=4, n_lambdas=25))
        assert kkt_violation(X, y, fit) <= 1e-6 * max(1.0, float(np.max(np.abs(y))))
