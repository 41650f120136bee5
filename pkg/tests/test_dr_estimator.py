"""Tests for cross-fitting and the doubly robust estimator."""

import dataclasses

import numpy as np
import pytest

from spatial_dr import dr_estimator
from spatial_dr.config import EstimationConfig
from spatial_dr.data_model import Dataset
from spatial_dr.dr_estimator import (
    crossfit_nuisances,
    crossfit_outcome,
    dr_estimate,
    fit_outcome,
    make_plan,
    naive_ols,
    run_treatment,
)
from spatial_dr.errors import (
    ConvergenceError,
    DegenerateDataError,
    ParameterError,
    SingularDenominatorError,
)
from spatial_dr.graph import AdjacencyGraph, rook_lattice
from spatial_dr.spectral_basis import icar_basis


def twenty_units(seed=4):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(20)
    y = 0.5 + 2.0 * a + rng.standard_normal(20)
    return Dataset(
        unit_ids=tuple(f"s{k}" for k in range(20)),
        outcome=y,
        treatments={"a": a},
        confounders={},
    )


class TestCrossFitPlan:
    """Test fold plans."""

    def test_sizes_ten_in_three(self):
        """Test that 10 units in 3 folds split 4/3/3."""
        plan = make_plan(10, folds=3, seed=0)
        assert sorted(plan.sizes()) == [3, 3, 4]

    def test_one_unit_per_fold(self):
        """Test the leave-one-out extreme."""
        plan = make_plan(10, folds=10, seed=0)
        assert plan.sizes() == [1] * 10

    def test_pure_function_of_arguments(self):
        """Test that the same (n, folds, seed) gives the same plan."""
        np.testing.assert_array_equal(
            make_plan(37, 5, 9).assignment, make_plan(37, 5, 9).assignment
        )
        assert not make_plan(37, 5, 9).assignment.flags.writeable

    def test_more_folds_than_units(self):
        """Test that folds > n is rejected."""
        with pytest.raises(ParameterError):
            make_plan(4, folds=5)

    def test_train_and_test_partition(self):
        """Test that each fold's train and test rows partition the units."""
        plan = make_plan(23, folds=4, seed=2)
        for k in range(4):
            train, test = plan.train_rows(k), plan.test_rows(k)
            assert not set(train) & set(test)
            assert sorted(np.concatenate([train, test]).tolist()) == list(range(23))


class TestDrEstimate:
    """Test the estimator's exact algebra."""

    def test_perfect_outcome_model_has_no_correction(self):
        """Test that g = y leaves tau = beta."""
        data = twenty_units()
        a = data.treatment("a")
        result = dr_estimate(data, "a", np.full(20, a.mean()), data.outcome, np.ones(20), 1.7)
        assert result.correction == 0.0
        assert result.tau_hat == 1.7

    def test_constant_outcome_model_recovers_ols_slope(self):
        """Test w = 1, mu = mean(A), g = mean(y), beta = 0 gives the OLS slope."""
        data = twenty_units()
        a, y = data.treatment("a"), data.outcome
        result = dr_estimate(
            data, "a", np.full(20, a.mean()), np.full(20, y.mean()), np.ones(20), 0.0
        )
        slope = np.polyfit(a, y, 1)[0]
        assert result.tau_hat == pytest.approx(slope, rel=1e-10)

    def test_ols_nuisances_reproduce_ols_slope(self):
        """Test w = 1, mu = mean(A), g = OLS on [1, A] with its slope as beta."""
        data = twenty_units()
        a, y = data.treatment("a"), data.outcome
        slope, intercept = np.polyfit(a, y, 1)
        result = dr_estimate(
            data, "a", np.full(20, a.mean()), intercept + slope * a, np.ones(20), slope
        )
        assert result.correction == pytest.approx(0.0, abs=1e-8)
        assert result.tau_hat == pytest.approx(slope, abs=1e-8)

    def test_influence_sums_to_zero_and_gives_se(self):
        """Test Σφ = 0 and SE²·n² = Σφ²."""
        data = twenty_units()
        rng = np.random.default_rng(1)
        a = data.treatment("a")
        mu = 0.3 * a + 0.1 * rng.standard_normal(20)
        g = data.outcome + rng.standard_normal(20)
        w = rng.uniform(0.5, 2.0, 20)
        result = dr_estimate(data, "a", mu, g, w, 1.2)
        scale = np.abs(result.influence).max()
        assert abs(result.influence.sum()) <= 1e-10 * 20 * scale
        assert result.se**2 * 20**2 == pytest.approx(np.sum(result.influence**2), rel=1e-12)
        assert result.ci_low == pytest.approx(result.tau_hat - 1.96 * result.se)
        assert result.ci_high == pytest.approx(result.tau_hat + 1.96 * result.se)

    @pytest.mark.parametrize("factor", [0.01, 3.0, -2.0])
    def test_outcome_scale_equivariance(self, factor):
        """Test that scaling y, g and beta scales tau, SE and φ alike."""
        data = twenty_units()
        rng = np.random.default_rng(2)
        a = data.treatment("a")
        mu = 0.2 * a
        g = data.outcome + rng.standard_normal(20)
        w = rng.uniform(0.5, 2.0, 20)
        base = dr_estimate(data, "a", mu, g, w, 1.0)
        scaled_data = dataclasses.replace(data, outcome=factor * data.outcome)
        scaled = dr_estimate(scaled_data, "a", mu, factor * g, w, factor * 1.0)
        assert scaled.tau_hat == pytest.approx(factor * base.tau_hat, rel=1e-10)
        assert scaled.se == pytest.approx(abs(factor) * base.se, rel=1e-10)
        np.testing.assert_allclose(scaled.influence, factor * base.influence, rtol=1e-10)

    def test_interpolating_treatment_model(self):
        """Test that mu = A triggers the denominator guard."""
        data = twenty_units()
        a = data.treatment("a")
        with pytest.raises(SingularDenominatorError):
            dr_estimate(data, "a", a.copy(), data.outcome, np.ones(20), 0.0)

    def test_shape_mismatch(self):
        """Test that nuisance vectors must have one entry per unit."""
        data = twenty_units()
        with pytest.raises(ParameterError):
            dr_estimate(data, "a", np.zeros(19), data.outcome, np.ones(20), 0.0)


class TestCrossFitting:
    """Test out-of-fold nuisance predictions."""

    def test_predictions_ignore_own_fold_outcomes(self, linear_dataset, fast_cv):
        """Test that changing y inside fold 0 leaves fold 0's g unchanged."""
        plan = make_plan(linear_dataset.n, folds=3, seed=1)
        before = crossfit_outcome(linear_dataset, "a", None, plan, fast_cv)
        rows = plan.test_rows(0)
        outcome = linear_dataset.outcome.copy()
        outcome[rows] += 100.0
        changed = dataclasses.replace(linear_dataset, outcome=outcome)
        after = crossfit_outcome(changed, "a", None, plan, fast_cv)
        np.testing.assert_array_equal(after.g_hat[rows], before.g_hat[rows])
        others = plan.train_rows(0)
        assert not np.allclose(after.g_hat[others], before.g_hat[others])

    def test_fold_records(self, small_simulation, fast_cv):
        """Test one record per fold with disjoint train and test rows."""
        data = small_simulation.dataset
        plan = make_plan(data.n, folds=3, seed=0)
        basis = icar_basis(small_simulation.graph, K=5)
        crossfit = crossfit_nuisances(data, "a", basis, plan, fast_cv)
        assert [f.fold for f in crossfit.folds] == [0, 1, 2]
        covered = np.concatenate([f.test_rows for f in crossfit.folds])
        assert sorted(covered.tolist()) == list(range(data.n))
        for record in crossfit.folds:
            assert not set(record.train_rows) & set(record.test_rows)
            assert record.gps_sigma2 > 0
            assert record.to_record()["n_test"] == len(record.test_rows)
        assert np.all(np.isfinite(crossfit.mu_hat))
        assert np.all(np.isfinite(crossfit.g_hat))

    def test_plan_must_match_dataset(self, linear_dataset, fast_cv):
        """Test that a plan for a different n is rejected."""
        with pytest.raises(ParameterError):
            crossfit_nuisances(linear_dataset, "a", None, make_plan(10, 3), fast_cv)

    def test_fold_failure_names_fold(self, linear_dataset, fast_cv, monkeypatch):
        """Test that a nuisance failure reports its fold and model."""

        def failing(*args, **kwargs):
            raise ConvergenceError("no convergence", duality_gap=1.0)

        monkeypatch.setattr(dr_estimator, "fit_lasso_cv", failing)
        plan = make_plan(linear_dataset.n, folds=3, seed=0)
        with pytest.raises(ConvergenceError) as exc_info:
            crossfit_nuisances(linear_dataset, "a", None, plan, fast_cv)
        assert exc_info.value.context["fold"] == 0
        assert exc_info.value.context["model"] == "gps"


class TestRunTreatment:
    """Test the complete single-treatment analysis."""

    def test_recovers_effect_on_simulation(self, small_simulation, fast_estimation):
        """Test a finite estimate near the true effect with diagnostics attached."""
        basis = icar_basis(small_simulation.graph, K=5)
        result = run_treatment(
            small_simulation.dataset, "a", basis, fast_estimation, small_simulation.graph
        )
        assert np.isfinite(result.tau_hat)
        assert result.se > 0
        assert result.ci_low < result.tau_hat < result.ci_high
        assert abs(result.tau_hat - small_simulation.truth.tau) < 0.5
        assert result.moran is not None
        assert 0.0 <= result.moran_p <= 1.0
        assert len(result.folds) == 3
        assert result.coefficients["term"].tolist() == ["intercept", "a", "x1", "x2"]
        assert result.balance is not None
        assert result.naive is not None

    def test_record_fields(self, small_simulation, fast_estimation):
        """Test the JSON record layout."""
        basis = icar_basis(small_simulation.graph, K=5)
        record = run_treatment(small_simulation.dataset, "a", basis, fast_estimation).to_record()
        for key in ("treatment", "effect", "se", "lower95", "upper95", "beta_hat", "n"):
            assert key in record
        assert record["moran_p"] is None
        assert len(record["lambda_records"]["folds"]) == 3
        assert set(record["naive_ols"]) == {"effect", "se"}

    def test_without_basis(self, linear_dataset, fast_estimation):
        """Test that a run with no basis still estimates the linear effect."""
        result = run_treatment(linear_dataset, "a", None, fast_estimation)
        assert result.tau_hat == pytest.approx(1.5, abs=0.3)
        frame = result.influence_frame(linear_dataset.unit_ids)
        assert list(frame.columns) == ["unit_id", "influence"]
        assert len(frame) == linear_dataset.n

    def test_full_sample_beta(self, linear_dataset, fast_cv):
        """Test that the full-sample outcome fit without basis is OLS."""
        outcome = fit_outcome(linear_dataset, "a", None, fast_cv)
        assert outcome.beta_hat == pytest.approx(naive_ols(linear_dataset, "a").tau_hat)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_basis_column_on_small_island(self, fast_cv, seed):
        """Test a basis column supported only on a two-unit island."""
        lattice = rook_lattice(5)
        graph = AdjacencyGraph(
            n=27,
            edges=np.vstack([lattice.edges, [[25, 26]]]),
            node_ids=(*lattice.node_ids, "i1", "i2"),
        )
        basis = icar_basis(graph, K=8)
        island = basis.Z[:, 7]
        np.testing.assert_allclose(island[:25], 0.0, atol=1e-10)
        assert basis.eigenvalues[7] == pytest.approx(2.0)

        rng = np.random.default_rng(seed)
        x1 = rng.standard_normal(27)
        a = 0.5 * x1 + rng.standard_normal(27)
        y = 1.0 + a + x1 + 3.0 * island + 0.5 * rng.standard_normal(27)
        data = Dataset(
            unit_ids=graph.node_ids,
            outcome=y,
            treatments={"a": a},
            confounders={"x1": x1},
        )
        config = EstimationConfig(folds=10, seed=seed, cv=fast_cv)
        result = run_treatment(data, "a", basis, config, graph)
        assert np.isfinite(result.tau_hat)
        assert result.se > 0
        assert len(result.folds) == 10


class TestNaiveOls:
    """Test the unadjusted baseline."""

    def test_matches_polyfit(self):
        """Test the slope and classical SE against a direct computation."""
        data = twenty_units()
        a, y = data.treatment("a"), data.outcome
        estimate = naive_ols(data, "a")
        slope, intercept = np.polyfit(a, y, 1)
        resid = y - intercept - slope * a
        se = np.sqrt(resid @ resid / 18 / np.sum((a - a.mean()) ** 2))
        assert estimate.tau_hat == pytest.approx(slope, rel=1e-10)
        assert estimate.se == pytest.approx(se, rel=1e-8)

    def test_too_few_units(self):
        """Test that n <= p is degenerate."""
        data = Dataset(
            unit_ids=("a", "b", "c"),
            outcome=np.array([1.0, 2.0, 0.0]),
            treatments={"t": np.array([0.0, 1.0, 3.0])},
            confounders={"x": np.array([1.0, 0.0, 2.0])},
        )
        with pytest.raises(DegenerateDataError):
            naive_ols(data, "t")
