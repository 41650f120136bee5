"""Tests for Moran's I, fit metrics and the basis sweep."""

import numpy as np
import pytest

from spatial_dr.config import BasisFamily, EstimationConfig, MoranMethod
from spatial_dr.diagnostics import basis_sweep, fit_metrics, moran_statistic, morans_i
from spatial_dr.errors import DegenerateDataError, ParameterError
from spatial_dr.graph import from_edge_list, rook_lattice
from spatial_dr.spectral_basis import icar_basis


class TestMoranStatistic:
    """Test the statistic itself."""

    def test_path3_alternating(self, path3):
        """Test that (1, -2, 1) on a - b - c has I = -1."""
        assert moran_statistic(np.array([1.0, -2.0, 1.0]), path3) == pytest.approx(-1.0)

    def test_path3_antisymmetric(self, path3):
        """Test that (1, 0, -1) on a - b - c has I = 0."""
        assert moran_statistic(np.array([1.0, 0.0, -1.0]), path3) == pytest.approx(0.0, abs=1e-15)

    def test_location_scale_invariant(self):
        """Test that I ignores shifts and positive rescaling."""
        graph = rook_lattice(5)
        values = np.random.default_rng(0).standard_normal(25)
        assert moran_statistic(3.0 * values + 7.0, graph) == pytest.approx(
            moran_statistic(values, graph), rel=1e-12
        )

    def test_constant_values(self, cycle4):
        """Test that constant values are degenerate."""
        with pytest.raises(DegenerateDataError):
            moran_statistic(np.full(4, 2.5), cycle4)

    def test_edgeless_graph(self):
        """Test that S0 = 0 is degenerate."""
        graph = from_edge_list([], ["a", "b", "c"])
        with pytest.raises(DegenerateDataError):
            moran_statistic(np.array([1.0, 2.0, 3.0]), graph)

    def test_length_mismatch(self, cycle4):
        """Test that values must match the node count."""
        with pytest.raises(ParameterError):
            moran_statistic(np.arange(3.0), cycle4)


class TestMoranTest:
    """Test the analytic and permutation tests."""

    def test_analytic_moments(self):
        """Test E[I] and Var[I] against the general-weights formula."""
        graph = rook_lattice(4)
        w = graph.adjacency.toarray()
        n, s0 = graph.n, w.sum()
        s1 = 0.5 * np.sum((w + w.T) ** 2)
        s2 = np.sum((w.sum(axis=0) + w.sum(axis=1)) ** 2)
        expected = -1.0 / (n - 1)
        variance = (n * n * s1 - n * s2 + 3 * s0 * s0) / ((n * n - 1) * s0 * s0) - expected**2
        result = morans_i(np.random.default_rng(1).standard_normal(n), graph)
        assert result.expected == pytest.approx(expected)
        assert result.variance == pytest.approx(variance, rel=1e-12)
        assert result.method is MoranMethod.ANALYTIC
        assert result.z == pytest.approx((result.I - expected) / np.sqrt(variance))

    def test_smooth_field_is_significant(self):
        """Test that the smoothest ICAR vector is strongly autocorrelated."""
        graph = rook_lattice(8)
        smooth = icar_basis(graph, K=1).Z[:, 0]
        result = morans_i(smooth, graph)
        assert result.I > 0.8
        assert result.p_value < 1e-6

    def test_permutation_p_bounds(self):
        """Test 1/(B+1) <= p <= 1 and the floor for a strong pattern."""
        graph = rook_lattice(8)
        smooth = icar_basis(graph, K=1).Z[:, 0]
        result = morans_i(smooth, graph, MoranMethod.PERMUTATION, permutations=99, seed=3)
        assert result.p_value == pytest.approx(1.0 / 100.0)
        assert result.permutations == 99
        noise = np.random.default_rng(2).standard_normal(graph.n)
        result = morans_i(noise, graph, MoranMethod.PERMUTATION, permutations=99, seed=3)
        assert 1.0 / 100.0 <= result.p_value <= 1.0

    def test_permutation_reproducible(self):
        """Test that the same seed gives the same permutation p-value."""
        graph = rook_lattice(6)
        values = np.random.default_rng(4).standard_normal(graph.n)
        first = morans_i(values, graph, MoranMethod.PERMUTATION, permutations=199, seed=11)
        second = morans_i(values, graph, MoranMethod.PERMUTATION, permutations=199, seed=11)
        assert first.p_value == second.p_value

    def test_zero_permutations(self, cycle4):
        """Test the B >= 1 precondition."""
        with pytest.raises(ParameterError):
            morans_i(np.arange(4.0), cycle4, MoranMethod.PERMUTATION, permutations=0)

    @pytest.mark.slow
    @pytest.mark.timeout(300)
    def test_analytic_calibration_under_independence(self):
        """Test that i.i.d. noise is rejected at close to the nominal rate."""
        graph = rook_lattice(10)
        rng = np.random.default_rng(2024)
        rejections = sum(
            morans_i(rng.standard_normal(graph.n), graph).p_value < 0.05 for _ in range(500)
        )
        assert 0.02 <= rejections / 500 <= 0.09


class TestFitMetrics:
    """Test RMSE, MAE and R²."""

    def test_perfect_fit(self):
        """Test zero error and R² = 1."""
        y = np.array([1.0, 2.0, 4.0])
        metrics = fit_metrics(y, y)
        assert metrics.rmse == 0.0
        assert metrics.mae == 0.0
        assert metrics.r2 == 1.0
        assert metrics.active_bases == 0

    def test_mean_prediction(self):
        """Test that predicting the mean gives R² = 0."""
        y = np.array([1.0, 2.0, 3.0, 6.0])
        metrics = fit_metrics(y, np.full(4, 3.0))
        assert metrics.r2 == pytest.approx(0.0)
        assert metrics.mae == pytest.approx(1.5)
        assert metrics.rmse == pytest.approx(np.sqrt(14.0 / 4.0))

    def test_constant_response(self):
        """Test that R² is undefined for constant y."""
        with pytest.raises(DegenerateDataError):
            fit_metrics(np.ones(3), np.zeros(3))

    def test_shape_mismatch(self):
        """Test that y and predictions must align."""
        with pytest.raises(ParameterError):
            fit_metrics(np.ones(3), np.ones(4))


class TestBasisSweep:
    """Test the per-K sweep."""

    def test_rows_per_K(self, small_simulation, fast_estimation):
        """Test one table row per candidate with exactly one selection."""
        report = basis_sweep(
            small_simulation.dataset,
            "a",
            small_simulation.graph,
            BasisFamily.ICAR,
            [2, 5, 10],
            fast_estimation,
        )
        frame = report.to_frame()
        assert frame["K"].tolist() == [2, 5, 10]
        assert set(frame["family"]) == {"ICAR"}
        assert int(frame["selected"].sum()) == 1
        assert report.selected_K in {2, 5, 10}
        assert np.all(frame["active_bases"] <= frame["K"])
        assert np.all((frame["moran_p"] >= 0) & (frame["moran_p"] <= 1))

    def test_reuses_precomputed_basis(self, small_simulation, fast_estimation):
        """Test that a wide enough basis gives the same sweep as a fresh one."""
        graph = small_simulation.graph
        basis = icar_basis(graph, K=10)
        args = (small_simulation.dataset, "a", graph, BasisFamily.ICAR, [3, 5], fast_estimation)
        fresh = basis_sweep(*args).to_frame()
        reused = basis_sweep(*args, basis=basis).to_frame()
        np.testing.assert_allclose(fresh["rmse"], reused["rmse"], rtol=1e-6)

    def test_mem_family(self, small_simulation):
        """Test a MEM sweep with permutation tests."""
        config = EstimationConfig(
            folds=3, moran_method=MoranMethod.PERMUTATION, moran_permutations=49
        )
        report = basis_sweep(
            small_simulation.dataset, "a", small_simulation.graph, BasisFamily.MEM, [4], config
        )
        assert report.family is BasisFamily.MEM
        assert report.to_frame().loc[0, "moran_p"] >= 1.0 / 50.0

    def test_empty_grid(self, small_simulation, fast_estimation):
        """Test that an empty grid is rejected."""
        with pytest.raises(ParameterError):
            basis_sweep(
                small_simulation.dataset,
                "a",
                small_simulation.graph,
                BasisFamily.ICAR,
                [],
                fast_estimation,
            )
