"""Test configuration and fixtures for spatial_dr."""

import numpy as np
import pytest

from spatial_dr.config import CvConfig, EstimationConfig
from spatial_dr.data_model import Dataset
from spatial_dr.graph import AdjacencyGraph, from_edge_list
from spatial_dr.synthetic import DgpSpec, Simulation, generate


@pytest.fixture
def path3() -> AdjacencyGraph:
    """The path a - b - c."""
    return from_edge_list([("a", "b"), ("b", "c")], ["a", "b", "c"])


@pytest.fixture
def cycle4() -> AdjacencyGraph:
    """The 4-cycle 0 - 1 - 2 - 3 - 0."""
    ids = ["0", "1", "2", "3"]
    return from_edge_list([("0", "1"), ("1", "2"), ("2", "3"), ("3", "0")], ids)


@pytest.fixture
def two_components() -> AdjacencyGraph:
    """Two disjoint edges: 0 - 1 and 2 - 3."""
    return from_edge_list([("0", "1"), ("2", "3")], ["0", "1", "2", "3"])


@pytest.fixture
def fast_cv() -> CvConfig:
    """Small λ grid and few inner folds."""
    return CvConfig(folds=3, n_lambdas=15, lambda_min_ratio=1e-3)


@pytest.fixture
def fast_estimation(fast_cv: CvConfig) -> EstimationConfig:
    return EstimationConfig(folds=3, seed=0, cv=fast_cv)


@pytest.fixture
def linear_dataset() -> Dataset:
    """60 units, y = 2 + 1.5·a - x1 + 0.5·x2 + noise."""
    rng = np.random.default_rng(12)
    n = 60
    x1, x2 = rng.standard_normal(n), rng.standard_normal(n)
    a = 0.8 * x1 + rng.standard_normal(n)
    y = 2.0 + 1.5 * a - x1 + 0.5 * x2 + 0.3 * rng.standard_normal(n)
    return Dataset(
        unit_ids=tuple(f"u{k}" for k in range(n)),
        outcome=y,
        treatments={"a": a},
        confounders={"x1": x1, "x2": x2},
    )


@pytest.fixture
def small_spec() -> DgpSpec:
    """An 8×8 lattice with a rank-5 spatial confounder."""
    return DgpSpec(
        grid_side=8,
        tau=1.0,
        confounder_count=2,
        spatial_rank=5,
        confounding_strength=2.0,
        seed=3,
        placebo_treatments=1,
    )


@pytest.fixture
def small_simulation(small_spec: DgpSpec) -> Simulation:
    return generate(small_spec)
