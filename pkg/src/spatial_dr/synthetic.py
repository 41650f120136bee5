"""
Spatially confounded synthetic data on lattice graphs.

This module provides the partially linear data generating process used to
validate the estimator:

    u = Z α (scaled to unit sd), X ~ N(0, I_q)
    A = X γ0 + δ u + σ_A ε_A
    y = τ A + X γ1 + u + σ_y ε_y

where Z holds the `spatial_rank` smoothest ICAR eigenvectors of an m×m rook
lattice. Placebo treatments share the treatment's structure (and therefore
its spatial confounding) but have no effect on y.

All draws come from numpy's PCG64 generator seeded with DgpSpec.seed.
"""

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .data_model import ColumnSpec, Dataset, write_dataset
from .errors import ParameterError
from .graph import AdjacencyGraph, rook_lattice
from .output import atomic_write_frame, atomic_write_json
from .spectral_basis import BasisMatrix, icar_basis

logger = logging.getLogger(__name__)

GENERATOR_NAME = "numpy.random.PCG64"


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the lattice data generating process."""

    grid_side: int = 30
    tau: float = 1.0
    confounder_count: int = 3
    spatial_rank: int = 20
    confounding_strength: float = 5.0
    noise_sd_treatment: float = 1.0
    noise_sd_outcome: float = 1.0
    seed: int = 0
    placebo_treatments: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.grid_side < 2:
            errors.append(f"grid_side must be >= 2, got {self.grid_side}")
        if self.confounder_count < 0:
            errors.append(f"confounder_count must be >= 0, got {self.confounder_count}")
        if not 1 <= self.spatial_rank < self.grid_side**2 - 1:
            errors.append(
                f"spatial_rank must satisfy 1 <= r < m² - 1 = {self.grid_side**2 - 1}, "
                f"got {self.spatial_rank}"
            )
        if self.noise_sd_treatment <= 0:
            errors.append("noise_sd_treatment must be positive")
        if self.noise_sd_outcome <= 0:
            errors.append("noise_sd_outcome must be positive")
        if self.placebo_treatments < 0:
            errors.append("placebo_treatments must be >= 0")
        if errors:
            raise ParameterError("invalid DGP settings", errors, operation="DgpSpec")

    @property
    def n(self) -> int:
        return self.grid_side**2

    def column_spec(self) -> ColumnSpec:
        """Column names of the generated data file."""
        return ColumnSpec(
            outcome_col="y",
            treatment_cols=("a", *(f"placebo_{k + 1}" for k in range(self.placebo_treatments))),
            confounder_cols=tuple(f"x{k + 1}" for k in range(self.confounder_count)),
            id_col="unit_id",
        )


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """True parameter values behind a generated dataset."""

    tau: float
    gamma0: NDArray[np.float64]
    gamma1: NDArray[np.float64]
    delta: float
    u: NDArray[np.float64]
    alpha: NDArray[np.float64]
    spec: DgpSpec

    def effect(self, treatment_name: str) -> float:
        """True effect of a generated treatment column (0 for placebos)."""
        return self.tau if treatment_name == "a" else 0.0

    def to_dict(self) -> dict[str, object]:
        return {
            "tau": self.tau,
            "effects": {
                name: self.effect(name) for name in self.spec.column_spec().treatment_cols
            },
            "gamma0": self.gamma0,
            "gamma1": self.gamma1,
            "delta": self.delta,
            "alpha": self.alpha,
            "dgp": asdict(self.spec),
            "generator": GENERATOR_NAME,
        }


@dataclass(frozen=True, eq=False)
class Simulation:
    dataset: Dataset
    graph: AdjacencyGraph
    truth: SyntheticTruth


def generate(spec: DgpSpec, basis: BasisMatrix | None = None) -> Simulation:
    """Draw one dataset from the lattice DGP.

    Args:
        spec: DGP parameters
        basis: Optional precomputed ICAR basis of the DgpSpec lattice with at
            least spatial_rank columns (Monte Carlo loops reuse it)

    Returns:
        Simulation holding the dataset, the lattice and the true values
    """
    graph = rook_lattice(spec.grid_side)
    if basis is None or basis.K < spec.spatial_rank or basis.n != spec.n:
        basis = icar_basis(graph, K=spec.spatial_rank)
    Z = basis.Z[:, : spec.spatial_rank]

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, q = spec.n, spec.confounder_count
    alpha = rng.standard_normal(spec.spatial_rank)
    u = Z @ alpha
    u = u / u.std()
    X = rng.standard_normal((n, q))
    gamma0 = rng.uniform(-1.0, 1.0, q)
    gamma1 = rng.uniform(-1.0, 1.0, q)
    delta = spec.confounding_strength

    a = X @ gamma0 + delta * u + spec.noise_sd_treatment * rng.standard_normal(n)
    y = spec.tau * a + X @ gamma1 + u + spec.noise_sd_outcome * rng.standard_normal(n)

    treatments = {"a": a}
    for k in range(spec.placebo_treatments):
        loading = rng.uniform(-1.0, 1.0, q)
        treatments[f"placebo_{k + 1}"] = (
            X @ loading + delta * u + spec.noise_sd_treatment * rng.standard_normal(n)
        )

    dataset = Dataset(
        unit_ids=graph.node_ids,
        outcome=y,
        treatments=treatments,
        confounders={f"x{k + 1}": X[:, k] for k in range(q)},
    )
    truth = SyntheticTruth(
        tau=spec.tau,
        gamma0=gamma0,
        gamma1=gamma1,
        delta=delta,
        u=u,
        alpha=alpha,
        spec=spec,
    )
    logger.debug("Generated %d units (seed=%d, rank=%d)", n, spec.seed, spec.spatial_rank)
    return Simulation(dataset=dataset, graph=graph, truth=truth)


def edge_frame(graph: AdjacencyGraph) -> pd.DataFrame:
    """The graph as a `src,dst` edge-list table over its node ids.

    Isolated nodes get a row with an empty `dst`.
    """
    ids = np.asarray(graph.node_ids)
    isolated = ids[graph.degree == 0]
    return pd.DataFrame(
        {
            "src": np.concatenate([ids[graph.edges[:, 0]], isolated]),
            "dst": np.concatenate([ids[graph.edges[:, 1]], np.full(len(isolated), "")]),
        }
    )


def write_simulation(spec: DgpSpec, directory: str | Path) -> dict[str, Path]:
    """Generate a dataset and persist it as data.csv, edges.csv and truth.json."""
    directory = Path(directory)
    simulation = generate(spec)
    paths = {
        "data": directory / "data.csv",
        "edges": directory / "edges.csv",
        "truth": directory / "truth.json",
    }
    write_dataset(simulation.dataset, paths["data"], spec.column_spec())
    atomic_write_frame(edge_frame(simulation.graph), paths["edges"])
    atomic_write_json(simulation.truth.to_dict(), paths["truth"])
    logger.info(
        "Wrote %d units and %d edges to %s",
        simulation.dataset.n,
        simulation.graph.edge_count,
        directory,
    )
    return paths


def replicate_seeds(seed: int, reps: int) -> list[int]:
    """Independent per-replicate seeds spawned from one master seed."""
    if reps < 0:
        raise ParameterError("reps must be >= 0", operation="replicate_seeds")
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(child.generate_state(1)[0]) for child in children]


Estimator = Callable[[Simulation], tuple[float, float]]


@dataclass(frozen=True, eq=False)
class CoverageSummary:
    """Monte Carlo record of (estimate, SE) pairs against a known effect."""

    truth: float
    estimates: NDArray[np.float64]
    ses: NDArray[np.float64]
    width: float = 3.0
    covered: NDArray[np.bool_] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "covered", np.abs(self.estimates - self.truth) < self.width * self.ses
        )

    @property
    def reps(self) -> int:
        return len(self.estimates)

    @property
    def hits(self) -> int:
        return int(self.covered.sum())

    @property
    def bias(self) -> float:
        return float(np.mean(self.estimates) - self.truth)


def monte_carlo_coverage(
    spec: DgpSpec,
    reps: int,
    estimator: Estimator,
    width: float = 3.0,
    treatment_name: str = "a",
) -> CoverageSummary:
    """Run an estimator over replicate datasets and tally coverage.

    Replicate r uses the r-th seed spawned from spec.seed; the ICAR basis of
    the lattice is computed once and shared.
    """
    graph = rook_lattice(spec.grid_side)
    basis = icar_basis(graph, K=spec.spatial_rank)
    estimates = np.empty(reps)
    ses = np.empty(reps)
    truth = spec.tau
    for r, seed in enumerate(replicate_seeds(spec.seed, reps)):
        replicate = DgpSpec(**{**asdict(spec), "seed": seed})
        simulation = generate(replicate, basis)
        truth = simulation.truth.effect(treatment_name)
        estimates[r], ses[r] = estimator(simulation)
    summary = CoverageSummary(truth=truth, estimates=estimates, ses=ses, width=width)
    logger.info(
        "Coverage %d/%d within %.1f SE (bias %.3g)", summary.hits, reps, width, summary.bias
    )
    return summary
