"""
Graph-spectral basis construction and basis-dimension selection.

This module provides Moran eigenvector maps (eigenvectors of the doubly
centered adjacency matrix, largest eigenvalues first) and ICAR bases
(eigenvectors of the precision matrix Q = D - rho W for its smallest nonzero
eigenvalues), together with the residual-autocorrelation rule that picks the
basis dimension K.

Eigenvectors are made reproducible in two steps: inside a cluster of equal
eigenvalues the basis is replaced by a canonical one (Gram-Schmidt over the
projections of the coordinate axes, in coordinate order), then every vector is
flipped so that its entry of largest absolute value is positive.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from numpy.typing import NDArray

from .config import BasisFamily
from .diagnostics import FitMetrics, MoranResult, morans_i
from .errors import EigensolverError, ParameterError
from .graph import (
    AdjacencyGraph,
    PrecisionSpec,
    connected_components,
    doubly_center,
    precision_matrix,
)

logger = logging.getLogger(__name__)

CLUSTER_GAP = 1e-10
NULL_THRESHOLD = 1e-8
RESIDUAL_TOL = 1e-10
# Above this many nodes the ICAR basis uses shift-invert Lanczos on sparse Q.
DENSE_LIMIT = 4000
# Extra eigenpairs computed past K so a cluster cut by the K boundary is whole.
_CLUSTER_MARGIN = 8


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """An n×K matrix of orthonormal spectral basis columns.

    MEM eigenvalues are in descending order, ICAR eigenvalues ascending.
    """

    family: BasisFamily
    Z: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]
    rho: float | None = None

    def __post_init__(self) -> None:
        if self.Z.ndim != 2 or self.Z.shape[1] != len(self.eigenvalues):
            raise ParameterError(
                f"basis shape {self.Z.shape} does not match "
                f"{len(self.eigenvalues)} eigenvalues",
                operation="BasisMatrix",
            )
        for array in (self.Z, self.eigenvalues):
            array.setflags(write=False)

    @property
    def K(self) -> int:
        return int(self.Z.shape[1])

    @property
    def n(self) -> int:
        return int(self.Z.shape[0])

    def truncate(self, K: int) -> "BasisMatrix":
        """The first K columns; every K in a sweep shares one decomposition."""
        if not 0 <= K <= self.K:
            raise ParameterError(
                f"cannot truncate a {self.K}-column basis to K={K}",
                operation="BasisMatrix.truncate",
            )
        return BasisMatrix(
            family=self.family,
            Z=self.Z[:, :K].copy(),
            eigenvalues=self.eigenvalues[:K].copy(),
            rho=self.rho,
        )

    def rows(self, indices: Sequence[int] | NDArray[np.intp]) -> NDArray[np.float64]:
        return self.Z[np.asarray(indices, dtype=np.intp)]

    def column_names(self) -> list[str]:
        prefix = self.family.value.lower()
        return [f"{prefix}_{k + 1}" for k in range(self.K)]


def basis_frame(basis: BasisMatrix, unit_ids: Sequence[str]) -> pd.DataFrame:
    """Basis columns keyed by unit id, for external plotting."""
    if len(unit_ids) != basis.n:
        raise ParameterError(
            f"{len(unit_ids)} unit ids for a {basis.n}-row basis",
            operation="basis_frame",
        )
    frame = pd.DataFrame(basis.Z, columns=basis.column_names())
    frame.insert(0, "unit_id", list(unit_ids))
    return frame


def _fix_signs(vectors: NDArray[np.float64]) -> NDArray[np.float64]:
    """Flip each column so its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _canonical_cluster(vectors: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rotation-invariant orthonormal basis of span(vectors)."""
    m = vectors.shape[1]
    if m == 1:
        return vectors
    projector = vectors @ vectors.T
    accepted: list[NDArray[np.float64]] = []
    for i in range(projector.shape[0]):
        candidate = projector[:, i].copy()
        for q in accepted:
            candidate -= (q @ candidate) * q
        norm = np.linalg.norm(candidate)
        if norm > 1e-6:
            accepted.append(candidate / norm)
            if len(accepted) == m:
                break
    return np.column_stack(accepted)


def _canonicalize(
    eigenvalues: NDArray[np.float64], vectors: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Canonicalize each eigenvalue cluster, then fix signs."""
    if len(eigenvalues) == 0:
        return vectors
    out = vectors.copy()
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    start = 0
    for stop in range(1, len(eigenvalues) + 1):
        boundary = stop == len(eigenvalues) or (
            abs(eigenvalues[stop] - eigenvalues[stop - 1]) >= CLUSTER_GAP * scale
        )
        if boundary:
            if stop - start > 1:
                out[:, start:stop] = _canonical_cluster(vectors[:, start:stop])
            start = stop
    return _fix_signs(out)


def _check_residuals(
    matrix: NDArray[np.float64] | scipy.sparse.sparray,
    eigenvalues: NDArray[np.float64],
    vectors: NDArray[np.float64],
    operation: str,
) -> None:
    if len(eigenvalues) == 0:
        return
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    residual = matrix @ vectors - vectors * eigenvalues
    worst = float(np.max(np.linalg.norm(residual, axis=0)))
    if worst > RESIDUAL_TOL * scale * max(1.0, np.sqrt(vectors.shape[0])):
        raise EigensolverError(
            f"eigenpair residual {worst:.3e} exceeds tolerance",
            operation=operation,
            residual=worst,
        )


def mem_basis(graph: AdjacencyGraph, K: int) -> BasisMatrix:
    """Moran eigenvector maps for the K largest eigenvalues.

    The constant vector is always an eigenvector of the doubly centered
    matrix with eigenvalue 0; it is pushed to the bottom of the spectrum by
    subtracting c·11'/n with c above the spectral radius, so it is never
    returned and every column is orthogonal to 1.

    Args:
        graph: The adjacency graph
        K: Number of eigenvectors, 1 <= K <= n-1

    Raises:
        ParameterError: If K is out of range
    """
    n = graph.n
    if not 1 <= K <= n - 1:
        raise ParameterError(
            f"MEM basis needs 1 <= K <= n-1 = {n - 1}, got K={K}",
            operation="mem_basis",
        )
    centered = doubly_center(graph)
    shift = 1.0 + float(np.max(np.sum(np.abs(centered), axis=1)))
    deflated = centered - shift / n

    want = min(n - 1, K + _CLUSTER_MARGIN)
    values, vectors = scipy.linalg.eigh(deflated, subset_by_index=[n - want, n - 1])
    values, vectors = values[::-1], vectors[:, ::-1]
    vectors = _canonicalize(values, vectors)
    _check_residuals(centered, values, vectors, "mem_basis")

    values, vectors = values[:K], vectors[:, :K]
    nonpositive = int(np.sum(values <= 0.0))
    if nonpositive:
        logger.warning(
            "MEM basis retains %d non-positive eigenvalues (negative autocorrelation)",
            nonpositive,
        )
    return BasisMatrix(family=BasisFamily.MEM, Z=vectors, eigenvalues=values)


def _icar_dense(q: scipy.sparse.csr_array) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    return scipy.linalg.eigh(q.toarray())


def _icar_sparse(
    q: scipy.sparse.csr_array, count: int
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    # Shift-invert about -1: Q is positive semidefinite, so Q + I is invertible.
    values, vectors = scipy.sparse.linalg.eigsh(
        scipy.sparse.csc_matrix(q), k=count, sigma=-1.0, which="LM", tol=1e-12
    )
    order = np.argsort(values)
    return values[order], vectors[:, order]


def icar_basis(
    graph: AdjacencyGraph, spec: PrecisionSpec = PrecisionSpec(), K: int = 1
) -> BasisMatrix:
    """ICAR basis: eigenvectors of Q for its K smallest nonzero eigenvalues.

    Eigenvalues at or below 1e-8·λmax(Q) form the null space and are never
    returned; for rho = 1 its dimension is the number of connected
    components.

    Raises:
        ParameterError: If K exceeds the number of nonzero eigenvalues
    """
    n = graph.n
    q = precision_matrix(graph, spec)
    components = int(connected_components(graph).max()) + 1 if n else 0
    if K < 1:
        raise ParameterError(f"ICAR basis needs K >= 1, got {K}", operation="icar_basis")
    if spec.rho == 1.0 and K > n - components:
        raise ParameterError(
            f"ICAR basis needs K <= n - components = {n - components}, got K={K}",
            operation="icar_basis",
            limit=n - components,
        )

    if n <= DENSE_LIMIT:
        values, vectors = _icar_dense(q)
        lambda_max = float(values[-1]) if n else 0.0
    else:
        count = min(n - 1, K + components + _CLUSTER_MARGIN)
        values, vectors = _icar_sparse(q, count)
        lambda_max = float(
            scipy.sparse.linalg.eigsh(
                scipy.sparse.csc_matrix(q), k=1, which="LA", return_eigenvectors=False
            )[0]
        )

    keep = values > NULL_THRESHOLD * max(lambda_max, np.finfo(float).tiny)
    nonzero = int(np.sum(keep)) if n <= DENSE_LIMIT else n - int(np.sum(~keep))
    if K > nonzero:
        raise ParameterError(
            f"ICAR basis needs K <= {nonzero} nonzero eigenvalues, got K={K}",
            operation="icar_basis",
            limit=nonzero,
        )
    values, vectors = values[keep], vectors[:, keep]
    take = min(len(values), K + _CLUSTER_MARGIN)
    values, vectors = values[:take], vectors[:, :take]
    vectors = _canonicalize(values, vectors)
    _check_residuals(q, values, vectors, "icar_basis")
    return BasisMatrix(
        family=BasisFamily.ICAR,
        Z=vectors[:, :K],
        eigenvalues=values[:K],
        rho=spec.rho,
    )


def build_basis(
    graph: AdjacencyGraph,
    family: BasisFamily,
    K: int,
    spec: PrecisionSpec = PrecisionSpec(),
) -> BasisMatrix:
    """Dispatch to mem_basis or icar_basis."""
    if family is BasisFamily.MEM:
        return mem_basis(graph, K)
    return icar_basis(graph, spec, K)


@dataclass(frozen=True, eq=False)
class KEvaluation:
    """What a residual provider reports for one candidate K."""

    residuals: NDArray[np.float64]
    metrics: FitMetrics | None = None


@dataclass(frozen=True)
class SweepRow:
    K: int
    moran: MoranResult
    metrics: FitMetrics | None = None

    @property
    def moran_p(self) -> float:
        return self.moran.p_value


@dataclass(frozen=True)
class KSelection:
    """Outcome of the residual-autocorrelation rule over a candidate grid."""

    K: int
    no_pass: bool
    alpha: float
    rows: tuple[SweepRow, ...] = field(default_factory=tuple)

    def to_frame(self, family: BasisFamily | None = None) -> pd.DataFrame:
        records = []
        for row in self.rows:
            metrics = row.metrics
            records.append(
                {
                    "K": row.K,
                    "family": family.value if family else "",
                    "rmse": metrics.rmse if metrics else np.nan,
                    "mae": metrics.mae if metrics else np.nan,
                    "r2": metrics.r2 if metrics else np.nan,
                    "active_bases": metrics.active_bases if metrics else -1,
                    "moran_i": row.moran.I,
                    "moran_p": row.moran_p,
                    "selected": row.K == self.K,
                    "no_pass": self.no_pass and row.K == self.K,
                }
            )
        return pd.DataFrame.from_records(records)


def select_K(
    candidates: Sequence[int],
    residual_provider: Callable[[int], KEvaluation | NDArray[np.float64]],
    graph: AdjacencyGraph,
    alpha: float = 0.05,
    moran: Callable[[NDArray[np.float64], AdjacencyGraph], MoranResult] = morans_i,
) -> KSelection:
    """Pick the smallest K whose residuals show no spatial autocorrelation.

    Every candidate is evaluated so the full sweep table is available; if no
    candidate's Moran p-value exceeds alpha the largest candidate is returned
    flagged as no-pass.

    Args:
        candidates: Ascending candidate dimensions
        residual_provider: Maps K to residuals (or a KEvaluation with metrics)
        graph: Graph the residuals live on
        alpha: Significance level of the residual Moran test
        moran: Moran test to apply (analytic by default)

    Raises:
        ParameterError: If candidates is empty or not ascending, or alpha is
            outside (0, 1)
    """
    candidates = [int(k) for k in candidates]
    if not candidates:
        raise ParameterError("select_K needs at least one candidate", operation="select_K")
    if any(b <= a for a, b in zip(candidates, candidates[1:], strict=False)):
        raise ParameterError(
            f"candidates must be strictly ascending, got {candidates}",
            operation="select_K",
        )
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}", operation="select_K")

    rows = []
    for K in candidates:
        try:
            evaluation = residual_provider(K)
        except Exception as exc:
            if hasattr(exc, "context"):
                exc.context.setdefault("K", K)
            logger.error("Residual provider failed at K=%d: %s", K, exc)
            raise
        if not isinstance(evaluation, KEvaluation):
            evaluation = KEvaluation(residuals=np.asarray(evaluation, dtype=np.float64))
        result = moran(evaluation.residuals, graph)
        rows.append(SweepRow(K=K, moran=result, metrics=evaluation.metrics))
        logger.debug("K=%d Moran I=%.4f p=%.4g", K, result.I, result.p_value)

    passing = [row.K for row in rows if row.moran_p > alpha]
    if passing:
        return KSelection(K=passing[0], no_pass=False, alpha=alpha, rows=tuple(rows))
    logger.warning(
        "No candidate K removed residual autocorrelation at alpha=%g; using K=%d",
        alpha,
        candidates[-1],
    )
    return KSelection(K=candidates[-1], no_pass=True, alpha=alpha, rows=tuple(rows))
