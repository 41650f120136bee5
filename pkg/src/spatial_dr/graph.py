"""
Binary adjacency graphs over areal units.

This module provides the AdjacencyGraph type, its construction from edge
lists and Matrix Market files, and the matrix views used by the spectral
bases: the doubly centered adjacency matrix and the Laplacian-style
precision matrix Q = D - rho W.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse
from numpy.typing import NDArray
from scipy.sparse.csgraph import connected_components as _csgraph_components

from .errors import ConfigurationError, DataError, ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrecisionSpec:
    """Autocorrelation parameter of the CAR precision matrix."""

    rho: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(
                f"rho must lie in [0, 1], got {self.rho}", operation="PrecisionSpec"
            )


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Symmetric binary adjacency over n nodes.

    Edges are stored once as (i, j) with i < j, sorted lexicographically.
    Isolated nodes are allowed and form their own components.
    """

    n: int
    edges: NDArray[np.intp]
    node_ids: tuple[str, ...] = ()
    dropped_self_loops: int = field(default=0, compare=False)
    dropped_duplicates: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n:
                raise DataError("edge index out of range", operation="AdjacencyGraph")
            edges = np.sort(edges, axis=1)
            if np.any(edges[:, 0] == edges[:, 1]):
                raise DataError("self-loop in edge array", operation="AdjacencyGraph")
            edges = np.unique(edges, axis=0)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.node_ids and len(self.node_ids) != self.n:
            raise DataError(
                f"{len(self.node_ids)} node ids for {self.n} nodes",
                operation="AdjacencyGraph",
            )

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> scipy.sparse.csr_array:
        """Sparse symmetric W with unit weights."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        data = np.ones(len(rows), dtype=np.float64)
        return scipy.sparse.csr_array((data, (rows, cols)), shape=(self.n, self.n))

    @cached_property
    def degree(self) -> NDArray[np.int64]:
        counts = np.bincount(self.edges.ravel(), minlength=self.n).astype(np.int64)
        counts.setflags(write=False)
        return counts

    @property
    def total_weight(self) -> float:
        """S0, the sum of all w_ij (each undirected edge counted twice)."""
        return 2.0 * self.edge_count

    def subgraph(self, nodes: Sequence[int] | NDArray[np.intp]) -> "AdjacencyGraph":
        """Induced subgraph on `nodes`; node k of the result is nodes[k]."""
        nodes = np.asarray(nodes, dtype=np.intp)
        relabel = np.full(self.n, -1, dtype=np.intp)
        relabel[nodes] = np.arange(len(nodes))
        mapped = relabel[self.edges] if self.edges.size else self.edges
        kept = mapped[(mapped >= 0).all(axis=1)] if mapped.size else mapped
        ids = tuple(self.node_ids[k] for k in nodes) if self.node_ids else ()
        return AdjacencyGraph(n=len(nodes), edges=kept, node_ids=ids)


def from_edge_list(
    pairs: Iterable[tuple[str, str]], node_ids: Sequence[str]
) -> AdjacencyGraph:
    """Build an undirected graph from id pairs.

    Duplicate pairs (in either direction) are collapsed and self-loops are
    dropped; both are counted and logged.

    Args:
        pairs: Unordered (src, dst) id pairs
        node_ids: Ids of all nodes; node k of the graph carries node_ids[k]

    Returns:
        The graph over len(node_ids) nodes

    Raises:
        DataError: If a pair names an id not in node_ids
    """
    index = {str(node): k for k, node in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise DataError("duplicate node id in graph", operation="from_edge_list")

    seen: set[tuple[int, int]] = set()
    self_loops = 0
    duplicates = 0
    for src, dst in pairs:
        try:
            i, j = index[str(src)], index[str(dst)]
        except KeyError:
            raise DataError(
                f"edge ({src!r}, {dst!r}) names an unknown id",
                operation="from_edge_list",
            ) from None
        if i == j:
            self_loops += 1
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)

    if self_loops:
        logger.warning("Dropped %d self-loops from edge list", self_loops)
    if duplicates:
        logger.warning("Collapsed %d duplicate edges", duplicates)

    edges = np.array(sorted(seen), dtype=np.intp).reshape(-1, 2)
    return AdjacencyGraph(
        n=len(node_ids),
        edges=edges,
        node_ids=tuple(str(u) for u in node_ids),
        dropped_self_loops=self_loops,
        dropped_duplicates=duplicates,
    )


def load_edge_list(path: str | Path) -> tuple[list[tuple[str, str]], list[str]]:
    """Read a `src,dst` edge-list CSV.

    A row whose `dst` cell is empty declares an isolated node.

    Returns:
        The edge pairs and the node ids in order of first appearance
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"edge list not found: {path}", operation="load_edge_list")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    missing = [c for c in ("src", "dst") if c not in frame.columns]
    if missing:
        raise ConfigurationError(
            f"edge list {path.name} lacks columns", missing, operation="load_edge_list"
        )

    node_ids: dict[str, None] = {}
    pairs: list[tuple[str, str]] = []
    for src, dst in zip(frame["src"].str.strip(), frame["dst"].str.strip(), strict=True):
        if src == "":
            raise DataError("edge list row with empty src", operation="load_edge_list")
        node_ids.setdefault(src)
        if dst == "":
            continue
        node_ids.setdefault(dst)
        pairs.append((src, dst))
    return pairs, list(node_ids)


def load_matrix_market(path: str | Path, node_ids: Sequence[str]) -> AdjacencyGraph:
    """Read a symmetric coordinate Matrix Market adjacency matrix.

    Nonzero off-diagonal entries become edges; any nonzero value counts as
    an edge and diagonal entries are dropped as self-loops.
    """
    matrix = scipy.sparse.coo_array(scipy.io.mmread(str(path)))
    if matrix.shape != (len(node_ids), len(node_ids)):
        raise DataError(
            f"matrix shape {matrix.shape} does not match {len(node_ids)} node ids",
            operation="load_matrix_market",
        )
    keep = matrix.data != 0
    rows, cols = matrix.row[keep], matrix.col[keep]
    ids = [str(u) for u in node_ids]
    return from_edge_list(((ids[i], ids[j]) for i, j in zip(rows, cols, strict=True)), ids)


def rook_lattice(side: int) -> AdjacencyGraph:
    """The side×side rook-contiguity lattice; node r*side+c is cell (r, c)."""
    if side < 1:
        raise ParameterError("lattice side must be positive", operation="rook_lattice")
    cells = np.arange(side * side).reshape(side, side)
    horizontal = np.column_stack([cells[:, :-1].ravel(), cells[:, 1:].ravel()])
    vertical = np.column_stack([cells[:-1, :].ravel(), cells[1:, :].ravel()])
    return AdjacencyGraph(
        n=side * side,
        edges=np.vstack([horizontal, vertical]),
        node_ids=tuple(f"{k:05d}" for k in range(side * side)),
    )


def doubly_center(graph: AdjacencyGraph) -> NDArray[np.float64]:
    """Dense (I - 11'/n) W (I - 11'/n).

    Uses W~_ij = W_ij - r_i/n - r_j/n + s/n^2 with r the row sums of W and s
    their total, which avoids forming the centering projector.
    """
    if graph.n < 2:
        raise ParameterError("doubly_center needs n >= 2", operation="doubly_center")
    n = graph.n
    w = graph.adjacency.toarray()
    r = w.sum(axis=1)
    s = r.sum()
    centered = w - r[:, None] / n - r[None, :] / n + s / n**2
    # exact symmetry regardless of summation order
    return 0.5 * (centered + centered.T)


def precision_matrix(
    graph: AdjacencyGraph, spec: PrecisionSpec = PrecisionSpec()
) -> scipy.sparse.csr_array:
    """Sparse Q = D - rho W."""
    degree = scipy.sparse.diags_array(graph.degree.astype(np.float64))
    return scipy.sparse.csr_array(degree - spec.rho * graph.adjacency)


def connected_components(graph: AdjacencyGraph) -> NDArray[np.int32]:
    """Component label per node, numbered 0..c-1 in order of first node."""
    _, labels = _csgraph_components(
        scipy.sparse.csr_matrix(graph.adjacency), directed=False
    )
    return np.asarray(labels, dtype=np.int32)
