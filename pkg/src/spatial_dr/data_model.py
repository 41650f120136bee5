"""
Unit-level dataset model and CSV ingestion.

This module provides the Dataset and ColumnSpec types, the CSV loader with
listwise deletion of incomplete rows, and the alignment of an adjacency graph
to the dataset's unit order.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .errors import ConfigurationError, DataError, InsufficientDataError, ParseError

if TYPE_CHECKING:
    from .graph import AdjacencyGraph

logger = logging.getLogger(__name__)

MIN_UNITS = 3


def _frozen(values: NDArray[np.float64] | Sequence[float]) -> NDArray[np.float64]:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ColumnSpec:
    """Names of the CSV columns used by an analysis."""

    outcome_col: str
    treatment_cols: tuple[str, ...]
    confounder_cols: tuple[str, ...]
    id_col: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "treatment_cols", tuple(self.treatment_cols))
        object.__setattr__(self, "confounder_cols", tuple(self.confounder_cols))
        if not self.treatment_cols:
            raise ConfigurationError(
                "ColumnSpec needs at least one treatment column",
                operation="ColumnSpec",
            )
        groups = {
            "id": [self.id_col],
            "outcome": [self.outcome_col],
            "treatment": list(self.treatment_cols),
            "confounder": list(self.confounder_cols),
        }
        seen: dict[str, str] = {}
        errors = []
        for group, names in groups.items():
            for name in names:
                if name in seen:
                    errors.append(f"{name!r} listed as both {seen[name]} and {group}")
                seen[name] = group
        if errors:
            raise ConfigurationError(
                "ColumnSpec column groups overlap", errors, operation="ColumnSpec"
            )

    @property
    def numeric_cols(self) -> list[str]:
        """Outcome, treatment and confounder columns in analysis order."""
        return [self.outcome_col, *self.treatment_cols, *self.confounder_cols]

    @property
    def all_cols(self) -> list[str]:
        return [self.id_col, *self.numeric_cols]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable unit-level data: outcome, named treatments and confounders.

    Treatments and confounders keep ColumnSpec order so coefficient reports
    are stable across runs.
    """

    unit_ids: tuple[str, ...]
    outcome: NDArray[np.float64]
    treatments: Mapping[str, NDArray[np.float64]]
    confounders: Mapping[str, NDArray[np.float64]]
    dropped_rows: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        object.__setattr__(self, "outcome", _frozen(self.outcome))
        object.__setattr__(
            self, "treatments", {k: _frozen(v) for k, v in self.treatments.items()}
        )
        object.__setattr__(
            self, "confounders", {k: _frozen(v) for k, v in self.confounders.items()}
        )

        n = len(self.unit_ids)
        if n < MIN_UNITS:
            raise InsufficientDataError(
                f"need at least {MIN_UNITS} units, got {n}", operation="Dataset"
            )
        if len(set(self.unit_ids)) != n:
            duplicates = sorted(
                {u for u in self.unit_ids if self.unit_ids.count(u) > 1}
            )
            raise DataError(
                "duplicate unit id", duplicates, operation="Dataset"
            )
        vectors = {"outcome": self.outcome, **self.treatments, **self.confounders}
        errors = [
            f"{name}: length {len(v)} != {n}"
            for name, v in vectors.items()
            if v.shape != (n,)
        ]
        errors += [
            f"{name}: non-finite values"
            for name, v in vectors.items()
            if v.shape == (n,) and not np.all(np.isfinite(v))
        ]
        if errors:
            raise DataError("inconsistent dataset vectors", errors, operation="Dataset")

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    @property
    def treatment_names(self) -> list[str]:
        return list(self.treatments)

    @property
    def confounder_names(self) -> list[str]:
        return list(self.confounders)

    def treatment(self, name: str) -> NDArray[np.float64]:
        """Get a treatment vector by column name."""
        if name not in self.treatments:
            raise ConfigurationError(
                f"unknown treatment {name!r}",
                [f"available: {', '.join(self.treatments)}"],
                operation="Dataset.treatment",
            )
        return self.treatments[name]

    def confounder_matrix(self) -> NDArray[np.float64]:
        """Confounders as an n×q matrix (q may be 0)."""
        if not self.confounders:
            return np.zeros((self.n, 0))
        return np.column_stack(list(self.confounders.values()))

    def subset(self, indices: Sequence[int] | NDArray[np.intp]) -> "Dataset":
        """Return the dataset restricted to the given row indices, in that order."""
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            outcome=self.outcome[idx],
            treatments={k: v[idx] for k, v in self.treatments.items()},
            confounders={k: v[idx] for k, v in self.confounders.items()},
        )

    def to_frame(self, spec: ColumnSpec) -> pd.DataFrame:
        """Render the dataset as a DataFrame with the ColumnSpec's column names."""
        columns: dict[str, object] = {spec.id_col: list(self.unit_ids)}
        columns[spec.outcome_col] = self.outcome
        columns.update(self.treatments)
        columns.update(self.confounders)
        return pd.DataFrame(columns, columns=spec.all_cols)


def _parse_numeric(column: pd.Series, name: str) -> NDArray[np.float64]:
    """Parse a string column to floats; empty strings become NaN."""
    values = np.empty(len(column), dtype=np.float64)
    for row, cell in enumerate(column):
        text = cell.strip()
        if text == "":
            values[row] = np.nan
            continue
        try:
            values[row] = float(text)
        except ValueError:
            raise ParseError(
                f"non-numeric cell {cell!r} in column {name!r} at data row {row}",
                operation="load_dataset",
                column=name,
                row=row,
            ) from None
    return values


def load_dataset(csv_path: str | Path, spec: ColumnSpec) -> Dataset:
    """Load a unit-level CSV into a Dataset.

    Rows with a missing cell in any used column are dropped (listwise
    deletion) and counted; unused columns are ignored entirely.

    Args:
        csv_path: Path to a UTF-8, comma-separated CSV with a header row
        spec: Column names to read

    Returns:
        Dataset in file row order minus dropped rows

    Raises:
        DataError: If the file is missing or unit ids repeat
        ConfigurationError: If a named column is absent from the header
        ParseError: If a numeric cell cannot be parsed
        InsufficientDataError: If fewer than three complete rows remain
    """
    path = Path(csv_path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}", operation="load_dataset")

    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
    )
    missing = [c for c in spec.all_cols if c not in frame.columns]
    if missing:
        raise ConfigurationError(
            f"columns missing from {path.name}",
            missing,
            operation="load_dataset",
        )

    parsed = {name: _parse_numeric(frame[name], name) for name in spec.numeric_cols}
    ids = frame[spec.id_col].str.strip()

    complete = ids.ne("").to_numpy()
    for values in parsed.values():
        complete &= ~np.isnan(values)
    dropped = int((~complete).sum())
    if dropped:
        logger.warning(
            "Dropped %d of %d rows with missing values in used columns",
            dropped,
            len(frame),
        )
    if complete.sum() < MIN_UNITS:
        raise InsufficientDataError(
            f"only {int(complete.sum())} complete rows in {path.name}; "
            f"need at least {MIN_UNITS}",
            operation="load_dataset",
        )

    return Dataset(
        unit_ids=tuple(ids[complete]),
        outcome=parsed[spec.outcome_col][complete],
        treatments={c: parsed[c][complete] for c in spec.treatment_cols},
        confounders={c: parsed[c][complete] for c in spec.confounder_cols},
        dropped_rows=dropped,
    )


def write_dataset(dataset: Dataset, csv_path: str | Path, spec: ColumnSpec) -> None:
    """Write a Dataset to CSV so that load_dataset reproduces it exactly."""
    from .output import atomic_write_frame

    atomic_write_frame(dataset.to_frame(spec), Path(csv_path))


@dataclass(frozen=True, eq=False)
class GraphAlignment:
    """Result of aligning a graph to a dataset's row order."""

    mapping: NDArray[np.intp]
    graph: "AdjacencyGraph"


def align_graph(
    dataset: Dataset, graph: "AdjacencyGraph", graph_ids: Sequence[str]
) -> GraphAlignment:
    """Align graph rows to dataset rows.

    Args:
        dataset: The dataset whose unit order is authoritative
        graph: Graph whose node k carries id graph_ids[k]
        graph_ids: Node ids of the graph, a superset of dataset.unit_ids

    Returns:
        GraphAlignment whose mapping[k] is the graph row of dataset row k and
        whose graph is the subgraph induced on the retained nodes, reordered
        to dataset order

    Raises:
        DataError: If any dataset unit id is absent from the graph
    """
    position = {str(node): k for k, node in enumerate(graph_ids)}
    missing = [u for u in dataset.unit_ids if u not in position]
    if missing:
        raise DataError(
            f"{len(missing)} dataset unit ids absent from the graph",
            missing,
            operation="align_graph",
        )
    mapping = np.array([position[u] for u in dataset.unit_ids], dtype=np.intp)
    dropped = len(graph_ids) - len(mapping)
    if dropped:
        logger.info("Removed %d graph nodes absent from the dataset", dropped)
    return GraphAlignment(mapping=mapping, graph=graph.subgraph(mapping))
