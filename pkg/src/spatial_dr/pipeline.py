"""
Stage wiring for the command-line runs.

This module provides a small dependency-injected pipeline: a Stage is a
builder function registered under its return annotation, and its parameter
annotations name the artifacts it depends on. A Pipeline validates the stage
graph up front (missing producers, cycles) and resolves artifacts lazily,
building each one once. Sync builders run in worker threads.

It also provides the run stages themselves (`load_inputs`, `build_run_basis`,
`estimate_treatments`, `sweep_families`) and `run_bounded`, which runs
independent jobs under a worker cap and returns results in submission order.
"""

import asyncio
import inspect
import logging
from collections.abc import Awaitable, Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

from .config import RunConfig
from .data_model import Dataset, align_graph, load_dataset
from .diagnostics import SweepReport, basis_sweep
from .dr_estimator import DrResult, run_treatment
from .errors import DataError, PipelineValidationError
from .graph import (
    AdjacencyGraph,
    PrecisionSpec,
    from_edge_list,
    load_edge_list,
    load_matrix_market,
)
from .spectral_basis import BasisMatrix, build_basis

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class Stage:
    """A builder registered under the type it returns."""

    builder: Callable[..., Any]
    output: type[Any]
    dependencies: list[type[Any]]

    @classmethod
    def of(cls, builder: Callable[..., Any]) -> "Stage":
        """Read output and dependency types from the builder's annotations.

        Raises:
            PipelineValidationError: If the return or a parameter is unannotated
        """
        sig = inspect.signature(builder)
        name = getattr(builder, "__name__", repr(builder))
        if sig.return_annotation is inspect.Signature.empty:
            raise PipelineValidationError(
                f"Stage {name} must have a return type annotation", operation="Stage.of"
            )
        dependencies = []
        for param_name, param in sig.parameters.items():
            if param.annotation is inspect.Signature.empty:
                raise PipelineValidationError(
                    f"Parameter {param_name} in {name} must have a type annotation",
                    operation="Stage.of",
                )
            dependencies.append(param.annotation)
        return cls(builder=builder, output=sig.return_annotation, dependencies=dependencies)


def _type_name(type_: Any) -> str:
    return getattr(type_, "__name__", str(type_))


class Pipeline:
    """Lazily built artifacts keyed by type."""

    def __init__(
        self,
        *stages: Callable[..., Any] | Stage,
        values: Mapping[type[Any], Any] | None = None,
    ) -> None:
        self._stages: dict[type[Any], Stage] = {}
        for stage in stages:
            registered = stage if isinstance(stage, Stage) else Stage.of(stage)
            self._stages[registered.output] = registered
        self._values: dict[type[Any], Any] = dict(values or {})
        self._instances: dict[type[Any], Any] = {}
        self._locks: dict[type[Any], asyncio.Lock] = {}

    @property
    def stages(self) -> dict[type[Any], Stage]:
        return dict(self._stages)

    def validate(self) -> None:
        """Check that every dependency has a producer and none is circular.

        Raises:
            PipelineValidationError: Listing every problem found
        """
        errors = []
        for output, stage in self._stages.items():
            for dep in stage.dependencies:
                if dep not in self._stages and dep not in self._values:
                    errors.append(
                        f"Stage {_type_name(output)} depends on {_type_name(dep)}, "
                        f"but no stage or value provides {_type_name(dep)}"
                    )
        errors.extend(self._circular_errors())
        if errors:
            raise PipelineValidationError(
                f"Validation failed with {len(errors)} error(s):",
                errors,
                operation="Pipeline.validate",
            )

    def _circular_errors(self) -> list[str]:
        errors = []
        for output in self._stages:
            if self._reaches_itself(output, set()):
                errors.append(f"Circular dependency detected involving {_type_name(output)}")
        return errors

    def _reaches_itself(self, current: type[Any], stack: set[type[Any]]) -> bool:
        if current in stack:
            return True
        stage = self._stages.get(current)
        if stage is None:
            return False
        stack.add(current)
        found = any(self._reaches_itself(dep, stack) for dep in stage.dependencies)
        stack.discard(current)
        return found

    async def resolve(self, type_: type[T]) -> T:
        """Build (or fetch) the artifact of the given type."""
        if type_ in self._values:
            return self._values[type_]  # type: ignore[no-any-return]
        if type_ in self._instances:
            return self._instances[type_]  # type: ignore[no-any-return]
        if type_ not in self._stages:
            raise PipelineValidationError(
                f"No stage registered for type {_type_name(type_)}",
                operation="Pipeline.resolve",
            )
        lock = self._locks.setdefault(type_, asyncio.Lock())
        async with lock:
            if type_ not in self._instances:
                self._instances[type_] = await self._build(self._stages[type_])
        return self._instances[type_]  # type: ignore[no-any-return]

    async def _build(self, stage: Stage) -> Any:
        arguments = [await self.resolve(dep) for dep in stage.dependencies]
        logger.debug("Building %s", _type_name(stage.output))
        if inspect.iscoroutinefunction(stage.builder):
            return await stage.builder(*arguments)
        return await asyncio.to_thread(stage.builder, *arguments)


async def run_bounded(jobs: Sequence[Callable[[], T]], threads: int = 1) -> list[T]:
    """Run jobs in worker threads, at most `threads` at a time.

    Results come back in submission order whatever the completion order.
    """
    semaphore = asyncio.Semaphore(max(1, threads))

    async def bounded(job: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(job)

    tasks: list[Awaitable[T]] = [bounded(job) for job in jobs]
    return list(await asyncio.gather(*tasks))


@dataclass(frozen=True, eq=False)
class Inputs:
    """The dataset and its graph, aligned row for row."""

    dataset: Dataset
    graph: AdjacencyGraph


def load_inputs(config: RunConfig) -> Inputs:
    """Load the data CSV and the graph, and align the graph to the data.

    Raises:
        DataError: If either file is missing or the ids do not match
    """
    dataset = load_dataset(config.data_path, config.columns)
    edge_path = Path(config.edge_list_path)
    if not edge_path.is_file():
        raise DataError(f"edge list not found: {edge_path}", operation="load_inputs")
    if edge_path.suffix.lower() == ".mtx":
        graph = load_matrix_market(edge_path, dataset.unit_ids)
        return Inputs(dataset=dataset, graph=graph)
    # isolated units must be declared in the edge list (a row with an empty dst)
    pairs, ids = load_edge_list(edge_path)
    alignment = align_graph(dataset, from_edge_list(pairs, ids), ids)
    logger.info(
        "Loaded %d units (%d dropped) and %d edges",
        dataset.n,
        dataset.dropped_rows,
        alignment.graph.edge_count,
    )
    return Inputs(dataset=dataset, graph=alignment.graph)


def build_run_basis(inputs: Inputs, config: RunConfig) -> BasisMatrix:
    """The configured basis family at the configured K."""
    return build_basis(inputs.graph, config.family, config.k, PrecisionSpec(config.rho))


@dataclass(frozen=True, eq=False)
class EstimateReport:
    results: tuple[DrResult, ...]


@dataclass(frozen=True, eq=False)
class SweepReports:
    reports: tuple[SweepReport, ...]


async def estimate_treatments(
    inputs: Inputs, basis: BasisMatrix, config: RunConfig
) -> EstimateReport:
    """One doubly robust analysis per treatment column, in column order."""
    jobs = [
        _bind(run_treatment, inputs.dataset, name, basis, config.estimation, inputs.graph)
        for name in inputs.dataset.treatment_names
    ]
    results = await run_bounded(jobs, config.threads)
    return EstimateReport(results=tuple(results))


async def sweep_families(inputs: Inputs, config: RunConfig) -> SweepReports:
    """Basis sweep per configured family, on the first treatment column."""
    treatment = inputs.dataset.treatment_names[0]
    jobs = [
        _bind(
            basis_sweep,
            inputs.dataset,
            treatment,
            inputs.graph,
            family,
            list(config.k_grid),
            config.estimation,
            PrecisionSpec(config.rho),
        )
        for family in config.sweep_families
    ]
    reports = await run_bounded(jobs, config.threads)
    return SweepReports(reports=tuple(reports))


def _bind(function: Callable[..., T], *args: Any) -> Callable[[], T]:
    def job() -> T:
        return function(*args)

    return job


def estimate_pipeline(config: RunConfig) -> Pipeline:
    return Pipeline(
        load_inputs, build_run_basis, estimate_treatments, values={RunConfig: config}
    )


def sweep_pipeline(config: RunConfig) -> Pipeline:
    return Pipeline(load_inputs, sweep_families, values={RunConfig: config})
