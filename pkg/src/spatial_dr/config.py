"""
Run configuration for spatial_dr.

This module provides the frozen configuration dataclasses shared by the
estimation modules and the command-line driver, JSON config loading, flag
overrides and the config hash embedded in result metadata.

Precedence is flags > config file > defaults.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

from .data_model import ColumnSpec
from .errors import ConfigurationError, ParameterError

logger = logging.getLogger(__name__)


class BasisFamily(StrEnum):
    """Spectral basis family."""

    MEM = "MEM"
    ICAR = "ICAR"


class MarginalDensity(StrEnum):
    """Estimator of the marginal treatment density f(A)."""

    NORMAL = "normal"
    KDE = "kde"


class MoranMethod(StrEnum):
    ANALYTIC = "analytic"
    PERMUTATION = "permutation"


def _parse_enum(enum_type: type[StrEnum], value: Any, name: str) -> Any:
    if isinstance(value, enum_type):
        return value
    for member in enum_type:
        if str(value).lower() == member.value.lower():
            return member
    choices = ", ".join(m.value for m in enum_type)
    raise ConfigurationError(
        f"invalid {name} {value!r}", [f"expected one of: {choices}"], operation="config"
    )


@dataclass(frozen=True)
class CvConfig:
    """Inner cross-validation and solver settings for every Lasso fit."""

    folds: int = 5
    n_lambdas: int = 100
    lambda_min_ratio: float = 1e-4
    tol: float = 1e-7
    max_sweeps: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.folds < 2:
            errors.append(f"folds must be >= 2, got {self.folds}")
        if self.n_lambdas < 1:
            errors.append(f"n_lambdas must be >= 1, got {self.n_lambdas}")
        if not 0.0 < self.lambda_min_ratio < 1.0:
            errors.append(
                f"lambda_min_ratio must lie in (0, 1), got {self.lambda_min_ratio}"
            )
        if self.tol <= 0.0:
            errors.append(f"tol must be positive, got {self.tol}")
        if self.max_sweeps < 1:
            errors.append(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if errors:
            raise ParameterError("invalid CV settings", errors, operation="CvConfig")

    def with_seed(self, seed: int) -> "CvConfig":
        return dataclasses.replace(self, seed=seed)


@dataclass(frozen=True)
class EstimationConfig:
    """Settings of one doubly robust estimation run."""

    folds: int = 10
    seed: int = 0
    cv: CvConfig = field(default_factory=CvConfig)
    marginal_density: MarginalDensity = MarginalDensity.NORMAL
    truncation: tuple[float, float] | None = None
    alpha: float = 0.05
    ci_quantile: float = 1.96
    moran_method: MoranMethod = MoranMethod.ANALYTIC
    moran_permutations: int = 999
    basis_in_gps: bool = True
    basis_in_outcome: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "marginal_density",
            _parse_enum(MarginalDensity, self.marginal_density, "marginal density"),
        )
        object.__setattr__(
            self, "moran_method", _parse_enum(MoranMethod, self.moran_method, "moran method")
        )
        if self.truncation is not None:
            object.__setattr__(
                self, "truncation", tuple(float(p) for p in self.truncation)
            )

        errors = []
        if self.folds < 2:
            errors.append(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.alpha < 1.0:
            errors.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.ci_quantile <= 0.0:
            errors.append(f"ci_quantile must be positive, got {self.ci_quantile}")
        if self.moran_permutations < 1:
            errors.append(
                f"moran_permutations must be >= 1, got {self.moran_permutations}"
            )
        if self.truncation is not None:
            if len(self.truncation) != 2:
                errors.append("truncation needs exactly two percentiles")
            else:
                low, high = self.truncation
                if not 0.0 <= low < high <= 100.0:
                    errors.append(
                        f"truncation percentiles must satisfy 0 <= low < high <= 100, "
                        f"got ({low}, {high})"
                    )
        if errors:
            raise ParameterError(
                "invalid estimation settings", errors, operation="EstimationConfig"
            )


def _default_k_grid() -> tuple[int, ...]:
    return tuple(range(50, 501, 50))


@dataclass(frozen=True)
class RunConfig:
    """Everything a `sweep` or `estimate` run needs.

    `edge_list_path` may point to a `src,dst` CSV or to a Matrix Market file
    (`.mtx`); a Matrix Market graph's node k is the data file's unit k.
    """

    data_path: Path
    edge_list_path: Path
    columns: ColumnSpec
    family: BasisFamily = BasisFamily.ICAR
    k: int = 350
    k_grid: tuple[int, ...] = field(default_factory=_default_k_grid)
    sweep_families: tuple[BasisFamily, ...] = (BasisFamily.ICAR,)
    rho: float = 1.0
    threads: int = 1
    output_dir: Path = Path("results")
    estimation: EstimationConfig = field(default_factory=EstimationConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "data_path", Path(self.data_path))
        object.__setattr__(self, "edge_list_path", Path(self.edge_list_path))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        object.__setattr__(self, "family", _parse_enum(BasisFamily, self.family, "family"))
        object.__setattr__(
            self,
            "sweep_families",
            tuple(_parse_enum(BasisFamily, f, "family") for f in self.sweep_families),
        )
        object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))

        errors = []
        if self.k < 1:
            errors.append(f"k must be >= 1, got {self.k}")
        if not self.k_grid:
            errors.append("k_grid must not be empty")
        elif any(k < 1 for k in self.k_grid):
            errors.append("k_grid values must be >= 1")
        elif any(b <= a for a, b in zip(self.k_grid, self.k_grid[1:], strict=False)):
            errors.append(f"k_grid must be strictly ascending, got {list(self.k_grid)}")
        if not self.sweep_families:
            errors.append("sweep_families must not be empty")
        if not 0.0 <= self.rho <= 1.0:
            errors.append(f"rho must lie in [0, 1], got {self.rho}")
        if self.threads < 1:
            errors.append(f"threads must be >= 1, got {self.threads}")
        if errors:
            raise ParameterError("invalid run settings", errors, operation="RunConfig")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a copy with flag values applied on top.

        Keys may name a field of RunConfig, EstimationConfig or CvConfig, or
        one of the ColumnSpec fields; None values are ignored so unset flags
        never clobber file values.

        Raises:
            ConfigurationError: If a key names no known field
        """
        overrides = {k: v for k, v in overrides.items() if v is not None}
        run_fields = {f.name for f in dataclasses.fields(RunConfig)}
        est_fields = {f.name for f in dataclasses.fields(EstimationConfig)}
        cv_fields = {f"cv_{f.name}" for f in dataclasses.fields(CvConfig)}
        col_fields = {f.name for f in dataclasses.fields(ColumnSpec)}

        unknown = sorted(
            set(overrides) - run_fields - est_fields - cv_fields - col_fields
        )
        if unknown:
            raise ConfigurationError(
                "unknown override keys", unknown, operation="with_overrides"
            )

        cv = dataclasses.replace(
            self.estimation.cv,
            **{k[3:]: v for k, v in overrides.items() if k in cv_fields},
        )
        estimation = dataclasses.replace(
            self.estimation,
            cv=cv,
            **{k: v for k, v in overrides.items() if k in est_fields and k != "cv"},
        )
        columns = dataclasses.replace(
            self.columns, **{k: v for k, v in overrides.items() if k in col_fields}
        )
        top = {
            k: v
            for k, v in overrides.items()
            if k in run_fields and k not in ("estimation", "columns")
        }
        return dataclasses.replace(
            self, columns=columns, estimation=estimation, **top
        )

    def to_dict(self) -> dict[str, Any]:
        """Plain-JSON view of the configuration."""
        return _plain(dataclasses.asdict(self))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(v) for v in value]
    if isinstance(value, Path | StrEnum):
        return str(value)
    return value


# Fields with no effect on any estimate.
_UNHASHED_FIELDS = ("output_dir", "threads")


def result_fields(config: RunConfig) -> dict[str, Any]:
    """The configuration minus fields that cannot change any estimate."""
    payload = config.to_dict()
    for name in _UNHASHED_FIELDS:
        payload.pop(name, None)
    return payload


def config_hash(config: RunConfig) -> str:
    """SHA-256 over the canonical JSON of the result-determining fields."""
    canonical = json.dumps(result_fields(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(raw: dict[str, Any], key: str, errors: list[str]) -> dict[str, Any]:
    value = raw.pop(key, {})
    if not isinstance(value, dict):
        errors.append(f"{key!r} must be an object")
        return {}
    return value


def _build(cls: type[Any], values: dict[str, Any], where: str) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in {where}", unknown, operation="load_run_config"
        )
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(
            f"malformed {where}: {exc}", operation="load_run_config"
        ) from exc


def load_run_config(path: str | Path, **overrides: Any) -> RunConfig:
    """Read a RunConfig from one JSON document, then apply overrides.

    The document holds RunConfig fields at top level, with `columns`,
    `estimation` and `estimation.cv` as nested objects.

    Raises:
        ConfigurationError: If the file is missing, not JSON, or malformed
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(
            f"config file not found: {path}", operation="load_run_config"
        )
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"config file {path} is not valid JSON: {exc}", operation="load_run_config"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(
            "config document must be a JSON object", operation="load_run_config"
        )

    errors: list[str] = []
    columns_raw = _section(raw, "columns", errors)
    estimation_raw = _section(raw, "estimation", errors)
    cv_raw = _section(estimation_raw, "cv", errors)
    if errors:
        raise ConfigurationError(
            "malformed config document", errors, operation="load_run_config"
        )

    # Flags may supply what the file leaves out.
    for key in ("data_path", "edge_list_path"):
        if key in overrides and overrides[key] is not None:
            raw[key] = overrides.pop(key)
    col_names = {f.name for f in dataclasses.fields(ColumnSpec)}
    for key in col_names:
        if key in overrides and overrides[key] is not None:
            columns_raw[key] = overrides.pop(key)

    missing = [k for k in ("data_path", "edge_list_path") if k not in raw]
    missing += [f"columns.{k}" for k in sorted(col_names) if k not in columns_raw]
    if missing:
        raise ConfigurationError(
            "config is missing required fields", missing, operation="load_run_config"
        )

    if "truncation" in estimation_raw and estimation_raw["truncation"] is not None:
        estimation_raw["truncation"] = tuple(estimation_raw["truncation"])
    for key in ("k_grid", "sweep_families"):
        if key in raw:
            raw[key] = tuple(raw[key])

    cv = _build(CvConfig, cv_raw, "estimation.cv")
    estimation = _build(EstimationConfig, {**estimation_raw, "cv": cv}, "estimation")
    columns = _build(ColumnSpec, columns_raw, "columns")
    config = _build(
        RunConfig, {**raw, "columns": columns, "estimation": estimation}, "config"
    )
    logger.debug("Loaded run config from %s", path)
    return config.with_overrides(**overrides)
