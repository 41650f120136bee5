"""
Command-line driver: `spatial-dr sweep | estimate | simulate`.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. stdout carries only a short human summary; every machine-readable
result goes to files in the output directory. Logs go to stderr.

Settings come from `--config` (one JSON document) with flags applied on top.
"""

import argparse
import asyncio
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import pandas as pd

from . import __version__
from .config import (
    BasisFamily,
    MarginalDensity,
    MoranMethod,
    RunConfig,
    config_hash,
    load_run_config,
    result_fields,
)
from .data_model import ColumnSpec
from .errors import EXIT_OK, ConfigurationError, SpatialDrError, exit_code_for
from .output import atomic_write_frame, atomic_write_json, result_document
from .pipeline import (
    EstimateReport,
    Inputs,
    SweepReports,
    estimate_pipeline,
    sweep_pipeline,
)
from .spectral_basis import BasisMatrix, basis_frame
from .synthetic import GENERATOR_NAME, DgpSpec, write_simulation

logger = logging.getLogger("spatial_dr")

RESULTS_FILE = "results.json"
SWEEP_FILE = "sweep.csv"
COEFFICIENTS_FILE = "coefficients.csv"
BASIS_FILE = "basis.csv"
DEFAULT_SPATIAL_RANK = 20

_RNG_METADATA = {
    "folds": "sklearn.model_selection.KFold (numpy.random.MT19937)",
    "permutations": "numpy.random.PCG64",
}


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in _csv_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_logging_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    group.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--data", dest="data_path", type=Path, help="unit-level CSV")
    parser.add_argument(
        "--edges", dest="edge_list_path", type=Path, help="src,dst edge list CSV or .mtx"
    )
    parser.add_argument("--outcome", dest="outcome_col")
    parser.add_argument(
        "--treatments", dest="treatment_cols", type=_csv_list, help="comma-separated"
    )
    parser.add_argument(
        "--confounders", dest="confounder_cols", type=_csv_list, help="comma-separated"
    )
    parser.add_argument("--id-col", dest="id_col")
    parser.add_argument("--rho", type=float, help="ICAR precision parameter")
    parser.add_argument("--folds", type=int, help="cross-fitting folds")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--cv-folds", dest="cv_folds", type=int, help="inner CV folds")
    parser.add_argument("--n-lambdas", dest="cv_n_lambdas", type=int)
    parser.add_argument("--lambda-min-ratio", dest="cv_lambda_min_ratio", type=float)
    parser.add_argument("--alpha", type=float, help="Moran test level")
    parser.add_argument(
        "--moran-method", choices=[m.value for m in MoranMethod], dest="moran_method"
    )
    parser.add_argument("--permutations", dest="moran_permutations", type=int)
    parser.add_argument("--threads", type=int, help="worker cap")
    parser.add_argument("--output-dir", dest="output_dir", type=Path)
    _add_logging_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-dr",
        description="Spatially deconfounded doubly robust effect estimation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sweep = commands.add_parser("sweep", help="basis dimension sweep")
    _add_run_flags(sweep)
    sweep.add_argument("--k-grid", dest="k_grid", type=_int_list, help="e.g. 50,100,150")
    sweep.add_argument(
        "--families",
        dest="sweep_families",
        type=_csv_list,
        help=f"comma-separated subset of {','.join(f.value for f in BasisFamily)}",
    )

    estimate = commands.add_parser("estimate", help="doubly robust estimation")
    _add_run_flags(estimate)
    estimate.add_argument("--family", choices=[f.value for f in BasisFamily])
    estimate.add_argument("--k", type=int, help="basis dimension")
    estimate.add_argument(
        "--marginal-density",
        dest="marginal_density",
        choices=[m.value for m in MarginalDensity],
    )
    estimate.add_argument(
        "--truncation",
        nargs=2,
        type=float,
        metavar=("LOW", "HIGH"),
        help="clip weights to these percentiles",
    )
    estimate.add_argument(
        "--no-basis-in-gps",
        dest="basis_in_gps",
        action="store_const",
        const=False,
        default=None,
    )
    estimate.add_argument(
        "--no-basis-in-outcome",
        dest="basis_in_outcome",
        action="store_const",
        const=False,
        default=None,
    )
    estimate.add_argument(
        "--write-basis", action="store_true", help=f"also write {BASIS_FILE}"
    )

    simulate = commands.add_parser("simulate", help="write a synthetic lattice dataset")
    simulate.add_argument("--grid-side", type=int, default=30)
    simulate.add_argument("--tau", type=float, default=1.0)
    simulate.add_argument("--confounders", dest="confounder_count", type=int, default=3)
    simulate.add_argument(
        "--spatial-rank",
        type=int,
        help=f"rank of the spatial confounder (default {DEFAULT_SPATIAL_RANK}, at most m²-2)",
    )
    simulate.add_argument("--delta", dest="confounding_strength", type=float, default=5.0)
    simulate.add_argument("--noise-sd-treatment", type=float, default=1.0)
    simulate.add_argument("--noise-sd-outcome", type=float, default=1.0)
    simulate.add_argument("--placebos", dest="placebo_treatments", type=int, default=0)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--output-dir", type=Path, default=Path("simulation"))
    _add_logging_flags(simulate)
    return parser


_NON_CONFIG_FLAGS = {"command", "config", "verbose", "quiet", "write_basis"}
_REQUIRED_FLAGS = {
    "data_path": "--data",
    "edge_list_path": "--edges",
    "outcome_col": "--outcome",
    "treatment_cols": "--treatments",
    "id_col": "--id-col",
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """RunConfig from `--config` plus flags, or from flags alone.

    Raises:
        ConfigurationError: If required settings are missing or invalid
    """
    overrides: dict[str, Any] = {
        k: v for k, v in vars(args).items() if k not in _NON_CONFIG_FLAGS and v is not None
    }
    if "truncation" in overrides:
        overrides["truncation"] = tuple(overrides["truncation"])
    if args.config is not None:
        return load_run_config(args.config, **overrides)

    missing = [flag for key, flag in _REQUIRED_FLAGS.items() if key not in overrides]
    if missing:
        raise ConfigurationError(
            "missing required settings (give --config or these flags)",
            missing,
            operation="cli",
        )
    columns = ColumnSpec(
        outcome_col=overrides.pop("outcome_col"),
        treatment_cols=overrides.pop("treatment_cols"),
        confounder_cols=overrides.pop("confounder_cols", ()),
        id_col=overrides.pop("id_col"),
    )
    base = RunConfig(
        data_path=overrides.pop("data_path"),
        edge_list_path=overrides.pop("edge_list_path"),
        columns=columns,
    )
    return base.with_overrides(**overrides)


def _metadata(config: RunConfig, inputs: Inputs, **extra: Any) -> dict[str, Any]:
    return {
        "software": "spatial-dr",
        "version": __version__,
        "seed": config.estimation.seed,
        "config_hash": config_hash(config),
        "config": result_fields(config),
        "rng": _RNG_METADATA,
        "n_units": inputs.dataset.n,
        "dropped_rows": inputs.dataset.dropped_rows,
        "edges": inputs.graph.edge_count,
        **extra,
    }


async def _resolve_estimate(config: RunConfig) -> tuple[Inputs, BasisMatrix, EstimateReport]:
    pipeline = estimate_pipeline(config)
    pipeline.validate()
    report = await pipeline.resolve(EstimateReport)
    return await pipeline.resolve(Inputs), await pipeline.resolve(BasisMatrix), report


async def _resolve_sweep(config: RunConfig) -> tuple[Inputs, SweepReports]:
    pipeline = sweep_pipeline(config)
    pipeline.validate()
    reports = await pipeline.resolve(SweepReports)
    return await pipeline.resolve(Inputs), reports


def cmd_estimate(config: RunConfig, write_basis: bool = False) -> Path:
    """Estimate every treatment; write results.json and the per-treatment CSVs."""
    inputs, basis, report = asyncio.run(_resolve_estimate(config))
    out = config.output_dir
    unit_ids = inputs.dataset.unit_ids

    coefficient_frames = []
    for result in report.results:
        name = result.treatment_name
        if result.balance is not None:
            atomic_write_frame(result.balance, out / f"balance_{name}.csv")
        atomic_write_frame(result.influence_frame(unit_ids), out / f"influence_{name}.csv")
        if result.coefficients is not None:
            coefficient_frames.append(result.coefficients.assign(treatment=name))
    if coefficient_frames:
        coefficients = pd.concat(coefficient_frames, ignore_index=True)
        atomic_write_frame(
            coefficients[["treatment", "term", "coefficient"]], out / COEFFICIENTS_FILE
        )
    if write_basis:
        atomic_write_frame(basis_frame(basis, unit_ids), out / BASIS_FILE)

    document = result_document(
        [result.to_record() for result in report.results],
        _metadata(config, inputs, family=basis.family.value, K=basis.K),
    )
    path = atomic_write_json(document, out / RESULTS_FILE)

    print(f"{'treatment':<20} {'effect':>12} {'se':>10} {'lower95':>12} {'upper95':>12} {'moran_p':>8}")
    for result in report.results:
        moran_p = f"{result.moran_p:.3f}" if result.moran_p is not None else "n/a"
        print(
            f"{result.treatment_name:<20} {result.tau_hat:>12.5g} {result.se:>10.4g} "
            f"{result.ci_low:>12.5g} {result.ci_high:>12.5g} {moran_p:>8}"
        )
    print(f"results: {path}")
    return path


def cmd_sweep(config: RunConfig) -> Path:
    """Sweep K for each family; write sweep.csv and print the selected K."""
    _, sweeps = asyncio.run(_resolve_sweep(config))
    frame = pd.concat([report.to_frame() for report in sweeps.reports], ignore_index=True)
    path = atomic_write_frame(frame, config.output_dir / SWEEP_FILE)
    for report in sweeps.reports:
        note = " (no K passed; largest K reported)" if report.no_pass else ""
        print(f"{report.family.value}: selected K = {report.selected_K}{note}")
    print(f"sweep: {path}")
    return path


def cmd_simulate(spec: DgpSpec, output_dir: Path) -> dict[str, Path]:
    paths = write_simulation(spec, output_dir)
    print(
        f"simulated {spec.n} units on a {spec.grid_side}x{spec.grid_side} lattice "
        f"(tau={spec.tau}, seed={spec.seed}, generator={GENERATOR_NAME})"
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    return paths


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    configure_logging(args.verbose, args.quiet)

    try:
        if args.command == "simulate":
            spec = DgpSpec(
                grid_side=args.grid_side,
                tau=args.tau,
                confounder_count=args.confounder_count,
                spatial_rank=(
                    args.spatial_rank
                    if args.spatial_rank is not None
                    else min(DEFAULT_SPATIAL_RANK, args.grid_side**2 - 2)
                ),
                confounding_strength=args.confounding_strength,
                noise_sd_treatment=args.noise_sd_treatment,
                noise_sd_outcome=args.noise_sd_outcome,
                seed=args.seed,
                placebo_treatments=args.placebo_treatments,
            )
            cmd_simulate(spec, args.output_dir)
        elif args.command == "sweep":
            cmd_sweep(config_from_args(args))
        else:
            cmd_estimate(config_from_args(args), write_basis=args.write_basis)
    except SpatialDrError as exc:
        logger.error(exc.summary())
        for detail in exc.errors:
            logger.error("  %s", detail)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
