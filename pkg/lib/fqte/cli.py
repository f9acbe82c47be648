"""Command-line entry point: ``fqte estimate | simulate | generate``.

Usage:
    fqte estimate --validation v.csv --auxiliary a.csv --y-col y --t-col t \\
        --x-cols x1 --s-cols s1,s2,s3 --p 0.5 --p-cal 0.25,0.5,0.75 --out result.json
    fqte simulate --sizes 2000:500,2000:1000,5000:1000 --p 0.5 --reps 2000 --workers 8 \\
        --out reports/table1 --format html
    fqte generate --size 2000:500 --seed 7 --out-validation v.csv --out-auxiliary a.csv

Exit codes: 0 success, 1 estimation or data error, 2 configuration or usage
error. Errors are written to stderr as a JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import polars as pl
from dotenv import load_dotenv

from lib.data.fused import ColumnSchema, QuantileSpec, load_fused_dataset, write_fused_dataset
from lib.fqte import __version__
from lib.fqte.errors import ConfigError, FqteError
from lib.fqte.log import configure_logging, get_logger
from lib.fqte.pipeline import estimate
from lib.fqte.settings import FqteSettings, load_settings
from lib.fqte.sim import DgpConfig, McReport, generate, run_monte_carlo, scenario

log = get_logger(__name__)

DEFAULT_SCHEMA = {"y": "y", "t": "t", "x": "x1", "s": "s1,s2,s3"}


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------


def _floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def parse_sizes(text: str) -> list[tuple[int, int]]:
    """``"2000:500,5000:1000"`` -> ``[(2000, 500), (5000, 1000)]`` as (N, n) pairs."""
    sizes = []
    for item in text.split(","):
        try:
            total, validation = (int(v) for v in item.strip().split(":"))
        except ValueError:
            raise ConfigError(f"sizes must look like N:n, got {item!r}") from None
        sizes.append((total, validation))
    return sizes


def parse_delta_grid(text: str) -> list[float | tuple[float, ...]]:
    """``;``-separated entries, each a scalar or a comma-separated vector."""
    grid: list[float | tuple[float, ...]] = []
    for entry in text.split(";"):
        if not entry.strip():
            continue
        values = _floats(entry, "--delta-grid")
        grid.append(values[0] if len(values) == 1 and "," not in entry else values)
    if not grid:
        raise ConfigError("--delta-grid is empty")
    return grid


def _quantile_specs(p: float, p_cal: Sequence[str] | None) -> list[QuantileSpec]:
    if not p_cal:
        return [QuantileSpec(p=p)]
    return [QuantileSpec(p=p, p_cal=_floats(item, "--p-cal")) for item in p_cal]


def _dump(document: dict[str, Any]) -> str:
    return json.dumps(document, indent=2) + "\n"


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    log.info("wrote %s", out)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_estimate(args: argparse.Namespace, settings: FqteSettings) -> int:
    schema = ColumnSchema.from_strings(args.y_col, args.t_col, args.x_cols, args.s_cols)
    specs = _quantile_specs(args.p, args.p_cal)
    if len(specs) > 1:
        raise ConfigError("estimate takes a single --p-cal set")
    confidence = settings.fusion.confidence if args.level is None else args.level
    if not 0.0 < confidence < 1.0:
        raise ConfigError(f"confidence level out of range: {confidence}")
    grid = parse_delta_grid(args.delta_grid) if args.delta_grid else None

    ds = load_fused_dataset(args.validation, args.auxiliary, schema)
    log.info("loaded n=%d validation rows and N=%d rows in total", ds.n, ds.N)
    run = estimate(
        ds,
        specs[0],
        settings,
        normalize_weights=args.normalize_weights,
        confidence=confidence,
        delta_grid=grid,
    )
    document = run.to_document()
    if args.format == "csv":
        flat = {k: v for k, v in document.items() if not isinstance(v, (list, dict))}
        flat.update({"ci_low": run.result.ci[0], "ci_high": run.result.ci[1]})
        _emit(pl.DataFrame([flat]).write_csv(), args.out)
    else:
        _emit(_dump(document), args.out)
    return 0


def _write_report(report: McReport, out: Path | None, fmt: str) -> None:
    if out is None:
        if fmt == "csv":
            sys.stdout.write(report.table.write_csv(float_precision=6))
        else:
            sys.stdout.write(_dump(report.to_document()))
        return
    report.write_csv(out.with_suffix(".csv"))
    report.write_json(out.with_suffix(".json"))
    log.info("wrote %s and %s", out.with_suffix(".csv"), out.with_suffix(".json"))
    if fmt == "html":
        from lib.great_tables import write_mc_report_html

        write_mc_report_html(report, out.with_suffix(".html"))
        log.info("wrote %s", out.with_suffix(".html"))


def cmd_simulate(args: argparse.Namespace, settings: FqteSettings) -> int:
    if args.normalize_weights is not None:
        settings = load_settings(args.config, {"weights": {"normalize": args.normalize_weights}})
    specs = _quantile_specs(args.p, args.p_cal)
    scenarios = [scenario(name.strip()) for name in args.scenarios.split(",") if name.strip()]
    replications = settings.simulation.replications if args.reps is None else args.reps
    seed = settings.simulation.seed if args.seed is None else args.seed
    log.info("seed %d, %d replications, %d worker(s)", seed, replications, args.workers)

    reports = []
    for total, validation in parse_sizes(args.sizes):
        config = DgpConfig.from_settings(validation, total, settings.simulation, seed=seed)
        reports.append(
            run_monte_carlo(
                config,
                scenarios,
                specs,
                replications,
                args.workers,
                settings=settings,
                truth=args.truth,
                progress=not args.quiet and sys.stderr.isatty(),
            )
        )
    _write_report(McReport.concat(reports), args.out, args.format)
    return 0


def cmd_generate(args: argparse.Namespace, settings: FqteSettings) -> int:
    (total, validation), *rest = parse_sizes(args.size)
    if rest:
        raise ConfigError("generate takes a single --size")
    seed = settings.simulation.seed if args.seed is None else args.seed
    config = DgpConfig.from_settings(validation, total, settings.simulation, seed=seed)
    schema = ColumnSchema.from_strings(**DEFAULT_SCHEMA)
    write_fused_dataset(generate(config).dataset, args.out_validation, args.out_auxiliary, schema)
    log.info("wrote %s and %s (seed %d)", args.out_validation, args.out_auxiliary, seed)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML settings merged over the defaults.")
    parser.add_argument(
        "--log-level",
        default=os.environ.get("FQTE_LOG_LEVEL", "INFO"),
        help="Logging level (default: $FQTE_LOG_LEVEL or INFO).",
    )
    parser.add_argument("--quiet", action="store_true", help="Only log warnings; no progress bar.")
    parser.add_argument("--seed", type=int, default=None, help="Base seed (default: simulation.seed).")


def _add_quantiles(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--p", type=float, default=0.5, help="Target quantile level (default: 0.5).")
    parser.add_argument(
        "--p-cal",
        action="append",
        default=None,
        help="Comma-separated calibration levels; defaults to --p. Repeat for several calibration sets.",
    )
    parser.add_argument(
        "--normalize-weights",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Hajek-normalize inverse probability weights (default: weights.normalize).",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fqte", description="Fused quantile treatment effect estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="Estimate the fused QTE from two CSV files.")
    _add_common(est)
    _add_quantiles(est)
    est.add_argument("--validation", type=Path, required=True, help="CSV with y, t, x and s columns.")
    est.add_argument("--auxiliary", type=Path, required=True, help="CSV with y, t and x columns only.")
    est.add_argument("--y-col", default=DEFAULT_SCHEMA["y"])
    est.add_argument("--t-col", default=DEFAULT_SCHEMA["t"])
    est.add_argument("--x-cols", default=DEFAULT_SCHEMA["x"], help="Comma-separated X columns.")
    est.add_argument("--s-cols", default=DEFAULT_SCHEMA["s"], help="Comma-separated S columns.")
    est.add_argument("--level", type=float, default=None, help="Confidence level (default: fusion.confidence).")
    est.add_argument("--delta-grid", default=None, help="Sensitivity grid: ';'-separated scalars or vectors.")
    est.add_argument("--out", type=Path, default=None, help="Output file (default: stdout).")
    est.add_argument("--format", choices=["json", "csv"], default="json")
    est.set_defaults(handler=cmd_estimate)

    simulate = sub.add_parser("simulate", help="Run the Monte Carlo study.")
    _add_common(simulate)
    _add_quantiles(simulate)
    simulate.add_argument("--sizes", default="2000:500", help="Comma-separated N:n designs (default: 2000:500).")
    simulate.add_argument("--scenarios", default="dr11,dr10,dr01,dr00")
    simulate.add_argument("--reps", type=int, default=None, help="Replications (default: simulation.replications).")
    simulate.add_argument(
        "--workers",
        type=int,
        default=int(os.environ.get("FQTE_WORKERS", "1")),
        help="Parallel workers (default: $FQTE_WORKERS or 1).",
    )
    simulate.add_argument("--truth", type=float, default=None, help="Override the oracle QTE.")
    simulate.add_argument("--out", type=Path, default=None, help="Output path stem; writes .csv and .json.")
    simulate.add_argument("--format", choices=["json", "csv", "html"], default="json")
    simulate.set_defaults(handler=cmd_simulate)

    gen = sub.add_parser("generate", help="Write one simulated dataset as two CSV files.")
    _add_common(gen)
    gen.add_argument("--size", default="2000:500", help="N:n (default: 2000:500).")
    gen.add_argument("--out-validation", type=Path, required=True)
    gen.add_argument("--out-auxiliary", type=Path, required=True)
    gen.set_defaults(handler=cmd_generate)
    return parser


def _report_error(exc: Exception, context: dict[str, Any] | None = None) -> None:
    document = exc.to_dict() if isinstance(exc, FqteError) else {"error": type(exc).__name__, "message": str(exc)}
    if context:
        document.update(context)
    sys.stderr.write(json.dumps(document, default=str) + "\n")


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging("WARNING" if args.quiet else args.log_level)
    try:
        settings = load_settings(args.config)
        log.info("fqte %s: %s", __version__, " ".join(sys.argv[1:] if argv is None else argv))
        log.info("resolved arguments %s", json.dumps({k: v for k, v in vars(args).items() if k != "handler"},
                                                     default=str, sort_keys=True))
        log.info("resolved settings %s", json.dumps(settings.to_dict(), sort_keys=True))
        return args.handler(args, settings)
    except ConfigError as exc:
        _report_error(exc)
        return 2
    except FqteError as exc:
        _report_error(exc)
        return 1
    except FileNotFoundError as exc:
        _report_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
