"""Simulation design, specification scenarios and the Monte Carlo engine.

Covariates come from three uniforms on (1 - sqrt 3, 1 + sqrt 3):

    X1 = W1,  S1 = exp(W2 / 2),  S2 = log(W3 + 1),  S3 = sin(3 W1)

Treatment is logistic in (X1, S1, S2, S3); both potential outcomes share the
linear mean and differ in noise scale. The first ``n`` rows keep S and form
the validation sample.

Replication ``r`` draws from ``SeedSequence(entropy=seed, spawn_key=(r,))``,
so its data depends only on ``(seed, r)`` and reports do not depend on the
number of workers.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl
from joblib import Parallel, delayed
from scipy.special import expit
from tqdm import tqdm

from lib.data.fused import FusedDataset, QuantileSpec, Sample
from lib.fqte.calib import compute_calibration
from lib.fqte.drq import EstimatingContext, build_contexts
from lib.fqte.errors import ConfigError, FqteError, MonteCarloError
from lib.fqte.features import feature_map, full_linear
from lib.fqte.log import get_logger
from lib.fqte.pipeline import confounded_contexts, fuse_arms, validation_arms
from lib.fqte.settings import FqteSettings, SimulationSettings, load_settings

log = get_logger(__name__)

_HALF_WIDTH = math.sqrt(3.0)
_ORACLE_CHUNK = 1_000_000
VARIANCE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DgpConfig:
    n: int
    N: int
    seed: int
    ps_coef: tuple[float, ...] = (0.25, -0.25, 0.25, -0.25)
    or_coef: tuple[float, ...] = (0.5, -0.5, 0.5, -0.5)
    sd_treated: float = 2.0
    sd_control: float = 1.0

    def __post_init__(self) -> None:
        if not 1 <= self.n < self.N:
            raise ConfigError(f"need 1 <= n < N, got n={self.n}, N={self.N}")
        if len(self.ps_coef) != 4 or len(self.or_coef) != 4:
            raise ConfigError("ps_coef and or_coef need one coefficient each for X1, S1, S2, S3")
        if self.sd_treated <= 0 or self.sd_control <= 0:
            raise ConfigError("noise standard deviations must be positive")

    @classmethod
    def from_settings(cls, n: int, N: int, settings: SimulationSettings, seed: int | None = None) -> DgpConfig:
        return cls(
            n=n,
            N=N,
            seed=settings.seed if seed is None else seed,
            ps_coef=tuple(settings.ps_coef),
            or_coef=tuple(settings.or_coef),
            sd_treated=settings.sd_treated,
            sd_control=settings.sd_control,
        )


@dataclass(frozen=True)
class SimulatedData:
    """A generated dataset plus the latent potential outcomes of every row."""

    dataset: FusedDataset
    y1: np.ndarray
    y0: np.ndarray


def _rng(seed: int, spawn_key: tuple[int, ...]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key)))


def _covariates(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    w = rng.uniform(1.0 - _HALF_WIDTH, 1.0 + _HALF_WIDTH, size=(size, 3))
    x = w[:, :1]
    s = np.column_stack([np.exp(w[:, 1] / 2.0), np.log(w[:, 2] + 1.0), np.sin(3.0 * w[:, 0])])
    return x, s


def _linear(coef: Sequence[float], x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return coef[0] * x[:, 0] + s @ np.asarray(coef[1:], dtype=float)


def generate(config: DgpConfig, spawn_key: tuple[int, ...] = ()) -> SimulatedData:
    rng = _rng(config.seed, spawn_key)
    x, s = _covariates(rng, config.N)
    t = (rng.uniform(size=config.N) < expit(_linear(config.ps_coef, x, s))).astype(np.int8)
    mean = _linear(config.or_coef, x, s)
    y1 = mean + config.sd_treated * rng.standard_normal(config.N)
    y0 = mean + config.sd_control * rng.standard_normal(config.N)
    y = np.where(t == 1, y1, y0)

    n = config.n
    dataset = FusedDataset(
        validation=Sample(y=y[:n], t=t[:n], x=x[:n], s=s[:n]),
        auxiliary=Sample(y=y[n:], t=t[n:], x=x[n:]),
    )
    return SimulatedData(dataset=dataset, y1=y1, y0=y0)


@lru_cache(maxsize=32)
def _oracle(
    p: float,
    or_coef: tuple[float, ...],
    sd_treated: float,
    sd_control: float,
    draws: int,
    seed: int,
) -> float:
    rng = _rng(seed, ())
    y1 = np.empty(draws)
    y0 = np.empty(draws)
    for start in range(0, draws, _ORACLE_CHUNK):
        size = min(_ORACLE_CHUNK, draws - start)
        x, s = _covariates(rng, size)
        mean = _linear(or_coef, x, s)
        y1[start : start + size] = mean + sd_treated * rng.standard_normal(size)
        y0[start : start + size] = mean + sd_control * rng.standard_normal(size)
    return float(np.quantile(y1, p) - np.quantile(y0, p))


def oracle_qte(
    p: float, settings: SimulationSettings | None = None, *, draws: int | None = None, seed: int | None = None
) -> float:
    """True quantile treatment effect of the simulation design, by large-sample Monte Carlo."""
    settings = settings or load_settings().simulation
    if not 0.0 < p < 1.0:
        raise ConfigError(f"quantile level out of range: {p}", level=p)
    return _oracle(
        float(p),
        tuple(settings.or_coef),
        float(settings.sd_treated),
        float(settings.sd_control),
        int(settings.oracle_draws if draws is None else draws),
        int(settings.oracle_seed if seed is None else seed),
    )


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """Which validation-sample working models are correct: ``dr<PS><OR>``, so dr10 misspecifies the outcome model."""

    name: str
    or_correct: bool
    ps_correct: bool
    misspec_map: str = "distorted"

    def __post_init__(self) -> None:
        expected = f"dr{int(self.ps_correct)}{int(self.or_correct)}"
        if self.name != expected:
            raise ConfigError(f"scenario name {self.name!r} does not match its flags ({expected})")


SCENARIOS: dict[str, ScenarioSpec] = {
    "dr11": ScenarioSpec("dr11", or_correct=True, ps_correct=True),
    "dr10": ScenarioSpec("dr10", or_correct=False, ps_correct=True),
    "dr01": ScenarioSpec("dr01", or_correct=True, ps_correct=False),
    "dr00": ScenarioSpec("dr00", or_correct=False, ps_correct=False),
}


def scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


@dataclass(frozen=True)
class ScenarioContexts:
    validation: dict[int, EstimatingContext]
    confounded: dict[int, EstimatingContext]


def scenario_contexts(
    ds: FusedDataset,
    spec: ScenarioSpec,
    settings: FqteSettings | None = None,
    confounded: dict[int, EstimatingContext] | None = None,
) -> ScenarioContexts:
    """Validation contexts for ``spec`` plus the (scenario-independent) pooled X-only contexts."""
    settings = settings or load_settings()
    intercept = settings.features.intercept
    correct = full_linear(intercept)
    wrong = feature_map(spec.misspec_map, intercept)
    validation = build_contexts(
        ds.validation,
        correct if spec.or_correct else wrong,
        correct if spec.ps_correct else wrong,
        settings,
    )
    return ScenarioContexts(validation=validation, confounded=confounded or confounded_contexts(ds, settings))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

DRAW_SCHEMA = {
    "replication": pl.Int64,
    "scenario": pl.String,
    "method": pl.String,
    "estimate": pl.Float64,
    "se": pl.Float64,
    "ci_low": pl.Float64,
    "ci_high": pl.Float64,
    "sigma_sq": pl.Float64,
    "sigma_v_sq": pl.Float64,
    "regularized": pl.Boolean,
}


@dataclass(frozen=True)
class ReplicationOutcome:
    replication: int
    rows: list[dict[str, Any]] = field(default_factory=list)
    failure: str | None = None


def _replicate(
    config: DgpConfig,
    scenarios: Sequence[ScenarioSpec],
    specs: Sequence[QuantileSpec],
    replication: int,
    settings: FqteSettings,
) -> ReplicationOutcome:
    rows: list[dict[str, Any]] = []
    try:
        ds = generate(config, spawn_key=(replication,)).dataset
        confounded = confounded_contexts(ds, settings)
        calibrations = [compute_calibration(ds, spec, confounded) for spec in specs]
        for sc in scenarios:
            contexts = scenario_contexts(ds, sc, settings, confounded)
            arms = validation_arms(ds, specs[0].p, contexts.validation, settings)
            for k, (spec, calibration) in enumerate(zip(specs, calibrations, strict=True), start=1):
                res = fuse_arms(ds, spec, arms, calibration, settings).result
                if k == 1:
                    rows.append(_row(replication, sc.name, f"{sc.name}_v", res.delta_v, res.se_v, res.ci_v,
                                     res.sigma_v_sq, res.sigma_v_sq, False))
                rows.append(_row(replication, sc.name, f"{sc.name}_c{k}", res.delta_p, res.se, res.ci,
                                 res.sigma_sq, res.sigma_v_sq, res.regularized))
    except (FqteError, np.linalg.LinAlgError) as exc:
        return ReplicationOutcome(replication=replication, failure=f"{type(exc).__name__}: {exc}")
    return ReplicationOutcome(replication=replication, rows=rows)


def _row(
    replication: int,
    scenario_name: str,
    method: str,
    estimate: float,
    se: float,
    ci: tuple[float, float],
    sigma_sq: float,
    sigma_v_sq: float,
    regularized: bool,
) -> dict[str, Any]:
    return {
        "replication": replication,
        "scenario": scenario_name,
        "method": method,
        "estimate": estimate,
        "se": se,
        "ci_low": ci[0],
        "ci_high": ci[1],
        "sigma_sq": sigma_sq,
        "sigma_v_sq": sigma_v_sq,
        "regularized": regularized,
    }


@dataclass(frozen=True)
class McReport:
    """Per-method BIAS / MSE / SE / CR table plus the per-replication draws."""

    table: pl.DataFrame
    draws: pl.DataFrame
    truth: float
    p: float
    seed: int
    replications: int
    failures: int

    def rows(self) -> list[dict[str, Any]]:
        return self.table.to_dicts()

    def row(self, method: str, N: int | None = None, n: int | None = None) -> dict[str, Any]:
        frame = self.table.filter(pl.col("Method") == method)
        if N is not None:
            frame = frame.filter(pl.col("N") == N)
        if n is not None:
            frame = frame.filter(pl.col("n") == n)
        if frame.height != 1:
            raise KeyError(f"expected one report row for {method!r}, found {frame.height}")
        return frame.row(0, named=True)

    def to_document(self) -> dict[str, Any]:
        return {
            "p": self.p,
            "truth": self.truth,
            "seed": self.seed,
            "replications": self.replications,
            "failures": self.failures,
            "rows": self.rows(),
        }

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.write_csv(path, float_precision=6)

    def write_json(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_document(), indent=2) + "\n")

    @classmethod
    def concat(cls, reports: Sequence[McReport]) -> McReport:
        """Stack reports from several designs that share p, truth and seed."""
        if not reports:
            raise MonteCarloError("no reports to combine")
        first = reports[0]
        return cls(
            table=pl.concat([r.table for r in reports]),
            draws=pl.concat([r.draws for r in reports]),
            truth=first.truth,
            p=first.p,
            seed=first.seed,
            replications=first.replications,
            failures=sum(r.failures for r in reports),
        )


def summarize(draws: pl.DataFrame, truth: float) -> pl.DataFrame:
    """Aggregate per-replication draws into one row per method, in first-seen order."""
    error = pl.col("estimate") - truth
    covered = (pl.col("ci_low") <= truth) & (truth <= pl.col("ci_high"))
    return (
        draws.group_by("method", maintain_order=True)
        .agg(
            error.mean().abs().alias("BIAS"),
            (error**2).mean().alias("MSE"),
            pl.col("se").mean().alias("SE"),
            covered.cast(pl.Float64).mean().alias("CR"),
            pl.len().alias("replications"),
            (pl.col("sigma_sq") > pl.col("sigma_v_sq") + VARIANCE_TOLERANCE).sum().alias("variance_violations"),
            pl.col("regularized").sum().alias("regularized"),
        )
        .rename({"method": "Method"})
    )


def run_monte_carlo(
    config: DgpConfig,
    scenarios: Sequence[ScenarioSpec],
    spec: QuantileSpec | Sequence[QuantileSpec],
    replications: int,
    workers: int = 1,
    *,
    settings: FqteSettings | None = None,
    truth: float | None = None,
    progress: bool = False,
) -> McReport:
    """Run ``replications`` independent replications and tabulate every (scenario, method).

    Replications whose working models cannot be fitted are excluded and
    counted; more than ``simulation.max_failure_rate`` of them is an error.
    """
    settings = settings or load_settings()
    specs = [spec] if isinstance(spec, QuantileSpec) else list(spec)
    if replications < 1:
        raise ConfigError(f"replications must be at least 1, got {replications}")
    if not scenarios:
        raise ConfigError("no scenarios requested")
    if not specs or any(s.p != specs[0].p for s in specs):
        raise ConfigError("calibration sets must share the target level p")
    p = specs[0].p
    truth = oracle_qte(p, settings.simulation) if truth is None else truth

    jobs = (delayed(_replicate)(config, scenarios, specs, r, settings) for r in range(replications))
    outcomes = tqdm(
        Parallel(n_jobs=workers, return_as="generator")(jobs),
        total=replications,
        desc=f"N={config.N} n={config.n}",
        disable=not progress,
    )

    rows: list[dict[str, Any]] = []
    failures = 0
    for outcome in outcomes:
        if outcome.failure is not None:
            failures += 1
            log.warning("replication %d excluded: %s", outcome.replication, outcome.failure)
            continue
        rows.extend(outcome.rows)

    if failures / replications > settings.simulation.max_failure_rate:
        raise MonteCarloError(
            f"{failures} of {replications} replications failed",
            failures=failures,
            replications=replications,
        )

    draws = pl.DataFrame(rows, schema=DRAW_SCHEMA) if rows else pl.DataFrame(schema=DRAW_SCHEMA)
    table = summarize(draws, truth).with_columns(
        pl.lit(config.N, dtype=pl.Int64).alias("N"), pl.lit(config.n, dtype=pl.Int64).alias("n")
    )
    table = table.select("N", "n", "Method", "BIAS", "MSE", "SE", "CR", "replications", "variance_violations",
                         "regularized")
    violations = int(table.get_column("variance_violations").sum())
    if violations:
        log.warning("%d fused variances exceed the validation-only variance", violations)
    return McReport(
        table=table,
        draws=draws.with_columns(pl.lit(config.N).alias("N"), pl.lit(config.n).alias("n")),
        truth=truth,
        p=p,
        seed=config.seed,
        replications=replications,
        failures=failures,
    )
