"""Doubly robust quantile estimation for one treatment arm.

For arm ``t`` the estimating function is

    Psi_t(O; q) = w_t * (I(Y <= q) - G_t(q | D)) + G_t(q | D) - p

with ``w_1 = T / e`` and ``w_0 = (1 - T) / (1 - e)``. The same expression
evaluated with X-only working models on the pooled sample is the confounded
estimating function ``phi_t``; an :class:`EstimatingContext` records which of
the two it represents.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import norm

from lib.data.fused import Record, Sample
from lib.fqte.errors import ConfigError, DataValidationError, DensityError, NoRootError, SingularMatrixError
from lib.fqte.features import FeatureMap
from lib.fqte.log import get_logger
from lib.fqte.models import (
    LogisticFit,
    NormalLinearFit,
    conditional_cdf,
    conditional_cdf_grad,
    fit_logistic,
    fit_normal_linear,
    propensity,
    propensity_grad,
)
from lib.fqte.settings import DensitySettings, FqteSettings, load_settings

log = get_logger(__name__)

ContextFamily = Literal["full", "confounded"]
SolveMethod = Literal["crossing", "bisection-fallback"]

# Cells in one (rows x evaluation points) block of normal CDF values.
_BLOCK_CELLS = 2_000_000
_MAX_EXPANSIONS = 60


@dataclass(frozen=True)
class EstimatingContext:
    """Fitted working models for one arm plus the designs they were fitted on."""

    arm: int
    outcome_fit: NormalLinearFit
    ps_fit: LogisticFit
    outcome_map: FeatureMap
    ps_map: FeatureMap
    family: ContextFamily
    normalize_weights: bool = True
    propensity_clip: float = 1e-3

    def __post_init__(self) -> None:
        if self.arm not in (0, 1):
            raise ConfigError(f"arm must be 0 or 1, got {self.arm}")
        if self.outcome_fit.arm != self.arm:
            raise ConfigError(f"outcome fit is for arm {self.outcome_fit.arm}, context is for arm {self.arm}")
        expected = "full" if self.family == "full" else "x_only"
        for fmap in (self.outcome_map, self.ps_map):
            if fmap.family != expected:
                raise ConfigError(f"feature map {fmap.name!r} does not belong to a {self.family} context")


def build_contexts(
    sample: Sample,
    outcome_map: FeatureMap,
    ps_map: FeatureMap,
    settings: FqteSettings | None = None,
    normalize_weights: bool | None = None,
) -> dict[int, EstimatingContext]:
    """Fit the propensity model once and an outcome model per arm on ``sample``.

    Full-feature maps give the validation contexts; X-only maps give the
    confounded contexts on the pooled sample.
    """
    settings = settings or load_settings()
    if outcome_map.family != ps_map.family:
        raise ConfigError(f"feature maps {outcome_map.name!r} and {ps_map.name!r} mix covariate families")
    family: ContextFamily = "full" if outcome_map.family == "full" else "confounded"
    normalize = settings.weights.normalize if normalize_weights is None else normalize_weights

    ps_fit = fit_logistic(ps_map.sample_design(sample), sample.t, settings.logistic)
    outcome_design = outcome_map.sample_design(sample)
    contexts: dict[int, EstimatingContext] = {}
    for arm in (1, 0):
        rows = sample.t == arm
        outcome_fit = fit_normal_linear(outcome_design[rows], sample.y[rows], arm=arm, settings=settings.outcome)
        contexts[arm] = EstimatingContext(
            arm=arm,
            outcome_fit=outcome_fit,
            ps_fit=ps_fit,
            outcome_map=outcome_map,
            ps_map=ps_map,
            family=family,
            normalize_weights=normalize,
            propensity_clip=settings.weights.propensity_clip,
        )
    return contexts


# ---------------------------------------------------------------------------
# Weights and estimating functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmWeights:
    weights: np.ndarray
    propensity: np.ndarray
    clipped: np.ndarray
    scale: float


def _clip(e: np.ndarray, clip: float) -> tuple[np.ndarray, np.ndarray]:
    clipped = (e < clip) | (e > 1.0 - clip)
    return np.clip(e, clip, 1.0 - clip), clipped


def _raw_weights(arm: int, t: np.ndarray, e: np.ndarray) -> np.ndarray:
    return t / e if arm == 1 else (1.0 - t) / (1.0 - e)


def inverse_weights(ctx: EstimatingContext, sample: Sample, weight_scale: float | None = None) -> ArmWeights:
    """Inverse-probability weights ``w_t`` for every row of ``sample``.

    With ``normalize_weights`` the arm weights are rescaled to sum to the
    sample size, unless an explicit ``weight_scale`` is supplied (used to
    evaluate a subsample at the scale of the sample it was solved on).
    """
    e, clipped = _clip(np.asarray(propensity(ctx.ps_fit, ctx.ps_map.sample_design(sample))), ctx.propensity_clip)
    if clipped.any():
        log.info("clipped %d propensity values to [%g, %g] (arm %d)", int(clipped.sum()), ctx.propensity_clip,
                 1.0 - ctx.propensity_clip, ctx.arm)
    raw = _raw_weights(ctx.arm, sample.t.astype(float), e)
    if weight_scale is None:
        weight_scale = len(sample) / float(raw.sum()) if ctx.normalize_weights else 1.0
    return ArmWeights(weights=raw * weight_scale, propensity=e, clipped=clipped, scale=weight_scale)


def _record_value(ctx: EstimatingContext, record: Record, q: float, level: float, weight_scale: float) -> float:
    e, _ = _clip(np.asarray(propensity(ctx.ps_fit, ctx.ps_map.record_design(record))), ctx.propensity_clip)
    w = float(_raw_weights(ctx.arm, float(record.t), e)) * weight_scale
    g = float(conditional_cdf(ctx.outcome_fit, q, ctx.outcome_map.record_design(record)))
    return w * (float(record.y <= q) - g) + g - level


def psi_estimating_function(
    ctx: EstimatingContext, record: Record, q: float, level: float, weight_scale: float = 1.0
) -> float:
    """Doubly robust estimating function on a fully observed record."""
    if ctx.family != "full":
        raise ConfigError("psi needs a full-feature context")
    if record.s is None:
        raise DataValidationError("psi needs a record with S covariates")
    return _record_value(ctx, record, q, level, weight_scale)


def phi_estimating_function(
    ctx: EstimatingContext, record: Record, q: float, level: float, weight_scale: float = 1.0
) -> float:
    """Confounded estimating function: same expression with X-only working models."""
    if ctx.family != "confounded":
        raise ConfigError("phi needs a confounded (X-only) context")
    return _record_value(ctx, record, q, level, weight_scale)


def estimating_values(
    ctx: EstimatingContext, sample: Sample, q: float, level: float, weights: ArmWeights | None = None
) -> np.ndarray:
    """Per-row estimating function values at ``q``, vectorised over ``sample``."""
    weights = weights or inverse_weights(ctx, sample)
    g = np.asarray(conditional_cdf(ctx.outcome_fit, q, ctx.outcome_map.sample_design(sample)))
    indicator = (sample.y <= q).astype(float)
    return weights.weights * (indicator - g) + g - level


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DrQuantileResult:
    q_hat: float
    arm: int
    level: float
    residual: float
    bracket: tuple[float, float]
    method: SolveMethod
    weight_scale: float = 1.0


def _smooth_mean(points: np.ndarray, mu: np.ndarray, sigma: float, coef: np.ndarray) -> np.ndarray:
    """``sum_i coef_i * Phi((point - mu_i) / sigma)`` for each evaluation point."""
    points = np.atleast_1d(points)
    out = np.empty(points.shape[0])
    step = max(1, _BLOCK_CELLS // max(1, mu.shape[0]))
    for start in range(0, points.shape[0], step):
        block = points[start : start + step]
        out[start : start + step] = coef @ ndtr((block[None, :] - mu[:, None]) / sigma)
    return out


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"quantile level out of range: {level}", level=level)


def solve_dr_quantile(
    ctx: EstimatingContext, sample: Sample, level: float, weight_scale: float | None = None
) -> DrQuantileResult:
    """Smallest ``q`` at which the mean estimating function reaches zero.

    ``M(q)`` is a step function in the indicator terms plus a continuous part
    from the outcome CDF terms, and starts at ``-level`` as ``q -> -inf``.
    The sorted unique outcomes are scanned for the first point where ``M``
    (or its left limit) becomes non-negative. A crossing at a jump returns
    that outcome value; a crossing inside a gap is refined with Brent's
    method. Roots outside the outcome range are bracketed by expanding
    outwards and reported as ``bisection-fallback``.
    """
    _check_level(level)
    n = len(sample)
    if n == 0:
        raise DataValidationError("cannot solve an estimating equation on an empty sample")
    if not (np.any(sample.t == 0) and np.any(sample.t == 1)):
        raise DataValidationError("both treatment arms must be present to solve the estimating equation")

    aw = inverse_weights(ctx, sample, weight_scale)
    w = aw.weights
    mu = ctx.outcome_map.sample_design(sample) @ ctx.outcome_fit.beta
    sigma = ctx.outcome_fit.sigma
    coef = (1.0 - w) / n

    values, inverse = np.unique(sample.y, return_inverse=True)
    jumps = np.bincount(inverse, weights=w, minlength=values.shape[0]) / n
    steps = np.cumsum(jumps)
    at = steps + _smooth_mean(values, mu, sigma, coef) - level
    left = at - jumps

    def mean_fn(q: float, step_part: float) -> float:
        return float(step_part + _smooth_mean(np.array([q]), mu, sigma, coef)[0] - level)

    def finish(q: float, bracket: tuple[float, float], method: SolveMethod) -> DrQuantileResult:
        idx = int(np.searchsorted(values, q, side="right"))
        residual = (steps[idx - 1] if idx > 0 else 0.0) + _smooth_mean(np.array([q]), mu, sigma, coef)[0] - level
        return DrQuantileResult(
            q_hat=float(q),
            arm=ctx.arm,
            level=level,
            residual=float(residual),
            bracket=(float(bracket[0]), float(bracket[1])),
            method=method,
            weight_scale=aw.scale,
        )

    span = max(float(values[-1] - values[0]), 1.0)
    hits = np.flatnonzero((left >= 0.0) | (at >= 0.0))
    if hits.size:
        k = int(hits[0])
        if left[k] < 0.0:
            lo = float(values[k - 1]) if k > 0 else float(values[k])
            return finish(float(values[k]), (lo, float(values[k])), "crossing")
        if k > 0:
            lo, hi = float(values[k - 1]), float(values[k])
            step_part = float(steps[k - 1])
            if mean_fn(hi, step_part) <= 0.0:
                return finish(hi, (lo, hi), "crossing")
            root = brentq(mean_fn, lo, hi, args=(step_part,), xtol=1e-12 * span)
            return finish(root, (lo, hi), "crossing")
        # Crossing below the smallest outcome.
        hi = float(values[0])
        lo = _expand(lambda q: mean_fn(q, 0.0), hi, -span, want_negative=True)
        return finish(brentq(mean_fn, lo, hi, args=(0.0,), xtol=1e-12 * span), (lo, hi), "bisection-fallback")

    # M stays negative over the outcome range; it tends to 1 - level beyond it.
    lo = float(values[-1])
    step_part = float(steps[-1])
    hi = _expand(lambda q: mean_fn(q, step_part), lo, span, want_negative=False)
    root = brentq(mean_fn, lo, hi, args=(step_part,), xtol=1e-12 * span)
    log.debug("arm %d level %g: root beyond the largest outcome", ctx.arm, level)
    return finish(root, (lo, hi), "bisection-fallback")


def _expand(fn: Callable[[float], float], start: float, width: float, *, want_negative: bool) -> float:
    """Walk outward from ``start`` until ``fn`` has the wanted sign."""
    edge = start
    for _ in range(_MAX_EXPANSIONS):
        edge = edge + width
        value = fn(edge)
        if not np.isfinite(value):
            break
        if (value < 0.0) if want_negative else (value >= 0.0):
            return edge
        width *= 2.0
    raise NoRootError("estimating equation has no root", searched_to=float(edge))


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityEstimate:
    arm: int
    value: float
    bandwidth: float
    kernel: str = "gaussian"


def silverman_bandwidth(values: np.ndarray, weights: np.ndarray) -> float:
    """Silverman's rule with weighted spread and Kish effective sample size."""
    omega = weights / weights.sum()
    mean = float(omega @ values)
    sd = float(np.sqrt(omega @ (values - mean) ** 2))
    q25, q75 = np.quantile(values, [0.25, 0.75], weights=omega, method="inverted_cdf")
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    n_eff = weights.sum() ** 2 / float(np.sum(weights**2))
    return 0.9 * spread * n_eff ** (-0.2)


def weighted_gaussian_kde(values: np.ndarray, weights: np.ndarray, q: float) -> tuple[float, float]:
    """Self-normalised weighted Gaussian KDE at ``q``; returns (density, bandwidth)."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise DensityError("kernel weights must be non-negative with a positive sum")
    bandwidth = silverman_bandwidth(values, weights)
    if not bandwidth > 0.0:
        raise DensityError("zero bandwidth: outcomes in the arm have no spread")
    omega = weights / weights.sum()
    return float(omega @ norm.pdf((q - values) / bandwidth) / bandwidth), bandwidth


def estimate_density(
    sample: Sample, ctx: EstimatingContext, q: float, settings: DensitySettings | None = None
) -> DensityEstimate:
    """IPW kernel density of the arm's outcomes at ``q``."""
    settings = settings or load_settings().density
    rows = sample.t == ctx.arm
    if int(rows.sum()) < settings.min_arm_size:
        raise DensityError(
            f"arm {ctx.arm} has {int(rows.sum())} rows; density needs at least {settings.min_arm_size}",
            arm=ctx.arm,
        )
    weights = inverse_weights(ctx, sample).weights[rows]
    value, bandwidth = weighted_gaussian_kde(sample.y[rows], weights, q)
    if value < settings.floor:
        log.warning("density for arm %d at q=%.4g is %.3g; floored at %g", ctx.arm, q, value, settings.floor)
        value = settings.floor
    return DensityEstimate(arm=ctx.arm, value=value, bandwidth=bandwidth)


# ---------------------------------------------------------------------------
# Influence functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfluenceTerms:
    """Pieces of the first-order expansion of the mean estimating function."""

    core: np.ndarray
    a_theta: np.ndarray
    a_alpha: np.ndarray
    theta_linear: np.ndarray
    alpha_linear: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.core + self.theta_linear @ self.a_theta + self.alpha_linear @ self.a_alpha


@dataclass(frozen=True)
class InfluenceSet:
    """Influence values of one arm: ``psi`` (n x levels) and calibration ``phi`` (N x d)."""

    arm: int
    psi: np.ndarray
    phi: np.ndarray


def _checked_solve(matrix: np.ndarray, rhs: np.ndarray, what: str, max_condition: float) -> np.ndarray:
    condition = float(np.linalg.cond(matrix))
    if not np.isfinite(condition) or condition > max_condition:
        raise SingularMatrixError(f"{what} is singular", condition=condition)
    return np.linalg.solve(matrix, rhs)


def influence_terms(
    ctx: EstimatingContext, sample: Sample, q: float, level: float, max_condition: float = 1e12
) -> InfluenceTerms:
    """Estimating-function values plus the plug-in parameter corrections.

    ``a_theta`` and ``a_alpha`` are the sample-mean derivatives of the
    estimating function with respect to the outcome and propensity
    parameters; ``theta_linear`` and ``alpha_linear`` are the per-row
    linearizations of the two MLEs. Both fits must come from ``sample``.
    """
    n = len(sample)
    arm_rows = sample.t == ctx.arm
    n_arm = int(arm_rows.sum())
    if ctx.ps_fit.n_obs != n or ctx.outcome_fit.n_obs != n_arm:
        raise ConfigError("influence corrections need working models fitted on the same sample")

    aw = inverse_weights(ctx, sample)
    d_or = ctx.outcome_map.sample_design(sample)
    d_ps = ctx.ps_map.sample_design(sample)
    g = np.asarray(conditional_cdf(ctx.outcome_fit, q, d_or))
    g_grad = conditional_cdf_grad(ctx.outcome_fit, q, d_or)
    residual = (sample.y <= q).astype(float) - g
    # The Hajek scale 1 / mean(raw) depends on the data and on alpha; its
    # linearization recenters the weighted residual at c = mean(w r).
    center = float(np.mean(aw.weights * residual)) if ctx.normalize_weights else 0.0
    core = aw.weights * (residual - center) + center + g - level

    a_theta = np.mean((1.0 - aw.weights)[:, None] * g_grad, axis=0)

    # d w / d alpha; zero where the propensity was clipped.
    e = aw.propensity
    t = sample.t.astype(float)
    dw_de = -t / e**2 if ctx.arm == 1 else (1.0 - t) / (1.0 - e) ** 2
    dw_de = np.where(aw.clipped, 0.0, dw_de * aw.scale)
    a_alpha = np.mean((dw_de * (residual - center))[:, None] * propensity_grad(ctx.ps_fit, d_ps), axis=0)

    scores = np.zeros((n, ctx.outcome_fit.scores.shape[1]))
    scores[arm_rows] = ctx.outcome_fit.scores
    expected_hessian = (n_arm / n) * ctx.outcome_fit.hessian
    theta_linear = -_checked_solve(expected_hessian, scores.T, "outcome-model Hessian", max_condition).T
    alpha_linear = _checked_solve(ctx.ps_fit.fisher, ctx.ps_fit.scores.T, "propensity Fisher information",
                                  max_condition).T
    return InfluenceTerms(
        core=core, a_theta=a_theta, a_alpha=a_alpha, theta_linear=theta_linear, alpha_linear=alpha_linear
    )


def influence_psi(
    ctx: EstimatingContext,
    sample: Sample,
    q_hat: float,
    level: float,
    density: DensityEstimate,
    max_condition: float = 1e12,
) -> np.ndarray:
    """Per-row influence values of ``q_hat`` on the sample the models were fitted on."""
    if density.arm != ctx.arm:
        raise ConfigError(f"density is for arm {density.arm}, context is for arm {ctx.arm}")
    terms = influence_terms(ctx, sample, q_hat, level, max_condition)
    return -terms.total / density.value
