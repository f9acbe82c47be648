from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
import pytest
from scipy.stats import norm

from lib.data.fused import FusedDataset, Sample
from lib.fqte.drq import (
    DensityEstimate,
    EstimatingContext,
    _expand,
    build_contexts,
    estimate_density,
    estimating_values,
    influence_psi,
    influence_terms,
    inverse_weights,
    phi_estimating_function,
    psi_estimating_function,
    silverman_bandwidth,
    solve_dr_quantile,
    weighted_gaussian_kde,
)
from lib.fqte.errors import ConfigError, DataValidationError, DensityError, NoRootError
from lib.fqte.features import FeatureMap, distorted, full_linear, x_linear
from lib.fqte.models import conditional_cdf, propensity
from lib.fqte.settings import FqteSettings, load_settings
from lib.fqte.sim import DgpConfig, generate


def _constant_map(family: str = "full") -> FeatureMap:
    """Intercept-only design: covariates are ignored."""
    return FeatureMap("constant", family, lambda x, _s: np.empty((x.shape[0], 0)), intercept=True)


def _mean_estimating(ctx: EstimatingContext, sample: Sample, q: float, level: float) -> float:
    return float(np.mean(estimating_values(ctx, sample, q, level)))


class TestInverseWeights:
    @pytest.mark.parametrize("arm", [1, 0])
    def test_normalized_weights_sum_to_sample_size(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext], arm: int
    ) -> None:
        aw = inverse_weights(validation_contexts[arm], fused.validation)
        assert aw.weights.sum() == pytest.approx(fused.n)
        assert np.all(aw.weights[fused.validation.t != arm] == 0.0)

    def test_explicit_scale_wins(self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]) -> None:
        aw = inverse_weights(validation_contexts[1], fused.validation, weight_scale=1.0)
        treated = fused.validation.t == 1
        np.testing.assert_allclose(aw.weights[treated], 1.0 / aw.propensity[treated])

    def test_clipping_flags_extreme_propensities(self, fused: FusedDataset, settings: FqteSettings) -> None:
        ctx = build_contexts(fused.validation, full_linear(), full_linear(), settings)[1]
        extreme = dataclasses.replace(ctx.ps_fit, alpha=np.array([20.0, 0.0, 0.0, 0.0, 0.0]))
        aw = inverse_weights(dataclasses.replace(ctx, ps_fit=extreme), fused.validation)
        assert aw.clipped.all()
        np.testing.assert_allclose(aw.propensity, 1.0 - settings.weights.propensity_clip)


class TestEstimatingFunctions:
    def test_unit_weight_reduces_to_indicator(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        ctx = validation_contexts[1]
        i = int(np.flatnonzero(fused.validation.t == 1)[0])
        record = fused.validation.record(i)
        e = propensity(ctx.ps_fit, ctx.ps_map.record_design(record))
        q = record.y + 0.1
        assert psi_estimating_function(ctx, record, q, 0.3, weight_scale=e) == pytest.approx(1.0 - 0.3, abs=1e-12)

    def test_other_arm_record_gives_model_cdf(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        ctx = validation_contexts[1]
        i = int(np.flatnonzero(fused.validation.t == 0)[0])
        record = fused.validation.record(i)
        g = conditional_cdf(ctx.outcome_fit, 0.4, ctx.outcome_map.record_design(record))
        assert psi_estimating_function(ctx, record, 0.4, 0.5) == pytest.approx(g - 0.5)

    def test_matches_formula_for_control_arm(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        ctx = validation_contexts[0]
        i = int(np.flatnonzero(fused.validation.t == 0)[0])
        record = fused.validation.record(i)
        e = propensity(ctx.ps_fit, ctx.ps_map.record_design(record))
        g = conditional_cdf(ctx.outcome_fit, record.y, ctx.outcome_map.record_design(record))
        expected = (1.0 - g) / (1.0 - e) + g - 0.25
        assert psi_estimating_function(ctx, record, record.y, 0.25) == pytest.approx(expected)

    def test_vectorised_values_match_records(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        ctx = validation_contexts[1]
        aw = inverse_weights(ctx, fused.validation)
        values = estimating_values(ctx, fused.validation, 0.2, 0.5, aw)
        for i in (0, 7, 123):
            record = fused.validation.record(i)
            assert values[i] == pytest.approx(psi_estimating_function(ctx, record, 0.2, 0.5, weight_scale=aw.scale))

    def test_phi_on_pooled_record(self, fused: FusedDataset, pooled_contexts: dict[int, EstimatingContext]) -> None:
        ctx = pooled_contexts[1]
        pooled = fused.pooled()
        record = pooled.record(fused.N - 1)
        assert record.s is None
        values = estimating_values(ctx, pooled, 0.0, 0.5, inverse_weights(ctx, pooled, weight_scale=1.0))
        assert phi_estimating_function(ctx, record, 0.0, 0.5) == pytest.approx(values[-1])

    def test_family_mismatch(
        self,
        fused: FusedDataset,
        validation_contexts: dict[int, EstimatingContext],
        pooled_contexts: dict[int, EstimatingContext],
    ) -> None:
        record = fused.validation.record(0)
        with pytest.raises(ConfigError, match="full-feature context"):
            psi_estimating_function(pooled_contexts[1], record, 0.0, 0.5)
        with pytest.raises(ConfigError, match="confounded"):
            phi_estimating_function(validation_contexts[1], record, 0.0, 0.5)
        with pytest.raises(DataValidationError, match="S covariates"):
            psi_estimating_function(validation_contexts[1], fused.pooled().record(0), 0.0, 0.5)

    def test_context_rejects_wrong_maps(self, validation_contexts: dict[int, EstimatingContext]) -> None:
        with pytest.raises(ConfigError, match="does not belong"):
            dataclasses.replace(validation_contexts[1], outcome_map=x_linear())
        with pytest.raises(ConfigError, match="mix covariate families"):
            build_contexts(Sample(y=[0.0], t=[1], x=[[0.0]]), full_linear(), x_linear())

    @pytest.mark.parametrize("fmap", [full_linear(), distorted()], ids=["full-linear", "distorted"])
    def test_full_transforms_need_s(self, fmap: FeatureMap) -> None:
        with pytest.raises(ConfigError, match="needs S covariates"):
            fmap.transform(np.zeros((2, 1)), None)


class TestSolveDrQuantile:
    def test_constant_models_give_empirical_quantile(self, fused: FusedDataset, settings: FqteSettings) -> None:
        contexts = build_contexts(fused.validation, _constant_map(), _constant_map(), settings)
        treated = np.sort(fused.validation.y[fused.validation.t == 1])
        k = treated.size // 2
        level = (k + 0.5) / treated.size
        solved = solve_dr_quantile(contexts[1], fused.validation, level)
        assert solved.q_hat == treated[k]
        assert solved.method == "crossing"
        assert solved.weight_scale == pytest.approx(1.0)

    def test_agrees_with_grid_scan_on_random_datasets(self, settings: FqteSettings) -> None:
        levels = np.random.default_rng(404).uniform(0.05, 0.95, size=(200, 2))
        for seed in range(200):
            pooled = generate(DgpConfig(n=20, N=50, seed=1000 + seed)).dataset.pooled()
            contexts = build_contexts(pooled, x_linear(), x_linear(), settings)
            span = float(np.ptp(pooled.y))
            grid = np.arange(pooled.y.min() - span, pooled.y.max() + span, 2e-4 * span)
            for arm, level in zip((1, 0), levels[seed], strict=True):
                ctx = contexts[arm]
                w = inverse_weights(ctx, pooled).weights
                mu = ctx.outcome_map.sample_design(pooled) @ ctx.outcome_fit.beta
                g = norm.cdf((grid[:, None] - mu[None, :]) / ctx.outcome_fit.sigma)
                below = (pooled.y[None, :] <= grid[:, None]).astype(float)
                means = (w * (below - g) + g).mean(axis=1) - level
                j = int(np.flatnonzero(means >= 0.0)[0])
                assert j > 0, (seed, arm)
                solved = solve_dr_quantile(ctx, pooled, float(level))
                assert grid[j - 1] - 1e-9 <= solved.q_hat <= grid[j] + 1e-9, (seed, arm, level)

    @pytest.mark.parametrize("arm", [1, 0])
    def test_residual_is_small_and_non_negative(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext], arm: int
    ) -> None:
        ctx = validation_contexts[arm]
        solved = solve_dr_quantile(ctx, fused.validation, 0.5)
        largest_jump = float(inverse_weights(ctx, fused.validation).weights.max()) / fused.n
        assert -1e-9 <= solved.residual <= largest_jump + 1e-9
        assert solved.residual == pytest.approx(_mean_estimating(ctx, fused.validation, solved.q_hat, 0.5), abs=1e-9)
        assert solved.bracket[0] <= solved.q_hat <= solved.bracket[1]

    def test_affine_equivariance(self, fused: FusedDataset, settings: FqteSettings) -> None:
        v = fused.validation
        moved = Sample(y=3.0 * v.y - 2.0, t=v.t, x=v.x, s=v.s)
        base = solve_dr_quantile(build_contexts(v, full_linear(), full_linear(), settings)[1], v, 0.4)
        shifted = solve_dr_quantile(build_contexts(moved, full_linear(), full_linear(), settings)[1], moved, 0.4)
        assert shifted.q_hat == pytest.approx(3.0 * base.q_hat - 2.0, rel=1e-8, abs=1e-8)

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.2, 1.5])
    def test_level_out_of_range(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext], level: float
    ) -> None:
        with pytest.raises(ConfigError, match="quantile level out of range"):
            solve_dr_quantile(validation_contexts[1], fused.validation, level)

    def test_single_arm_sample(self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]) -> None:
        treated_only = fused.validation.take(np.flatnonzero(fused.validation.t == 1))
        with pytest.raises(DataValidationError, match="both treatment arms"):
            solve_dr_quantile(validation_contexts[1], treated_only, 0.5)

    def test_expansion_gives_up(self) -> None:
        with pytest.raises(NoRootError, match="no root"):
            _expand(lambda q: -1.0, 0.0, 1.0, want_negative=False)

    @pytest.mark.parametrize("arm", [1, 0])
    def test_normalization_moves_quantile_by_order_one_over_n(
        self, fused: FusedDataset, settings: FqteSettings, arm: int
    ) -> None:
        v = fused.validation
        hajek = build_contexts(v, full_linear(), full_linear(), settings, normalize_weights=True)[arm]
        raw = build_contexts(v, full_linear(), full_linear(), settings, normalize_weights=False)[arm]
        assert inverse_weights(hajek, v).scale != 1.0
        gap = abs(solve_dr_quantile(hajek, v, 0.5).q_hat - solve_dr_quantile(raw, v, 0.5).q_hat)
        assert gap <= 20.0 / len(v)


class TestDensity:
    def test_standard_normal_at_zero(self, rng: np.random.Generator) -> None:
        values = rng.standard_normal(20_000)
        density, bandwidth = weighted_gaussian_kde(values, np.ones_like(values), 0.0)
        assert 0.37 <= density <= 0.43
        assert bandwidth > 0.0

    def test_matches_direct_sum(self) -> None:
        values = np.array([-1.2, -0.3, 0.1, 0.4, 1.7, 2.2])
        weights = np.array([1.0, 2.0, 0.5, 1.5, 1.0, 3.0])
        h = silverman_bandwidth(values, weights)
        expected = sum(
            w * math.exp(-0.5 * ((0.3 - v) / h) ** 2) / math.sqrt(2 * math.pi) / h
            for v, w in zip(values, weights, strict=True)
        ) / weights.sum()
        density, bandwidth = weighted_gaussian_kde(values, weights, 0.3)
        assert bandwidth == h
        assert density == pytest.approx(expected, rel=1e-12)

    def test_unit_weight_bandwidth_is_silverman(self, rng: np.random.Generator) -> None:
        values = rng.normal(size=400)
        sd = float(np.std(values))
        q25, q75 = np.quantile(values, [0.25, 0.75], method="inverted_cdf")
        expected = 0.9 * min(sd, (q75 - q25) / 1.34) * 400 ** (-0.2)
        assert silverman_bandwidth(values, np.ones(400)) == pytest.approx(expected)

    def test_weight_scale_invariant(self, rng: np.random.Generator) -> None:
        values = rng.normal(size=50)
        weights = rng.uniform(0.5, 2.0, size=50)
        assert weighted_gaussian_kde(values, 2.0 * weights, 0.1) == pytest.approx(
            weighted_gaussian_kde(values, weights, 0.1)
        )

    def test_invalid_weights(self) -> None:
        with pytest.raises(DensityError, match="non-negative"):
            weighted_gaussian_kde(np.array([0.0, 1.0]), np.zeros(2), 0.5)

    def test_no_spread(self) -> None:
        with pytest.raises(DensityError, match="zero bandwidth"):
            weighted_gaussian_kde(np.full(5, 2.0), np.ones(5), 2.0)

    def test_arm_too_small(self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]) -> None:
        strict = load_settings(overrides={"density": {"min_arm_size": 10_000}}).density
        with pytest.raises(DensityError, match="density needs at least 10000"):
            estimate_density(fused.validation, validation_contexts[1], 0.0, strict)

    def test_floor_logs_warning(
        self,
        fused: FusedDataset,
        validation_contexts: dict[int, EstimatingContext],
        caplog: pytest.LogCaptureFixture,
    ) -> None:
        with caplog.at_level(logging.WARNING, logger="lib.fqte.drq"):
            estimate = estimate_density(fused.validation, validation_contexts[0], 1e3)
        assert estimate.value == pytest.approx(1e-6)
        assert "floored" in caplog.text

    def test_arm_density_is_positive(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        estimate = estimate_density(fused.validation, validation_contexts[1], 0.0)
        assert estimate.arm == 1
        assert 0.05 < estimate.value < 0.5


class TestInfluence:
    @pytest.mark.parametrize("arm", [1, 0])
    def test_centered_at_solution(
        self,
        fused: FusedDataset,
        validation_contexts: dict[int, EstimatingContext],
        settings: FqteSettings,
        arm: int,
    ) -> None:
        ctx = validation_contexts[arm]
        solved = solve_dr_quantile(ctx, fused.validation, 0.5)
        density = estimate_density(fused.validation, ctx, solved.q_hat, settings.density)
        psi = influence_psi(ctx, fused.validation, solved.q_hat, 0.5, density)
        assert psi.shape == (fused.n,)
        assert abs(psi.mean()) <= solved.residual / density.value + 1e-6

    @pytest.mark.parametrize(
        ("outcome_map", "normalize"),
        [
            pytest.param(full_linear(), False, id="linear-raw"),
            pytest.param(full_linear(), True, id="linear-hajek"),
            pytest.param(distorted(), True, id="distorted-outcome-hajek"),
            pytest.param(distorted(), False, id="distorted-outcome-raw"),
        ],
    )
    def test_corrections_match_finite_differences(
        self, fused: FusedDataset, settings: FqteSettings, outcome_map: FeatureMap, normalize: bool
    ) -> None:
        v = fused.validation
        ctx = build_contexts(v, outcome_map, full_linear(), settings, normalize_weights=normalize)[1]
        q, level, h = float(np.median(v.y)), 0.5, 1e-6
        terms = influence_terms(ctx, v, q, level)

        theta = ctx.outcome_fit.theta
        numeric_theta = []
        for j in range(theta.size):
            values = []
            for sign in (1.0, -1.0):
                bumped = theta.copy()
                bumped[j] += sign * h
                fit = dataclasses.replace(ctx.outcome_fit, beta=bumped[:-1], sigma=float(bumped[-1]))
                values.append(_mean_estimating(dataclasses.replace(ctx, outcome_fit=fit), v, q, level))
            numeric_theta.append((values[0] - values[1]) / (2 * h))
        np.testing.assert_allclose(terms.a_theta, numeric_theta, rtol=1e-4, atol=1e-8)

        alpha = ctx.ps_fit.alpha
        numeric_alpha = []
        for j in range(alpha.size):
            values = []
            for sign in (1.0, -1.0):
                bumped = alpha.copy()
                bumped[j] += sign * h
                fit = dataclasses.replace(ctx.ps_fit, alpha=bumped)
                values.append(_mean_estimating(dataclasses.replace(ctx, ps_fit=fit), v, q, level))
            numeric_alpha.append((values[0] - values[1]) / (2 * h))
        np.testing.assert_allclose(terms.a_alpha, numeric_alpha, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("normalize", [True, False])
    def test_core_is_derivative_along_point_masses(
        self, fused: FusedDataset, settings: FqteSettings, normalize: bool
    ) -> None:
        v = fused.validation
        n = len(v)
        ctx = build_contexts(v, distorted(), full_linear(), settings, normalize_weights=normalize)[1]
        q, level, eps = float(np.quantile(v.y, 0.4)), 0.5, 1e-6
        terms = influence_terms(ctx, v, q, level)

        raw = inverse_weights(ctx, v, weight_scale=1.0).weights
        g = np.asarray(conditional_cdf(ctx.outcome_fit, q, ctx.outcome_map.sample_design(v)))
        r = (v.y <= q).astype(float) - g

        def reweighted_mean(f: np.ndarray) -> float:
            # Mean estimating function under row frequencies f (models held fixed).
            weighted = np.sum(f * raw * r) / (np.sum(f * raw) if normalize else np.sum(f))
            return float(weighted + np.sum(f * g) / np.sum(f) - level)

        for i in (0, 7, 123, n - 1):
            direction = -np.ones(n)
            direction[i] += n
            numeric = (reweighted_mean(1.0 + eps * direction) - reweighted_mean(1.0 - eps * direction)) / (2 * eps)
            assert numeric == pytest.approx(terms.core[i] - terms.core.mean(), rel=1e-4, abs=1e-6)

    def test_linearizations_vanish_off_arm(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        terms = influence_terms(validation_contexts[0], fused.validation, 0.0, 0.5)
        treated = fused.validation.t == 1
        assert np.all(terms.theta_linear[treated] == 0.0)
        np.testing.assert_allclose(terms.theta_linear.mean(axis=0), 0.0, atol=1e-8)
        np.testing.assert_allclose(terms.alpha_linear.mean(axis=0), 0.0, atol=1e-5)

    def test_models_from_another_sample(
        self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]
    ) -> None:
        with pytest.raises(ConfigError, match="same sample"):
            influence_terms(validation_contexts[1], fused.validation.take(np.arange(100)), 0.0, 0.5)

    def test_density_arm_mismatch(self, fused: FusedDataset, validation_contexts: dict[int, EstimatingContext]) -> None:
        with pytest.raises(ConfigError, match="density is for arm 0"):
            influence_psi(validation_contexts[1], fused.validation, 0.0, 0.5, DensityEstimate(arm=0, value=0.3,
                                                                                              bandwidth=0.2))


@pytest.mark.slow
def test_normalization_gap_shrinks_like_one_over_n(settings: FqteSettings) -> None:
    def mean_gap(n: int) -> float:
        gaps = []
        for seed in range(30):
            v = generate(DgpConfig(n=n, N=n + 100, seed=500 + seed)).dataset.validation
            solved = [
                solve_dr_quantile(build_contexts(v, full_linear(), full_linear(), settings, normalize_weights=flag)[1],
                                  v, 0.5).q_hat
                for flag in (True, False)
            ]
            gaps.append(abs(solved[0] - solved[1]))
        return float(np.mean(gaps))

    # Eight times the rows: about 8x smaller for O(1/n), under 3x for O(n^-1/2).
    assert mean_gap(500) / mean_gap(4000) > 4.0
