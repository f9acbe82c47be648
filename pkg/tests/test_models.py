from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize
from scipy.special import log_expit
from scipy.stats import norm

from lib.fqte.errors import DegenerateOutcomeError, ModelFitError, SeparationError, SingularMatrixError
from lib.fqte.features import full_linear
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
from lib.fqte.sim import DgpConfig, generate

Z_975 = 1.959963984540054


def _normal_fit(beta: list[float], sigma: float) -> NormalLinearFit:
    k = len(beta)
    return NormalLinearFit(beta=np.asarray(beta), sigma=sigma, scores=np.empty((0, k + 1)), hessian=np.eye(k + 1))


def _logistic_fit(alpha: list[float]) -> LogisticFit:
    k = len(alpha)
    return LogisticFit(alpha=np.asarray(alpha), scores=np.empty((0, k)), fisher=np.eye(k), converged=True,
                       iterations=0)


def _overlapping_design() -> tuple[np.ndarray, np.ndarray]:
    x = np.linspace(-2.0, 2.0, 20)
    labels = np.array([0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 1], dtype=float)
    return np.column_stack([np.ones_like(x), x]), labels


class TestFitLogistic:
    def test_intercept_only_balanced_labels(self) -> None:
        labels = np.array([0, 1] * 10, dtype=float)
        fit = fit_logistic(np.ones((20, 1)), labels)
        assert fit.alpha == pytest.approx([0.0], abs=1e-12)
        assert fit.converged
        assert fit.n_obs == 20

    def test_matches_generic_optimizer(self) -> None:
        design, labels = _overlapping_design()

        def negloglik(a: np.ndarray) -> float:
            eta = design @ a
            return -float(np.sum(labels * log_expit(eta) + (1.0 - labels) * log_expit(-eta)))

        reference = minimize(negloglik, np.zeros(2), method="BFGS", options={"gtol": 1e-10}).x
        fit = fit_logistic(design, labels)
        assert fit.converged
        np.testing.assert_allclose(fit.alpha, reference, atol=1e-5)

    def test_scores_have_zero_mean_at_optimum(self) -> None:
        design, labels = _overlapping_design()
        fit = fit_logistic(design, labels)
        np.testing.assert_allclose(fit.scores.mean(axis=0), 0.0, atol=1e-8)
        np.testing.assert_allclose(fit.fisher, fit.scores.T @ fit.scores / 20)

    def test_perfect_separation(self) -> None:
        x = np.linspace(-2.0, 2.0, 20)
        design = np.column_stack([np.ones_like(x), x])
        with pytest.raises(SeparationError, match="perfect separation"):
            fit_logistic(design, (x > 0).astype(float))

    def test_duplicated_column_is_singular(self) -> None:
        design, labels = _overlapping_design()
        with pytest.raises(SingularMatrixError, match="singular logistic Hessian"):
            fit_logistic(np.column_stack([design, design[:, 1]]), labels)

    def test_constant_labels(self) -> None:
        with pytest.raises(ModelFitError, match="both label values"):
            fit_logistic(np.ones((5, 1)), np.ones(5))

    def test_recovers_simulation_coefficients(self) -> None:
        ds = generate(DgpConfig(n=199_999, N=200_000, seed=1)).dataset
        sample = ds.validation
        fit = fit_logistic(full_linear().sample_design(sample), sample.t)
        np.testing.assert_allclose(fit.alpha, [0.0, 0.25, -0.25, 0.25, -0.25], atol=0.05)


class TestFitNormalLinear:
    def test_matches_normal_equations(self, rng: np.random.Generator) -> None:
        design = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        y = design @ np.array([1.0, -0.5, 2.0]) + rng.normal(size=40)
        fit = fit_normal_linear(design, y)
        beta = np.linalg.solve(design.T @ design, design.T @ y)
        np.testing.assert_allclose(fit.beta, beta, atol=1e-10)
        assert fit.sigma == pytest.approx(np.sqrt(np.mean((y - design @ beta) ** 2)), rel=1e-10)

    def test_scores_vanish_at_mle(self, rng: np.random.Generator) -> None:
        design = np.column_stack([np.ones(30), rng.normal(size=30)])
        fit = fit_normal_linear(design, rng.normal(size=30), arm=0)
        assert fit.arm == 0
        np.testing.assert_allclose(fit.scores.mean(axis=0), 0.0, atol=1e-10)
        assert fit.hessian[-1, -1] == pytest.approx(-2.0 / fit.sigma**2)
        assert fit.theta[-1] == fit.sigma

    def test_exact_fit_is_degenerate(self) -> None:
        design = np.column_stack([np.ones(10), np.arange(10.0)])
        with pytest.raises(DegenerateOutcomeError, match="degenerate outcome model"):
            fit_normal_linear(design, 3.0 + 2.0 * np.arange(10.0))

    def test_rank_deficient_design(self) -> None:
        x = np.arange(10.0)
        with pytest.raises(SingularMatrixError, match="rank-deficient"):
            fit_normal_linear(np.column_stack([np.ones(10), x, 2.0 * x]), np.sin(x))

    def test_too_few_rows(self) -> None:
        with pytest.raises(ModelFitError, match="at least 3 rows"):
            fit_normal_linear(np.column_stack([np.ones(2), [0.0, 1.0]]), np.array([0.0, 1.0]))

    def test_recovers_simulation_coefficients(self) -> None:
        sim = generate(DgpConfig(n=399_999, N=400_000, seed=2))
        sample = sim.dataset.validation
        treated = sample.t == 1
        fit = fit_normal_linear(full_linear().sample_design(sample)[treated], sample.y[treated])
        np.testing.assert_allclose(fit.beta, [0.0, 0.5, -0.5, 0.5, -0.5], atol=0.05)
        assert fit.sigma == pytest.approx(2.0, abs=0.03)


class TestConditionalCdf:
    @pytest.mark.parametrize(
        ("offset", "expected"),
        [
            pytest.param(0.0, 0.5, id="at-mean"),
            pytest.param(Z_975 * 2.0, 0.975, id="upper-tail"),
            pytest.param(-Z_975 * 2.0, 0.025, id="lower-tail"),
        ],
    )
    def test_standard_points(self, offset: float, expected: float) -> None:
        fit = _normal_fit([1.0, 2.0], 2.0)
        row = np.array([1.0, 0.5])
        assert conditional_cdf(fit, 2.0 + offset, row) == pytest.approx(expected, abs=1e-12)

    def test_vectorised_rows(self) -> None:
        fit = _normal_fit([0.0, 1.0], 1.0)
        rows = np.array([[1.0, -1.0], [1.0, 0.0], [1.0, 1.0]])
        values = conditional_cdf(fit, 0.0, rows)
        assert values.shape == (3,)
        assert values[1] == pytest.approx(0.5)
        assert values[0] == pytest.approx(1.0 - values[2])

    def test_matches_integrated_density(self) -> None:
        fit = _normal_fit([0.3, -1.2], 0.7)
        row = np.array([1.0, 0.4])
        mu = float(row @ fit.beta)
        for y in (-2.0, -0.17, 0.9):
            area, _ = quad(lambda u: norm.pdf(u, loc=mu, scale=fit.sigma), -np.inf, y, epsabs=1e-12)
            assert conditional_cdf(fit, y, row) == pytest.approx(area, abs=1e-8)

    def test_monotone_in_y(self) -> None:
        fit = _normal_fit([0.3, -1.2], 0.7)
        row = np.array([1.0, 0.4])
        grid = np.linspace(-5.0, 5.0, 101)
        assert np.all(np.diff([conditional_cdf(fit, y, row) for y in grid]) > 0.0)

    def test_gradient_matches_finite_differences(self) -> None:
        fit = _normal_fit([0.3, -1.2], 0.7)
        row = np.array([1.0, 0.4])
        y, h = 0.2, 1e-6
        analytic = conditional_cdf_grad(fit, y, row)
        numeric = []
        for j in range(3):
            bump = np.zeros(3)
            bump[j] = h
            up = dataclasses.replace(fit, beta=fit.beta + bump[:2], sigma=fit.sigma + bump[2])
            down = dataclasses.replace(fit, beta=fit.beta - bump[:2], sigma=fit.sigma - bump[2])
            numeric.append((conditional_cdf(up, y, row) - conditional_cdf(down, y, row)) / (2 * h))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_gradient_rows(self) -> None:
        fit = _normal_fit([0.3, -1.2], 0.7)
        rows = np.array([[1.0, 0.4], [1.0, -0.1]])
        grads = conditional_cdf_grad(fit, 0.2, rows)
        assert grads.shape == (2, 3)
        np.testing.assert_allclose(grads[1], conditional_cdf_grad(fit, 0.2, rows[1]))

    def test_gradient_on_random_points(self, rng: np.random.Generator) -> None:
        fit = _normal_fit(list(rng.normal(size=4)), 1.3)
        rows = np.column_stack([np.ones(1000), rng.normal(size=(1000, 3))])
        y = rows @ fit.beta + fit.sigma * rng.uniform(-3.0, 3.0, size=1000)
        h = 1e-6
        analytic = conditional_cdf_grad(fit, y, rows)
        numeric = np.empty_like(analytic)
        for j in range(5):
            bump = np.zeros(5)
            bump[j] = h
            up = dataclasses.replace(fit, beta=fit.beta + bump[:4], sigma=fit.sigma + bump[4])
            down = dataclasses.replace(fit, beta=fit.beta - bump[:4], sigma=fit.sigma - bump[4])
            numeric[:, j] = (conditional_cdf(up, y, rows) - conditional_cdf(down, y, rows)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


class TestPropensity:
    def test_closed_form(self) -> None:
        fit = _logistic_fit([0.0, np.log(3.0)])
        row = np.array([1.0, 1.0])
        assert propensity(fit, row) == pytest.approx(0.75)
        np.testing.assert_allclose(propensity_grad(fit, row), [0.1875, 0.1875])

    def test_rows(self) -> None:
        fit = _logistic_fit([0.0, 1.0])
        rows = np.array([[1.0, 0.0], [1.0, 2.0]])
        np.testing.assert_allclose(propensity(fit, rows), [0.5, 1.0 / (1.0 + np.exp(-2.0))])
        assert propensity_grad(fit, rows).shape == (2, 2)

    def test_zero_coefficients(self) -> None:
        fit = _logistic_fit([0.0, 0.0, 0.0])
        row = np.array([1.0, -0.7, 2.5])
        assert propensity(fit, row) == 0.5
        np.testing.assert_allclose(propensity_grad(fit, row), 0.25 * row)

    def test_gradient_on_random_points(self, rng: np.random.Generator) -> None:
        fit = _logistic_fit(list(rng.normal(scale=0.5, size=4)))
        rows = np.column_stack([np.ones(1000), rng.normal(size=(1000, 3))])
        h = 1e-6
        analytic = propensity_grad(fit, rows)
        numeric = np.empty_like(analytic)
        for j in range(4):
            bump = np.zeros(4)
            bump[j] = h
            up = dataclasses.replace(fit, alpha=fit.alpha + bump)
            down = dataclasses.replace(fit, alpha=fit.alpha - bump)
            numeric[:, j] = (propensity(up, rows) - propensity(down, rows)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)
