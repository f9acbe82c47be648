"""Parametric working models fitted by maximum likelihood.

- Propensity score: logistic regression, Newton iterations with step-halving.
- Outcome CDF: normal linear model ``G(y | d; theta) = Phi((y - beta'd) / sigma)``
  with ``theta = (beta, sigma)``; least squares plus the MLE scale.

Both fits expose the per-observation scores and the information/Hessian
matrices that the influence-function corrections need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import norm

from lib.fqte.errors import ConfigError, DegenerateOutcomeError, ModelFitError, SeparationError, SingularMatrixError
from lib.fqte.log import get_logger
from lib.fqte.settings import LogisticSettings, OutcomeSettings, load_settings

log = get_logger(__name__)

# Fitted probabilities this close to 0 or 1 mean the likelihood is running off to infinity.
_SEPARATION_PROB = 1e-10


@dataclass(frozen=True)
class LogisticFit:
    alpha: np.ndarray
    scores: np.ndarray
    fisher: np.ndarray
    converged: bool
    iterations: int

    @property
    def n_obs(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class NormalLinearFit:
    beta: np.ndarray
    sigma: float
    scores: np.ndarray
    hessian: np.ndarray
    arm: int = 1

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.beta, self.sigma)

    @property
    def n_obs(self) -> int:
        return int(self.scores.shape[0])


# ---------------------------------------------------------------------------
# Logistic propensity model
# ---------------------------------------------------------------------------


def _mean_loglik(design: np.ndarray, labels: np.ndarray, alpha: np.ndarray) -> float:
    eta = design @ alpha
    return float(np.mean(labels * log_expit(eta) + (1.0 - labels) * log_expit(-eta)))


def fit_logistic(
    design: np.ndarray,
    labels: np.ndarray,
    settings: LogisticSettings | None = None,
) -> LogisticFit:
    """Bernoulli MLE by Newton-Raphson with step-halving.

    Convergence means the infinity norm of the mean score drops below
    ``settings.tol`` within ``settings.max_iter`` Newton steps. Perfect or
    quasi-perfect separation raises :class:`SeparationError`.
    """
    settings = settings or load_settings().logistic
    design = np.asarray(design, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n, k = design.shape
    if labels.shape != (n,):
        raise ConfigError(f"labels must have shape ({n},), got {labels.shape}")
    if np.all(labels == labels[0]):
        raise ModelFitError("logistic fit needs both label values", label=float(labels[0]))
    if np.linalg.matrix_rank(design) < k:
        raise SingularMatrixError("singular logistic Hessian: rank-deficient design",
                                  condition=float(np.linalg.cond(design)))

    alpha = np.zeros(k)
    loglik = _mean_loglik(design, labels, alpha)
    converged = False
    iterations = 0
    for _ in range(settings.max_iter):
        e = expit(design @ alpha)
        grad = design.T @ (labels - e) / n
        if np.max(np.abs(grad)) < settings.tol:
            converged = True
            break
        hess = (design.T * (e * (1.0 - e))) @ design / n
        condition = float(np.linalg.cond(hess))
        if not np.isfinite(condition) or condition > 1.0 / np.finfo(float).eps:
            if np.any((e < _SEPARATION_PROB) | (e > 1.0 - _SEPARATION_PROB)):
                raise SeparationError("perfect separation: logistic likelihood has no finite maximum")
            raise SingularMatrixError("singular logistic Hessian", condition=condition)
        step = np.linalg.solve(hess, grad)

        scale = 1.0
        for _ in range(settings.max_halvings + 1):
            candidate = alpha + scale * step
            candidate_loglik = _mean_loglik(design, labels, candidate)
            if candidate_loglik >= loglik:
                break
            scale /= 2.0
        else:
            # No ascent along the Newton direction; stop at the current iterate.
            break
        alpha, loglik = candidate, candidate_loglik
        iterations += 1
        if np.linalg.norm(alpha) > settings.separation_norm:
            raise SeparationError(
                "perfect separation: logistic coefficients diverged",
                norm=float(np.linalg.norm(alpha)),
            )

    e = expit(design @ alpha)
    if not converged:
        converged = bool(np.max(np.abs(design.T @ (labels - e) / n)) < settings.tol)
    if np.all(np.abs(labels - e) < 1e-6):
        raise SeparationError("perfect separation: every label is fitted with certainty")
    if not converged:
        log.warning("logistic fit did not converge after %d iterations", iterations)

    scores = (labels - e)[:, None] * design
    fisher = scores.T @ scores / n
    return LogisticFit(alpha=alpha, scores=scores, fisher=fisher, converged=converged, iterations=iterations)


def propensity(fit: LogisticFit, design_row: np.ndarray) -> float | np.ndarray:
    """``expit(alpha'd)``; a matrix of rows returns a vector."""
    value = expit(np.asarray(design_row, dtype=float) @ fit.alpha)
    return float(value) if np.ndim(value) == 0 else value


def propensity_grad(fit: LogisticFit, design_row: np.ndarray) -> np.ndarray:
    """Gradient of the propensity with respect to alpha: ``e (1 - e) d``."""
    d = np.asarray(design_row, dtype=float)
    e = expit(d @ fit.alpha)
    if d.ndim == 1:
        return e * (1.0 - e) * d
    return (e * (1.0 - e))[:, None] * d


# ---------------------------------------------------------------------------
# Normal linear outcome model
# ---------------------------------------------------------------------------


def fit_normal_linear(
    design: np.ndarray,
    outcomes: np.ndarray,
    arm: int = 1,
    settings: OutcomeSettings | None = None,
) -> NormalLinearFit:
    """Gaussian MLE for ``y = beta'd + sigma * eps``.

    ``scores`` are the per-row derivatives of the normal log-likelihood with
    respect to ``theta = (beta, sigma)``; ``hessian`` is the row mean of the
    second derivatives.
    """
    settings = settings or load_settings().outcome
    design = np.asarray(design, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    n, k = design.shape
    if n < k + 1:
        raise ModelFitError(f"outcome model needs at least {k + 1} rows, got {n}", arm=arm)
    if np.linalg.matrix_rank(design) < k:
        raise SingularMatrixError("rank-deficient outcome design", condition=float(np.linalg.cond(design)), arm=arm)

    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    sigma = float(np.sqrt(np.mean(resid**2)))
    if sigma <= settings.degenerate_sigma * max(1.0, float(np.max(np.abs(y)))):
        raise DegenerateOutcomeError("degenerate outcome model: residual scale is zero", arm=arm)

    scores = np.column_stack([resid[:, None] * design / sigma**2, -1.0 / sigma + resid**2 / sigma**3])
    hessian = np.empty((k + 1, k + 1))
    hessian[:k, :k] = -(design.T @ design) / (n * sigma**2)
    cross = -2.0 * (design.T @ resid) / (n * sigma**3)
    hessian[:k, k] = cross
    hessian[k, :k] = cross
    hessian[k, k] = 1.0 / sigma**2 - 3.0 * np.mean(resid**2) / sigma**4
    return NormalLinearFit(beta=beta, sigma=sigma, scores=scores, hessian=hessian, arm=arm)


def conditional_cdf(fit: NormalLinearFit, y: float | np.ndarray, design_row: np.ndarray) -> float | np.ndarray:
    """``Phi((y - beta'd) / sigma)``; vectorised over rows of ``design_row``."""
    mu = np.asarray(design_row, dtype=float) @ fit.beta
    value = norm.cdf((np.asarray(y, dtype=float) - mu) / fit.sigma)
    return float(value) if np.ndim(value) == 0 else value


def conditional_cdf_grad(fit: NormalLinearFit, y: float | np.ndarray, design_row: np.ndarray) -> np.ndarray:
    """Gradient of :func:`conditional_cdf` with respect to ``theta = (beta, sigma)``."""
    d = np.asarray(design_row, dtype=float)
    z = (np.asarray(y, dtype=float) - d @ fit.beta) / fit.sigma
    density = norm.pdf(z)
    if d.ndim == 1:
        return np.append(-density / fit.sigma * d, -density * z / fit.sigma)
    return np.column_stack([-(density / fit.sigma)[:, None] * d, -density * z / fit.sigma])
