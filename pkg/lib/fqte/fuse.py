"""Covariance estimation, projection onto the calibration vector, and inference.

The fused estimate subtracts from the validation-only estimate its linear
projection onto the calibration vector ``c_hat``:

    delta_p = delta_v - rho' Sigma^{-1} c_hat
    sigma^2 = sigma_v^2 - rho' Sigma^{-1} rho

``Sigma^{-1} rho`` is always obtained by a linear solve (or an eigen-truncated
pseudo-solve when ``Sigma`` is nearly singular), never an explicit inverse.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.stats import norm

from lib.fqte.calib import CalibrationResult
from lib.fqte.drq import InfluenceSet
from lib.fqte.errors import CalibrationDegenerateError, ConfigError, DimensionMismatchError
from lib.fqte.log import get_logger
from lib.fqte.settings import FusionSettings, load_settings

log = get_logger(__name__)


@dataclass(frozen=True)
class CovarianceEstimates:
    rho_hat: np.ndarray
    sigma_ep_hat: np.ndarray
    sigma_v_sq_hat: float
    nu_n: float


def covariances_from_arrays(
    psi_diff: np.ndarray,
    phi_validation: np.ndarray,
    phi_entire: np.ndarray,
    nu_n: float,
    center_rho: bool = False,
) -> CovarianceEstimates:
    """Moment estimators from the influence differences and the calibration values.

    ``psi_diff`` holds ``psi_1 - psi_0`` on the n validation rows;
    ``phi_validation`` (n x 2d) and ``phi_entire`` (N x 2d) hold the
    confounded estimating-function values.
    """
    psi_diff = np.asarray(psi_diff, dtype=float)
    phi_validation = np.atleast_2d(np.asarray(phi_validation, dtype=float))
    phi_entire = np.atleast_2d(np.asarray(phi_entire, dtype=float))
    if not 0.0 < nu_n < 1.0:
        raise ConfigError(f"sample ratio must lie in (0, 1), got {nu_n}")
    if psi_diff.ndim != 1 or phi_validation.shape[0] != psi_diff.shape[0]:
        raise DimensionMismatchError(
            f"influence values ({psi_diff.shape}) and validation calibration rows ({phi_validation.shape}) differ"
        )
    if phi_entire.shape[1] != phi_validation.shape[1]:
        raise DimensionMismatchError(
            f"calibration widths differ: validation {phi_validation.shape[1]}, entire {phi_entire.shape[1]}"
        )

    n = psi_diff.shape[0]
    left, right = psi_diff, phi_validation
    if center_rho:
        left = psi_diff - psi_diff.mean()
        right = phi_validation - phi_validation.mean(axis=0)
    rho = (1.0 - nu_n) * (right.T @ left) / n
    sigma_ep = (1.0 - nu_n) * (phi_entire.T @ phi_entire) / phi_entire.shape[0]
    sigma_ep = (sigma_ep + sigma_ep.T) / 2.0
    return CovarianceEstimates(
        rho_hat=rho,
        sigma_ep_hat=sigma_ep,
        sigma_v_sq_hat=float(np.mean(psi_diff**2)),
        nu_n=nu_n,
    )


def estimate_covariances(
    psi_sets: Mapping[int, InfluenceSet],
    calib: CalibrationResult,
    nu_n: float,
    center_rho: bool = False,
) -> CovarianceEstimates:
    """Covariances for the target level (first ``psi`` column of each arm)."""
    for arm in (1, 0):
        if arm not in psi_sets:
            raise ConfigError(f"missing influence values for arm {arm}")
    psi_diff = psi_sets[1].psi[:, 0] - psi_sets[0].psi[:, 0]
    return covariances_from_arrays(psi_diff, calib.phi_validation, calib.phi_entire, nu_n, center_rho)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FqteResult:
    delta_p: float
    delta_v: float
    sigma_sq: float
    sigma_v_sq: float
    se: float
    se_v: float
    ci: tuple[float, float]
    ci_v: tuple[float, float]
    efficiency_gain: float
    regularized: bool
    c_hat: np.ndarray
    projection: np.ndarray
    confidence: float
    n: int
    N: int | None = None
    p: float | None = None
    p_cal: tuple[float, ...] = ()

    def to_document(self) -> dict[str, Any]:
        """JSON-ready mapping of the headline quantities."""
        return {
            "delta_p": self.delta_p,
            "delta_v": self.delta_v,
            "se": self.se,
            "se_v": self.se_v,
            "ci": list(self.ci),
            "ci_v": list(self.ci_v),
            "sigma_sq": self.sigma_sq,
            "sigma_v_sq": self.sigma_v_sq,
            "efficiency_gain": self.efficiency_gain,
            "c_hat": self.c_hat.tolist(),
            "regularized": self.regularized,
            "confidence": self.confidence,
            "p": self.p,
            "p_cal": list(self.p_cal),
            "n": self.n,
            "N": self.N,
        }


def _wald(center: float, se: float, confidence: float) -> tuple[float, float]:
    z = float(norm.ppf(0.5 + confidence / 2.0))
    return (center - z * se, center + z * se)


def projection_coefficients(
    sigma_ep: np.ndarray, rho: np.ndarray, eig_rtol: float = 1e-10
) -> tuple[np.ndarray, bool]:
    """``Sigma^{-1} rho`` and whether eigen-truncation was needed."""
    eigvals, eigvecs = np.linalg.eigh(sigma_ep)
    largest = float(eigvals.max())
    if largest <= np.finfo(float).tiny:
        if np.any(rho != 0.0):
            raise CalibrationDegenerateError(
                "calibration degenerate: calibration covariance is zero but its cross-covariance is not",
                rho_norm=float(np.linalg.norm(rho)),
            )
        return np.zeros_like(rho), False
    keep = eigvals > eig_rtol * largest
    if keep.all():
        return np.linalg.solve(sigma_ep, rho), False
    log.warning(
        "calibration covariance is near-singular; dropped %d of %d eigen-directions",
        int((~keep).sum()),
        keep.size,
    )
    basis = eigvecs[:, keep]
    return basis @ ((basis.T @ rho) / eigvals[keep]), True


def fuse_estimate(
    delta_v: float,
    calib: CalibrationResult,
    cov: CovarianceEstimates,
    n: int,
    alpha_level: float = 0.05,
    *,
    settings: FusionSettings | None = None,
    p: float | None = None,
    N: int | None = None,
) -> FqteResult:
    """Fused estimate with plug-in variance and Wald intervals at level ``1 - alpha_level``."""
    settings = settings or load_settings().fusion
    if not 0.0 < alpha_level < 1.0:
        raise ConfigError(f"alpha level out of range: {alpha_level}")
    if cov.rho_hat.shape[0] != calib.c_hat.shape[0]:
        raise DimensionMismatchError(
            f"cross-covariance has length {cov.rho_hat.shape[0]}, calibration vector {calib.c_hat.shape[0]}"
        )

    projection, regularized = projection_coefficients(cov.sigma_ep_hat, cov.rho_hat, settings.eig_rtol)
    gain = max(float(cov.rho_hat @ projection), 0.0)
    sigma_sq = cov.sigma_v_sq_hat - gain
    if sigma_sq < 0.0:
        log.warning("fused variance %.3g is negative after rounding; floored at 0", sigma_sq)
        sigma_sq = 0.0
    delta_p = float(delta_v - projection @ calib.c_hat)

    confidence = 1.0 - alpha_level
    se = float(np.sqrt(sigma_sq / n))
    se_v = float(np.sqrt(cov.sigma_v_sq_hat / n))
    return FqteResult(
        delta_p=delta_p,
        delta_v=float(delta_v),
        sigma_sq=sigma_sq,
        sigma_v_sq=cov.sigma_v_sq_hat,
        se=se,
        se_v=se_v,
        ci=_wald(delta_p, se, confidence),
        ci_v=_wald(float(delta_v), se_v, confidence),
        efficiency_gain=gain,
        regularized=regularized,
        c_hat=calib.c_hat,
        projection=projection,
        confidence=confidence,
        n=n,
        N=N,
        p=p,
        p_cal=calib.p_cal,
    )


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityPoint:
    delta: np.ndarray
    estimate: float
    ci: tuple[float, float]

    def to_document(self) -> dict[str, Any]:
        return {"delta": self.delta.tolist(), "estimate": self.estimate, "ci": list(self.ci)}


def sensitivity_curve(result: FqteResult, delta_grid: Sequence[float | Sequence[float]]) -> list[SensitivityPoint]:
    """Fused estimate when the calibration vector is allowed a bias ``delta``.

    A scalar grid entry is broadcast to every calibration component. The
    variance, and so the interval width, does not depend on ``delta``.
    """
    width = result.c_hat.shape[0]
    points = []
    for entry in delta_grid:
        delta = np.asarray(entry, dtype=float)
        if delta.ndim == 0:
            delta = np.full(width, float(delta))
        if delta.shape != (width,):
            raise DimensionMismatchError(f"sensitivity vector has length {delta.size}, expected {width}")
        estimate = float(result.delta_v - result.projection @ (result.c_hat - delta))
        points.append(SensitivityPoint(delta=delta, estimate=estimate, ci=_wald(estimate, result.se, result.confidence)))
    return points
