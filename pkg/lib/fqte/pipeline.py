"""End-to-end FQTE estimation on a fused dataset.

fit (validation full-feature, pooled X-only) -> solve quantiles -> densities
-> influence values -> calibration -> covariances -> fusion -> sensitivity.

The stages are split so the Monte Carlo harness can reuse the pooled-sample
fits and calibration across scenarios and calibration sets.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from lib.data.fused import FusedDataset, QuantileSpec
from lib.fqte.calib import CalibrationResult, compute_calibration
from lib.fqte.drq import (
    DensityEstimate,
    DrQuantileResult,
    EstimatingContext,
    InfluenceSet,
    build_contexts,
    estimate_density,
    influence_psi,
    solve_dr_quantile,
)
from lib.fqte.features import FeatureMap, full_linear, x_linear
from lib.fqte.fuse import (
    CovarianceEstimates,
    FqteResult,
    SensitivityPoint,
    estimate_covariances,
    fuse_estimate,
    sensitivity_curve,
)
from lib.fqte.settings import FqteSettings, load_settings


@dataclass(frozen=True)
class ArmEstimate:
    solve: DrQuantileResult
    density: DensityEstimate
    psi: np.ndarray

    @property
    def q_hat(self) -> float:
        return self.solve.q_hat


@dataclass(frozen=True)
class FqteRun:
    result: FqteResult
    arms: Mapping[int, ArmEstimate]
    calibration: CalibrationResult
    covariances: CovarianceEstimates
    sensitivity: list[SensitivityPoint] = field(default_factory=list)

    def to_document(self) -> dict[str, Any]:
        document = self.result.to_document()
        document["q_hat"] = {str(arm): est.q_hat for arm, est in sorted(self.arms.items(), reverse=True)}
        document["conf_quantiles"] = self.calibration.conf_quantiles.tolist()
        if self.sensitivity:
            document["sensitivity"] = [point.to_document() for point in self.sensitivity]
        return document


def validation_contexts(
    ds: FusedDataset,
    settings: FqteSettings,
    outcome_map: FeatureMap | None = None,
    ps_map: FeatureMap | None = None,
    normalize_weights: bool | None = None,
) -> dict[int, EstimatingContext]:
    intercept = settings.features.intercept
    return build_contexts(
        ds.validation,
        outcome_map or full_linear(intercept),
        ps_map or full_linear(intercept),
        settings,
        normalize_weights,
    )


def confounded_contexts(
    ds: FusedDataset, settings: FqteSettings, normalize_weights: bool | None = None
) -> dict[int, EstimatingContext]:
    fmap = x_linear(settings.features.intercept)
    return build_contexts(ds.pooled(), fmap, fmap, settings, normalize_weights)


def validation_arms(
    ds: FusedDataset, level: float, contexts: Mapping[int, EstimatingContext], settings: FqteSettings
) -> dict[int, ArmEstimate]:
    """Solve, density and influence values for both arms on the validation sample."""
    arms: dict[int, ArmEstimate] = {}
    for arm in (1, 0):
        ctx = contexts[arm]
        solved = solve_dr_quantile(ctx, ds.validation, level)
        density = estimate_density(ds.validation, ctx, solved.q_hat, settings.density)
        psi = influence_psi(ctx, ds.validation, solved.q_hat, level, density, settings.fusion.max_condition)
        arms[arm] = ArmEstimate(solve=solved, density=density, psi=psi)
    return arms


def fuse_arms(
    ds: FusedDataset,
    spec: QuantileSpec,
    arms: Mapping[int, ArmEstimate],
    calibration: CalibrationResult,
    settings: FqteSettings,
    confidence: float | None = None,
    delta_grid: Sequence[float | Sequence[float]] | None = None,
) -> FqteRun:
    confidence = settings.fusion.confidence if confidence is None else confidence
    psi_sets = {
        arm: InfluenceSet(arm=arm, psi=est.psi[:, None], phi=calibration.phi_entire[:, calibration.arm_block(arm)])
        for arm, est in arms.items()
    }
    covariances = estimate_covariances(psi_sets, calibration, ds.nu, settings.fusion.center_rho)
    result = fuse_estimate(
        arms[1].q_hat - arms[0].q_hat,
        calibration,
        covariances,
        ds.n,
        1.0 - confidence,
        settings=settings.fusion,
        p=spec.p,
        N=ds.N,
    )
    sensitivity = sensitivity_curve(result, delta_grid) if delta_grid else []
    return FqteRun(
        result=result, arms=arms, calibration=calibration, covariances=covariances, sensitivity=sensitivity
    )


def estimate(
    ds: FusedDataset,
    spec: QuantileSpec,
    settings: FqteSettings | None = None,
    *,
    normalize_weights: bool | None = None,
    confidence: float | None = None,
    delta_grid: Sequence[float | Sequence[float]] | None = None,
    outcome_map: FeatureMap | None = None,
    ps_map: FeatureMap | None = None,
) -> FqteRun:
    """Fused QTE at level ``spec.p`` calibrated on the levels ``spec.p_cal``."""
    settings = settings or load_settings()
    v_contexts = validation_contexts(ds, settings, outcome_map, ps_map, normalize_weights)
    c_contexts = confounded_contexts(ds, settings, normalize_weights)
    arms = validation_arms(ds, spec.p, v_contexts, settings)
    calibration = compute_calibration(ds, spec, c_contexts)
    return fuse_arms(ds, spec, arms, calibration, settings, confidence, delta_grid)
