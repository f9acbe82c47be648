"""Calibration vector linking the validation sample to the pooled sample.

For every arm and calibration level the confounded estimating equation is
solved on the pooled sample, then its per-row values are averaged over the
validation rows. The resulting ``c_hat`` estimates zero; its correlation with
the validation-only estimator is what the fusion step exploits.

Columns are ordered arm 1 first, then arm 0, with levels ascending inside
each block.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from lib.data.fused import FusedDataset, QuantileSpec, Sample
from lib.fqte.drq import (
    DrQuantileResult,
    EstimatingContext,
    estimating_values,
    inverse_weights,
    solve_dr_quantile,
)
from lib.fqte.errors import ConfigError

ARM_ORDER = (1, 0)


@dataclass(frozen=True)
class CalibrationResult:
    c_hat: np.ndarray
    phi_validation: np.ndarray
    phi_entire: np.ndarray
    conf_quantiles: np.ndarray
    solves: tuple[DrQuantileResult, ...]
    p_cal: tuple[float, ...]

    @property
    def d(self) -> int:
        return len(self.p_cal)

    def arm_block(self, arm: int) -> slice:
        start = ARM_ORDER.index(arm) * self.d
        return slice(start, start + self.d)


def column_means(matrix: np.ndarray) -> np.ndarray:
    """Column means with index-ascending compensated summation."""
    rows = matrix.shape[0]
    return np.array([math.fsum(matrix[:, j].tolist()) / rows for j in range(matrix.shape[1])])


def calibration_from_samples(
    validation: Sample,
    entire: Sample,
    spec: QuantileSpec,
    contexts: Mapping[int, EstimatingContext],
) -> CalibrationResult:
    """Solve the confounded equations on ``entire`` and average them over ``validation``.

    Validation rows are evaluated at the pooled-sample estimates, including
    the pooled-sample weight normalization.
    """
    for arm in ARM_ORDER:
        if arm not in contexts:
            raise ConfigError(f"missing confounded context for arm {arm}")
        if contexts[arm].family != "confounded":
            raise ConfigError("calibration needs X-only (confounded) contexts")

    columns_entire: list[np.ndarray] = []
    columns_validation: list[np.ndarray] = []
    solves: list[DrQuantileResult] = []
    for arm in ARM_ORDER:
        ctx = contexts[arm]
        entire_weights = inverse_weights(ctx, entire)
        validation_weights = inverse_weights(ctx, validation, weight_scale=entire_weights.scale)
        for level in spec.p_cal:
            solved = solve_dr_quantile(ctx, entire, level)
            solves.append(solved)
            columns_entire.append(estimating_values(ctx, entire, solved.q_hat, level, entire_weights))
            columns_validation.append(estimating_values(ctx, validation, solved.q_hat, level, validation_weights))

    phi_validation = np.column_stack(columns_validation)
    return CalibrationResult(
        c_hat=column_means(phi_validation),
        phi_validation=phi_validation,
        phi_entire=np.column_stack(columns_entire),
        conf_quantiles=np.array([s.q_hat for s in solves]),
        solves=tuple(solves),
        p_cal=spec.p_cal,
    )


def compute_calibration(
    ds: FusedDataset, spec: QuantileSpec, contexts: Mapping[int, EstimatingContext]
) -> CalibrationResult:
    """Calibration vector for a fused dataset; ``contexts`` are fitted on ``ds.pooled()``."""
    return calibration_from_samples(ds.validation.drop_s(), ds.pooled(), spec, contexts)
