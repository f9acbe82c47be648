"""Design-matrix builders for the working models.

A :class:`FeatureMap` turns the covariate blocks of a sample into the design
matrix a model is fitted on. Maps come in two families: ``full`` maps read
both X and S (validation-sample models), ``x_only`` maps read X alone
(confounded models on the pooled sample).
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np

from lib.data.fused import Record, Sample
from lib.fqte.errors import ConfigError

Family = Literal["full", "x_only"]
Transform = Callable[[np.ndarray, np.ndarray | None], np.ndarray]


@dataclass(frozen=True)
class FeatureMap:
    name: str
    family: Family
    transform: Transform
    intercept: bool = True

    def design(self, x: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
        """Design matrix for covariate blocks ``x`` (n, p_x) and ``s`` (n, p_s)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.family == "full":
            if s is None:
                raise ConfigError(f"feature map {self.name!r} needs S covariates")
            s = np.atleast_2d(np.asarray(s, dtype=float))
        covariates = self.transform(x, s if self.family == "full" else None)
        if self.intercept:
            return np.column_stack([np.ones(x.shape[0]), covariates])
        return np.ascontiguousarray(covariates)

    def sample_design(self, sample: Sample) -> np.ndarray:
        return self.design(sample.x, sample.s)

    def record_design(self, record: Record) -> np.ndarray:
        s = None if record.s is None else np.asarray(record.s)[None, :]
        return self.design(np.asarray(record.x)[None, :], s)[0]


def _linear_full(x: np.ndarray, s: np.ndarray | None) -> np.ndarray:
    if s is None:
        raise ConfigError("full_linear needs S covariates")
    return np.column_stack([x, s])


def _linear_x(x: np.ndarray, _s: np.ndarray | None) -> np.ndarray:
    return x


_DISTORTIONS: tuple[Callable[[np.ndarray], np.ndarray], ...] = (
    lambda v: np.exp(v / 2.0),
    np.square,
    np.abs,
)


def _distorted_full(x: np.ndarray, s: np.ndarray | None) -> np.ndarray:
    if s is None:
        raise ConfigError("distorted needs S covariates")
    # S columns cycle through exp(s/2), s^2, |s|; X enters linearly.
    bent = [_DISTORTIONS[j % len(_DISTORTIONS)](s[:, j]) for j in range(s.shape[1])]
    return np.column_stack([x, *bent])


def full_linear(intercept: bool = True) -> FeatureMap:
    """(1, X, S): the correctly specified design for the simulation DGP."""
    return FeatureMap("full_linear", "full", _linear_full, intercept)


def x_linear(intercept: bool = True) -> FeatureMap:
    """(1, X): confounded models on the pooled sample."""
    return FeatureMap("x_linear", "x_only", _linear_x, intercept)


def distorted(intercept: bool = True) -> FeatureMap:
    """(1, X, exp(S1/2), S2^2, |S3|, ...): default misspecified design."""
    return FeatureMap("distorted", "full", _distorted_full, intercept)


FEATURE_MAPS: dict[str, Callable[[bool], FeatureMap]] = {
    "full_linear": full_linear,
    "x_linear": x_linear,
    "distorted": distorted,
}


def feature_map(name: str, intercept: bool = True) -> FeatureMap:
    try:
        return FEATURE_MAPS[name](intercept)
    except KeyError:
        raise ConfigError(f"unknown feature map {name!r}; choose from {sorted(FEATURE_MAPS)}") from None
