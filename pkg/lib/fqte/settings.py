"""Estimator and simulation settings loaded from YAML.

Defaults ship with the package in ``data/defaults.yaml``. A user file (or an
in-memory mapping) is merged over them one section at a time, so overriding
``fusion.confidence`` leaves the other ``fusion`` keys untouched.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from lib.fqte.errors import ConfigError

DATA_DIR = Path(__file__).parent / "data"
DEFAULTS_PATH = DATA_DIR / "defaults.yaml"


@dataclass(frozen=True)
class LogisticSettings:
    tol: float
    max_iter: int
    max_halvings: int
    separation_norm: float


@dataclass(frozen=True)
class OutcomeSettings:
    degenerate_sigma: float


@dataclass(frozen=True)
class WeightSettings:
    normalize: bool
    propensity_clip: float


@dataclass(frozen=True)
class DensitySettings:
    floor: float
    min_arm_size: int


@dataclass(frozen=True)
class FusionSettings:
    eig_rtol: float
    confidence: float
    center_rho: bool
    max_condition: float


@dataclass(frozen=True)
class FeatureSettings:
    intercept: bool


@dataclass(frozen=True)
class SimulationSettings:
    ps_coef: tuple[float, ...]
    or_coef: tuple[float, ...]
    sd_treated: float
    sd_control: float
    oracle_draws: int
    oracle_seed: int
    max_failure_rate: float
    replications: int
    seed: int


@dataclass(frozen=True)
class FqteSettings:
    logistic: LogisticSettings
    outcome: OutcomeSettings
    weights: WeightSettings
    density: DensitySettings
    fusion: FusionSettings
    features: FeatureSettings
    simulation: SimulationSettings

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_SECTION_TYPES: dict[str, type] = {
    "logistic": LogisticSettings,
    "outcome": OutcomeSettings,
    "weights": WeightSettings,
    "density": DensitySettings,
    "fusion": FusionSettings,
    "features": FeatureSettings,
    "simulation": SimulationSettings,
}


def _load_yaml(path: Path) -> dict[str, Any]:
    with open(path) as f:
        loaded = yaml.safe_load(f) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"settings file {path} must contain a mapping at the top level", path=str(path))
    return loaded


def _merge(base: dict[str, Any], override: Mapping[str, Any], source: str) -> dict[str, Any]:
    merged = {name: dict(section) for name, section in base.items()}
    for section, values in override.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown settings section {section!r} in {source}", section=section)
        if not isinstance(values, Mapping):
            raise ConfigError(f"settings section {section!r} must be a mapping in {source}", section=section)
        known = {f.name for f in fields(_SECTION_TYPES[section])}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown setting {section}.{key} in {source}", section=section, key=key)
            merged[section][key] = value
    return merged


def _build(section: str, values: dict[str, Any]) -> Any:
    cls = _SECTION_TYPES[section]
    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name not in values:
            raise ConfigError(f"missing setting {section}.{f.name}", section=section, key=f.name)
        value = values[f.name]
        if isinstance(value, list):
            value = tuple(float(v) for v in value)
        kwargs[f.name] = value
    return cls(**kwargs)


def load_settings(path: Path | None = None, overrides: Mapping[str, Any] | None = None) -> FqteSettings:
    """Return package defaults merged with an optional YAML file and mapping."""
    merged = _load_yaml(DEFAULTS_PATH)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"settings file not found: {path}", path=str(path))
        merged = _merge(merged, _load_yaml(Path(path)), str(path))
    if overrides:
        merged = _merge(merged, overrides, "overrides")

    settings = FqteSettings(**{name: _build(name, merged[name]) for name in _SECTION_TYPES})
    _validate(settings)
    return settings


def _validate(settings: FqteSettings) -> None:
    if not 0.0 < settings.fusion.confidence < 1.0:
        raise ConfigError(f"confidence level out of range: {settings.fusion.confidence}")
    if not 0.0 <= settings.weights.propensity_clip < 0.5:
        raise ConfigError(f"propensity_clip out of range: {settings.weights.propensity_clip}")
    if settings.logistic.max_iter < 1:
        raise ConfigError("logistic.max_iter must be at least 1")
    if settings.density.min_arm_size < 2:
        raise ConfigError("density.min_arm_size must be at least 2")
