from __future__ import annotations

import numpy as np
import pytest

from lib.data.fused import FusedDataset, QuantileSpec
from lib.fqte.drq import EstimatingContext, build_contexts
from lib.fqte.features import full_linear, x_linear
from lib.fqte.settings import FqteSettings, load_settings
from lib.fqte.sim import DgpConfig, generate


@pytest.fixture(scope="session")
def settings() -> FqteSettings:
    return load_settings()


@pytest.fixture(scope="session")
def raw_settings() -> FqteSettings:
    """Defaults with Hajek normalization off."""
    return load_settings(overrides={"weights": {"normalize": False}})


@pytest.fixture(scope="session")
def fused() -> FusedDataset:
    return generate(DgpConfig(n=600, N=2400, seed=11)).dataset


@pytest.fixture(scope="session")
def validation_contexts(fused: FusedDataset, settings: FqteSettings) -> dict[int, EstimatingContext]:
    return build_contexts(fused.validation, full_linear(), full_linear(), settings)


@pytest.fixture(scope="session")
def pooled_contexts(fused: FusedDataset, settings: FqteSettings) -> dict[int, EstimatingContext]:
    return build_contexts(fused.pooled(), x_linear(), x_linear(), settings)


@pytest.fixture
def median_spec() -> QuantileSpec:
    return QuantileSpec(p=0.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240101)
