"""Pytest configuration and fixtures."""

import pytest

from app.schemas.simulation import SimConfig, SimMetrics
from app.schemas.system import PolicyConfig, PowerPolicy, SelectionPolicy, SystemParams
from app.services.channel import DerivedConstants, derive_constants
from app.services.experiment import db_to_linear
from app.services.simulator import SimulationService

CANONICAL_SLOTS = 1_000_000


def make_params(**overrides: float) -> SystemParams:
    """Reference operating point: N=2, lambda_p=0.1, R0=2, P0/N0=10 dB, Pmax/N0=7 dB, sigma_p^2=0.25."""
    values = {
        "n_su": 2,
        "lambda_p": 0.1,
        "rate_r0": 2.0,
        "p0_over_n0": db_to_linear(10.0),
        "pmax_over_n0": db_to_linear(7.0),
        "sigma_p_sq": 0.25,
    }
    values.update(overrides)
    return SystemParams(**values)


@pytest.fixture(name="params")
def params_fixture() -> SystemParams:
    """Reference system parameters."""
    return make_params()


@pytest.fixture(name="consts")
def consts_fixture(params: SystemParams) -> DerivedConstants:
    """Derived constants at the reference operating point."""
    return derive_constants(params)


@pytest.fixture(name="ep_bsl")
def ep_bsl_fixture() -> PolicyConfig:
    return PolicyConfig(power=PowerPolicy.EP, selection=SelectionPolicy.BSL)


@pytest.fixture(name="ap_bsl")
def ap_bsl_fixture() -> PolicyConfig:
    return PolicyConfig(power=PowerPolicy.AP, selection=SelectionPolicy.BSL)


@pytest.fixture(name="ep_bsl_run", scope="session")
def ep_bsl_run_fixture() -> SimMetrics:
    """A full-length EP-BSL simulation at the reference point, shared by the closure tests."""
    config = SimConfig(
        params=make_params(),
        policy=PolicyConfig(power=PowerPolicy.EP, selection=SelectionPolicy.BSL),
        slots=CANONICAL_SLOTS,
        seed=101,
    )
    return SimulationService().run(config)


@pytest.fixture(name="ap_bsl_run", scope="session")
def ap_bsl_run_fixture() -> SimMetrics:
    """A full-length AP-BSL simulation at the reference point."""
    config = SimConfig(
        params=make_params(),
        policy=PolicyConfig(power=PowerPolicy.AP, selection=SelectionPolicy.BSL),
        slots=CANONICAL_SLOTS,
        seed=202,
    )
    return SimulationService().run(config)
