"""Shared scenario fixtures for the test suite."""

import pytest

from queuereg import (
    AffineScale,
    ConstantMarginal,
    Deterministic,
    Exponential,
    LinearRemaining,
    PoissonSubordinator,
    RetrialConfig,
    ScenarioConfig,
    TypedValueModel,
    Uniform,
)


@pytest.fixture(scope="session")
def scenario_det():
    """Constant marginal value 2 up to a deterministic horizon 10, lam=1/2."""
    return ScenarioConfig(lam=0.5, gamma=1.0), ConstantMarginal(2.0, Deterministic(10.0))


@pytest.fixture(scope="session")
def scenario_exp():
    """Constant marginal value with an exponential horizon."""
    return ScenarioConfig(lam=0.5, gamma=1.0), ConstantMarginal(1.0, Exponential(1.0))


@pytest.fixture(scope="session")
def scenario_unif():
    """Value linear in the remaining size, horizon uniform on [0, 1]."""
    return ScenarioConfig(lam=0.5, gamma=1.0), LinearRemaining(Uniform(0.0, 1.0))


@pytest.fixture(scope="session")
def scenario_poisson():
    """Value kappa minus a unit-jump Poisson process."""
    return ScenarioConfig(lam=0.4, gamma=1.0), PoissonSubordinator(2.5, 1.0)


@pytest.fixture(scope="session")
def retrial_cfg():
    return RetrialConfig(theta=1.0, delta=1.0)


@pytest.fixture(scope="session")
def balking_bundle():
    """Types uniform on (0, 1), multiplicative scale t, short constant-value base."""
    typed = TypedValueModel(
        type_dist=Uniform(0.0, 1.0),
        scale=AffineScale(0.0, 1.0),
        base=ConstantMarginal(2.0, Deterministic(0.5)),
    )
    return ScenarioConfig(lam=1.0, gamma=1.0), typed
