import math
import sys

import pytest
from hypothesis import HealthCheck, settings

from cavity_bistability.model import PhysicalParams, with_cooperativity

# compiled kernels make first calls slow; deadlines would only measure the JIT
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def lambda_params(c, **kw):
    base = dict(gamma31=0.5, gamma32=0.5, n_atoms=1000)
    base.update(kw)
    return with_cooperativity(PhysicalParams(**base), c)


def two_level_params(c, epsilon=0.0, n_atoms=1000, gamma=1.0):
    base = PhysicalParams(gamma31=gamma, gamma32=0.0, n_atoms=n_atoms, epsilon=epsilon)
    return with_cooperativity(base, c)


@pytest.fixture
def fig2a():
    return lambda_params(6, delta_p=0.1, omega_c=0.3)


@pytest.fixture
def fig6():
    return lambda_params(5, omega_c=0.05, epsilon=math.sqrt(5))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
