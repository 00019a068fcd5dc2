import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ella.autodiff import ArchDescriptor, Dense, FlatParams, init_params, mlp
from ella.likelihoods import LikelihoodHead

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def linear_model(theta):
    """Scalar linear model ``g(x) = theta^T x`` without bias (a Dense layer with b=0 frozen in)."""
    theta = np.asarray(theta, dtype=float)
    arch = ArchDescriptor((theta.size,), (Dense(theta.size, 1),))
    return FlatParams(np.concatenate([theta, [0.0]]), arch)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_problem(rng):
    """Tiny categorical problem: tanh MLP with P=47, N=7, C=3."""
    arch = mlp(2, [7], 3, "tanh")
    params = init_params(arch, 3)
    X = rng.standard_normal((7, 2))
    Y = rng.integers(0, 3, size=7)
    return params, X, Y, LikelihoodHead.categorical(3)


@pytest.fixture
def small_regression(rng):
    arch = mlp(1, [6, 6], 1, "tanh")
    params = init_params(arch, 5)
    X = rng.uniform(-2, 2, size=(9, 1))
    Y = np.sin(2 * X) + 0.3 * rng.standard_normal((9, 1))
    return params, X, Y, LikelihoodHead.gaussian(0.2)


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
