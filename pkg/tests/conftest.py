import numpy as np
import pytest

from qtraj.reference import KeepSwitchModel, random_valid_family

P = 0.3
Q = 0.7

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def ks():
    return KeepSwitchModel(P)


@pytest.fixture(scope="session")
def ks_family(ks):
    return ks.family


@pytest.fixture(scope="session")
def rand_family():
    return random_valid_family(2, 2, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_state(rng, d):
    z = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    return z / np.linalg.norm(z)


def random_density(rng, d, rank=None):
    rank = rank or d
    z = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = z @ z.conj().T
    return rho / np.trace(rho).real


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
