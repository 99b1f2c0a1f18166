import numpy as np
import pytest

from tiltlate.data import make_folds
from tiltlate.learners import LearnerSpec
from tiltlate.nuisance import fit_nuisances
from tiltlate.simulation import SimConfig, oracle_nuisances, simulate_dgp


@pytest.fixture(scope="session")
def sim2000():
    return simulate_dgp(SimConfig(2000, seed=11))


@pytest.fixture(scope="session")
def sim500():
    return simulate_dgp(SimConfig(500, seed=3))


@pytest.fixture(scope="session")
def kernel_fit(sim2000):
    folds = make_folds(sim2000.data.n, 5, 0)
    return fit_nuisances(sim2000.data, 0.5, LearnerSpec.kernel(), folds)


@pytest.fixture(scope="session")
def kernel_fit_neg(sim2000):
    folds = make_folds(sim2000.data.n, 5, 0)
    return fit_nuisances(sim2000.data, -0.5, LearnerSpec.kernel(), folds)


@pytest.fixture(scope="session")
def oracle_fit(sim2000):
    return oracle_nuisances(sim2000.data, sim2000.config, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
