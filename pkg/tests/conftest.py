import numpy as np
import pytest

from tve.data import Dataset, DgdSpec, simulate
from tve.learners import LearnerSpec, NuisanceFit, fit_nuisances, make_fit


def constant_fit(n, q=0.5, g=0.5):
    return make_fit(np.full(n, q), np.full(n, q), np.full(n, g))


def balanced_dataset(reps=1):
    """Every (A, Y) cell once per rep; W is a single dummy column."""
    a = np.tile([0, 0, 1, 1], reps)
    y = np.tile([0, 1, 0, 1], reps)
    return Dataset(np.zeros((4 * reps, 1)), a, y)


def random_fit(n, rng):
    return make_fit(rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, n), rng.uniform(0.1, 0.9, n))


def random_dataset(n, rng, p=2):
    return Dataset(rng.random((n, p)), rng.integers(0, 2, n), rng.integers(0, 2, n))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def sim500():
    """Simple DGD, n=500, beta_p=0 with its fitted nuisances."""
    d, oracle = simulate(DgdSpec("simple", 0.0, 0.0), 500, 3)
    return d, oracle, fit_nuisances(d, LearnerSpec(), seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
