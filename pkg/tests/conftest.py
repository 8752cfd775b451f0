import numpy as np
import pytest

from branchlil.fixtures import NAMES, load_fixture
from branchlil.model import BranchingModel, mean_generator
from branchlil.spectral import spectrum_for

RATES = np.array([0.25, 0.5, 1.0, 1.5, 2.0])


def random_model(rng: np.random.Generator, d: int | None = None) -> BranchingModel:
    """Irreducible supercritical model with rational (dyadic) entries."""
    while True:
        d = int(rng.integers(1, 5)) if d is None else d
        Q = np.zeros((d, d))
        for x in range(d):
            Q[x, (x + 1) % d] = rng.choice(RATES) if d > 1 else 0.0
            for y in range(d):
                if y != x and rng.random() < 0.4:
                    Q[x, y] = rng.choice(RATES)
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        beta = rng.choice([0.5, 1.0, 2.0], size=d)
        raw = rng.integers(0, 5, size=(d, 4)).astype(float)
        raw[:, 2] += 1
        off = raw / raw.sum(axis=1, keepdims=True)
        m = BranchingModel(d=d, Q=Q, beta=beta, offspring=off)
        if np.linalg.eigvals(mean_generator(m)).real.max() > 0.05:
            return m


@pytest.fixture(params=NAMES)
def fixture_name(request):
    return request.param


@pytest.fixture(scope="session")
def bases():
    return {n: (load_fixture(n),) + spectrum_for(load_fixture(n)) for n in NAMES}


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
