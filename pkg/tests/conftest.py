import numpy as np
import pytest

from nvmesr.linalg import gen_poisson_7pt

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def poisson8():
    return gen_poisson_7pt(8, 8, 8)


@pytest.fixture(scope="session")
def poisson4():
    return gen_poisson_7pt(4, 4, 4)


def random_spd(rng, n, density=0.3):
    """Sparse-ish SPD matrix: symmetric pattern made diagonally dominant."""
    M = rng.uniform(-1.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    M = np.triu(M, 1)
    M = M + M.T
    M[np.diag_indices(n)] = np.abs(M).sum(axis=1) + rng.uniform(0.5, 2.0, n)
    return M


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
