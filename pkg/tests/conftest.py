import warnings

import numpy as np
import pytest

from poolprev.dataset import PoolDataset
from poolprev.simulator import SimConfig, simulate


@pytest.fixture(scope="session")
def default_sim():
    """Seeded default survey: (dataset, ground truth)."""
    return simulate(SimConfig(seed=1))


@pytest.fixture(scope="session")
def default_data(default_sim):
    return default_sim[0]


def pools(sizes, results, **columns):
    return PoolDataset(np.asarray(sizes), np.asarray(results), columns,
                       covariate_columns=tuple(columns))


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, log, number, title):
        self.log, self.number, self.title = log, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} criterion {self.number:>2}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        self.log.append(line)
        return False


@pytest.fixture
def criterion(request):
    """Context manager that records a PASS/FAIL line for an acceptance criterion."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title: _Criterion(log, number, title)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
