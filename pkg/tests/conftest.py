import numpy as np
import pytest

from delayid.basis import CandidateCatalog
from delayid.dde_core import TrajectoryData

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion.

    Lines are echoed immediately and repeated in the terminal summary, so
    they show up in plain ``pytest -v`` output as well.
    """

    def record(number, name, ok, detail=""):
        line = f"AC{number} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _CRITERIA.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA, key=lambda item: item[0]):
            terminalreporter.write_line(line)


@pytest.fixture
def toy_series():
    """Short scalar series with a target driven by the plain state only."""
    rng = np.random.default_rng(3)
    N = 8
    x = np.sin(np.arange(N) * 0.9) + 0.3 * rng.standard_normal(N)
    y = 0.8 * x + 0.5 * rng.standard_normal(N)
    return x, y


@pytest.fixture
def toy_data(toy_series):
    x, y = toy_series
    return TrajectoryData(1.0, x[:, None], derivatives=y[:, None])


@pytest.fixture
def linear_catalog():
    return CandidateCatalog.parse(["x1", "x1_tau"])
