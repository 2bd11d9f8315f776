import numpy as np
import pytest

from flowaccel.flows import GaussianMixture, GMMField
from flowaccel.net import ResidualFlowNet


def helix_points(a=1.0, b=0.25, turns=2.0, n=1000):
    """Helix r(u) = (a cos u, a sin u, b u) sampled uniformly in u."""
    u = np.linspace(0.0, 2 * np.pi * turns, n)
    return np.column_stack([a * np.cos(u), a * np.sin(u), b * u])


@pytest.fixture
def helix():
    return helix_points()


@pytest.fixture(scope="session")
def small_gmm():
    return GaussianMixture.random(d=4, k=3, radius=3.0, scale=0.4, seed=7)


@pytest.fixture(scope="session")
def small_field(small_gmm):
    return GMMField(small_gmm)


@pytest.fixture(scope="session")
def toy_net():
    return ResidualFlowNet.init(d=6, n_blocks=3, width=16, emb_dim=8, seed=3)


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; the summary is printed after the run."""

    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
