import numpy as np
import pytest

from critblowup import green

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def unit_ball_solver(tmp_path_factory):
    """Collocation solver for the unit 5-ball, built once per session."""
    cache = tmp_path_factory.mktemp("green-cache")
    return green.GreenSolver(green.DomainSpec(5), cache_dir=str(cache))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
