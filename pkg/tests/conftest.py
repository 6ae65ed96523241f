import numpy as np
import pytest

from turnpike import InteractionKernel, ModelParams, OcpProblem, TimeGrid
from turnpike.rng import SplitMix64

ACCEPTANCE_RESULTS = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size scenarios")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="full-size scenario; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def desk_problem(seed=0):
    """Test-1 configuration scaled to N=10, M=100."""
    params = ModelParams(10, 1, [0.5], 0.1, InteractionKernel.QUADRATIC)
    grid = TimeGrid(0.0, 5.0, 0.05)
    initial = SplitMix64(seed).uniform(0.0, 1.0, (10, 1))
    kb = float(np.max(InteractionKernel.QUADRATIC.matrix(initial)))
    return OcpProblem(params.replace(kernel_bound=kb), grid, initial)


@pytest.fixture(scope="session")
def desk_solution():
    from turnpike import solve_ocp

    problem = desk_problem()
    return problem, solve_ocp(problem)
