import numpy as np
import pytest
from hypothesis import settings

from branchbsde.branching import BranchingConfig, Prior, constant_prior
from branchbsde.grid import GridFunction
from branchbsde.problems import get_problem
from branchbsde.sde import paper_coefficients

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture
def paper_coef():
    return paper_coefficients()


@pytest.fixture
def paper_problem():
    return get_problem("paper-example")


def cos_grid(box=((-2.0, 2.0),), dx=0.05, scale=0.5):
    return GridFunction.sample(lambda x: scale * (1 + np.cos(x[:, 0])), list(box), dx)


@pytest.fixture
def paper_setup(paper_problem):
    """Driver, terminal grid at t = 1 and an exact-gradient prior on [0.95, 1]."""
    drv = paper_problem.build_driver(20, 10, 0.2, [[-1.6, 1.6]])
    g = GridFunction.sample(paper_problem.terminal, [[-1.6, 1.6]], 0.1)
    du = g.with_values((-np.sin(g.nodes()[:, 0]) / 2).reshape(g.shape + (1,)))
    prior = Prior(0.95, 0.05, [g, g], [du, du])
    return paper_problem, drv, g, prior


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    lines = request.config.stash[_CRITERIA]

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
