import numpy as np
import pytest

from wc4dvar.criteria import DesignEvaluator
from wc4dvar.models import ADConfig, HeatConfig, ad2d_problem, heat1d_problem, random_problem


@pytest.fixture(scope="session")
def heat():
    """The desk 1D heat instance (128 cells, 28 sensors, 11 time blocks)."""
    return heat1d_problem(HeatConfig(), seed=0)


@pytest.fixture(scope="session")
def heat_evaluator(heat):
    return DesignEvaluator(heat.problem)


@pytest.fixture(scope="session")
def heat12():
    """Reduced 1D instance with 12 candidate sensors."""
    return heat1d_problem(HeatConfig(n_sensors=12), seed=0)


@pytest.fixture(scope="session")
def ad2d():
    return ad2d_problem(ADConfig(), seed=0)


@pytest.fixture
def small():
    return random_problem(4, 3, 3, seed=11)


def dense_matrix(op):
    return op.densify()


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
