import math

import numpy as np
import pytest

from skistunt import gp as gpmod
from skistunt.cli import default_gp_path
from skistunt.vehicle import VehicleParams


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture(scope="session")
def bundled_gp():
    return gpmod.GpModel.load(default_gp_path())


@pytest.fixture(scope="session")
def small_gp(params):
    """Quick 200-point fit on the synthetic residual, good enough for structural checks."""
    data = gpmod.collect_training_data(params, 200, seed=3)
    return gpmod.fit(data, restarts=1, max_iter=60, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def deg(x):
    return math.radians(x)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
