import logging
import math

import numpy as np
import pytest

from carbontrace.flow import compute_ptdf
from carbontrace.grid import Bus, CostModel, Generator, Line, Network, load_builtin


@pytest.fixture(autouse=True)
def _quiet_parser(caplog):
    caplog.set_level(logging.ERROR, logger="carbontrace.grid")


def make_network(loads, lines, gens, slack, base_mva=100.0):
    """loads: {bus: MW}; lines: [(f, t, x, limit)]; gens: [(bus, pmin, pmax, gamma, (a, b, c))]."""
    buses = [Bus(b, float(d), b == slack) for b, d in loads.items()]
    lns = [Line(f, t, x, math.inf if lim is None else lim) for f, t, x, lim in lines]
    gs = [Generator(b, lo, hi, gam, CostModel(*cost)) for b, lo, hi, gam, cost in gens]
    return Network(buses, lns, gs, base_mva)


@pytest.fixture
def two_bus():
    return make_network({1: 0.0, 2: 50.0}, [(1, 2, 0.1, None)], [(1, 0.0, 100.0, 1000.0, (0.0, 10.0, 0.0))], slack=2)


@pytest.fixture
def ring3():
    return make_network(
        {1: 0.0, 2: 40.0, 3: 60.0},
        [(1, 2, 0.1, None), (2, 3, 0.1, None), (1, 3, 0.1, None)],
        [(1, 0.0, 200.0, 900.0, (0.01, 10.0, 0.0)), (3, 0.0, 200.0, 500.0, (0.02, 12.0, 0.0))],
        slack=3,
    )


@pytest.fixture(scope="session")
def case30():
    return load_builtin("case30")


@pytest.fixture(scope="session")
def case30_ptdf(case30):
    return compute_ptdf(case30)


@pytest.fixture(scope="session")
def case5():
    return load_builtin("case5_3gen")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
