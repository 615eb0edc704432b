import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from carbontrace.dispatch import solve_baseline
from carbontrace.flow import DisconnectedNetworkError, compute_ptdf, dc_power_flow, line_flows
from carbontrace.grid import BUILTIN_CASES, Bus, Line, Network, load_builtin

from conftest import make_network


def test_two_bus_ptdf(two_bus):
    ptdf = compute_ptdf(two_bus)
    np.testing.assert_array_equal(ptdf.values, [[1.0, 0.0]])
    np.testing.assert_allclose(line_flows(ptdf, [50.0, -50.0]), [50.0])


def test_ring3_against_angle_solve(ring3):
    ptdf = compute_ptdf(ring3)
    inj = np.array([1.0, 0.0, -1.0])
    _, oracle = dc_power_flow(ring3, inj)
    np.testing.assert_allclose(ptdf.column(1), oracle, atol=1e-12)
    # equal reactances: two-thirds over the direct line, one third around
    np.testing.assert_allclose(ptdf.column(1), [1 / 3, 1 / 3, 2 / 3], atol=1e-12)


@pytest.mark.parametrize("name", BUILTIN_CASES)
def test_slack_column_zero(name):
    net = load_builtin(name)
    ptdf = compute_ptdf(net)
    assert np.all(ptdf.column(net.slack_bus) == 0.0)
    assert np.all(np.isfinite(ptdf.values))


def test_zero_injection_zero_flow(case30_ptdf):
    assert np.all(line_flows(case30_ptdf, np.zeros(30)) == 0.0)


def test_dimension_mismatch(case30_ptdf):
    with pytest.raises(ValueError, match="shape"):
        line_flows(case30_ptdf, np.zeros(29))


def test_solved_dispatch_flows_match_angle_solve(case5):
    ptdf = compute_ptdf(case5)
    res = solve_baseline(case5, case5.base_loads, ptdf)
    inj = case5.nodal_injections(res.p_g, case5.base_loads)
    _, oracle = dc_power_flow(case5, inj)
    np.testing.assert_allclose(res.p_l, oracle, atol=1e-8)


def test_random_balanced_injections_case30(case30, case30_ptdf, rng):
    for _ in range(100):
        inj = rng.normal(0, 50, 30)
        inj -= inj.mean()
        _, oracle = dc_power_flow(case30, inj)
        np.testing.assert_allclose(line_flows(case30_ptdf, inj), oracle, atol=1e-8)


def test_radial_ptdf_bounded():
    net = make_network({1: 0, 2: 5, 3: 5, 4: 5}, [(1, 2, 0.1, None), (2, 3, 0.3, None), (2, 4, 0.2, None)],
                       [(1, 0, 50, 0, (0, 1, 0))], slack=1)
    vals = compute_ptdf(net).values
    assert np.all(np.abs(vals) <= 1 + 1e-12)


def test_disconnected_network_named():
    net = Network(
        [Bus(1, 0, True), Bus(2, 1), Bus(3, 1), Bus(4, 1)],
        [Line(1, 2, 0.1), Line(3, 4, 0.1)],
        [],
    )
    with pytest.raises(DisconnectedNetworkError) as info:
        compute_ptdf(net)
    assert info.value.components == [[3, 4]]
    assert "[3, 4]" in str(info.value)


def test_csv_dump(tmp_path, case30_ptdf):
    path = tmp_path / "ptdf.csv"
    case30_ptdf.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["line", "from_bus", "to_bus"]
    assert [int(b) for b in rows[0][3:]] == list(range(1, 31))
    assert len(rows) == 42
    np.testing.assert_allclose([float(v) for v in rows[5][3:]], case30_ptdf.values[4])


def test_ptdf_is_read_only(case30_ptdf):
    with pytest.raises(ValueError):
        case30_ptdf.values[0, 0] = 1.0


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 30, elements=st.floats(-200, 200)),
    arrays(np.float64, 30, elements=st.floats(-200, 200)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_linearity(case30_ptdf, p1, p2, a, b):
    lhs = line_flows(case30_ptdf, a * p1 + b * p2)
    rhs = a * line_flows(case30_ptdf, p1) + b * line_flows(case30_ptdf, p2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
