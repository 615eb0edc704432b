import csv
import json
import math

import numpy as np
import pytest

from carbontrace.dispatch import (
    CarbonOpfConfig,
    InfeasibleDispatchError,
    build_baseline_opf,
    build_carbon_opf,
    min_emission_dispatch,
    solve_angle_opf,
    solve_baseline,
    solve_capped_dispatch,
    solve_carbon_opf,
    solve_carbon_opf_batch,
)
from carbontrace.flow import compute_ptdf
from carbontrace.grid import LBS_PER_TON
from carbontrace.qp import check_kkt, solve_qp

from conftest import make_network


def share_factors(net, loads=None):
    d = net.base_loads if loads is None else loads
    return np.tile((d / d.sum())[:, None], (1, net.n_generators))


@pytest.fixture(scope="module")
def base30(case30, case30_ptdf):
    return solve_baseline(case30, case30.base_loads, case30_ptdf, permit_price=0.009)


def test_single_generator_meets_load(two_bus):
    res = solve_baseline(two_bus, two_bus.base_loads)
    np.testing.assert_allclose(res.p_g, [50.0], atol=1e-8)


def test_merit_order():
    net = make_network({1: 0, 2: 150}, [(1, 2, 0.1, None)],
                       [(1, 0, 100, 0, (0, 10, 0)), (2, 0, 100, 0, (0, 20, 0))], slack=2)
    res = solve_baseline(net, net.base_loads)
    np.testing.assert_allclose(res.p_g, [100.0, 50.0], atol=1e-7)


def test_binding_line_limit():
    net = make_network({1: 0, 2: 150}, [(1, 2, 0.1, 60)],
                       [(1, 0, 100, 0, (0, 10, 0)), (2, 0, 100, 0, (0, 20, 0))], slack=2)
    res = solve_baseline(net, net.base_loads)
    np.testing.assert_allclose(res.p_g, [60.0, 90.0], atol=1e-7)
    assert abs(res.p_l[0]) == pytest.approx(60.0, abs=1e-7)


def test_program_shape(case30, case30_ptdf):
    qp = build_baseline_opf(case30, case30.base_loads, case30_ptdf)
    n_limited = int(np.isfinite(case30.flow_limits).sum())
    assert qp.n_vars == case30.n_generators
    assert qp.n_eq == 1
    assert qp.n_ineq == n_limited  # each row is two-sided
    np.testing.assert_array_equal(qp.lower, case30.p_min)
    np.testing.assert_array_equal(qp.upper, case30.p_max)


@pytest.mark.parametrize("name", ["case5", "case5_3gen"])
def test_ptdf_opf_matches_angle_opf(name):
    from carbontrace.grid import load_builtin

    net = load_builtin(name)
    res = solve_baseline(net, net.base_loads)
    np.testing.assert_allclose(res.p_g, solve_angle_opf(net, net.base_loads), atol=1e-4)


def test_load_outside_capacity_fails_fast(case30):
    with pytest.raises(InfeasibleDispatchError, match="outside generation range"):
        build_baseline_opf(case30, case30.base_loads * 20)


def test_case30_baseline_identities(case30, base30):
    assert base30.balance_residual <= 1e-6
    assert base30.total_emission_lbs == float(case30.emission_rates @ base30.p_g)
    assert base30.carbon_cost == 0.009 * base30.total_emission_lbs
    assert base30.total_cost == base30.power_cost + base30.carbon_cost
    assert np.all(base30.p_g >= case30.p_min - 1e-8) and np.all(base30.p_g <= case30.p_max + 1e-8)
    lim = case30.flow_limits
    assert np.all(np.abs(base30.p_l) <= lim + 1e-6)


def test_baseline_without_permit_has_zero_carbon_cost(case30, case30_ptdf):
    res = solve_baseline(case30, case30.base_loads, case30_ptdf)
    assert res.carbon_cost == 0.0


def test_infinite_cap_equals_baseline_with_permit_in_objective(case30, case30_ptdf):
    qp = build_baseline_opf(case30, case30.base_loads, case30_ptdf, objective_permit_price=0.009)
    ref = solve_qp(qp).values
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                           CarbonOpfConfig(permit_price=0.009))
    np.testing.assert_allclose(res.p_g, ref, atol=1e-6)


def test_cap_below_minimum_emission(case30, case30_ptdf):
    _, e_min = min_emission_dispatch(case30, case30.base_loads, case30_ptdf)
    with pytest.raises(InfeasibleDispatchError) as info:
        solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                         CarbonOpfConfig(total_cap_lbs=0.5 * e_min))
    assert info.value.min_emission_lbs == pytest.approx(e_min)
    assert "tightest feasible cap" in str(info.value)


def test_cap_and_permit_direction(case30, case30_ptdf, base30):
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                           CarbonOpfConfig(0.009, 95 * LBS_PER_TON))
    assert res.total_emission_lbs <= 190000 + 1e-3
    assert res.power_cost >= base30.power_cost
    assert res.carbon_cost == 0.009 * res.total_emission_lbs


def test_cap_at_baseline_emission_keeps_cost(case30, case30_ptdf):
    base = solve_baseline(case30, case30.base_loads, case30_ptdf)
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                           CarbonOpfConfig(0.0, base.total_emission_lbs))
    assert res.power_cost == pytest.approx(base.power_cost, abs=1e-6)


def test_binding_cap_has_positive_dual(case30, case30_ptdf):
    base = solve_baseline(case30, case30.base_loads, case30_ptdf)
    assert base.total_emission_lbs > 190000
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                           CarbonOpfConfig(0.0, 190000.0))
    assert res.total_emission_lbs == pytest.approx(190000.0, rel=1e-8)
    assert res.cap_dual > 1e-6
    assert check_kkt(res.program, res.solution, 1e-6).passed


def test_zero_loads(case30, case30_ptdf):
    zero = np.zeros(case30.n_buses)
    res = solve_carbon_opf(case30, zero, case30_ptdf, share_factors(case30), CarbonOpfConfig(0.009, 1e5))
    np.testing.assert_allclose(res.p_g, 0.0, atol=1e-8)
    assert res.total_emission_lbs == pytest.approx(0.0, abs=1e-6)


def test_cost_monotone_in_cap(case30, case30_ptdf):
    alpha = share_factors(case30)
    costs = []
    for cap_ton in [75, 80, 90, 100, 110, 130]:
        res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, alpha,
                               CarbonOpfConfig(0.0, cap_ton * LBS_PER_TON))
        costs.append(res.total_cost)
    assert all(b <= a + 1e-6 for a, b in zip(costs, costs[1:]))
    assert costs[0] > costs[-1]


def test_non_binding_cap_reproduces_baseline(case30, case30_ptdf):
    base = solve_baseline(case30, case30.base_loads, case30_ptdf)
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30),
                           CarbonOpfConfig(0.0, 1e9))
    np.testing.assert_allclose(res.p_g, base.p_g, atol=1e-6)


def test_conservation_and_factor_link(case30, case30_ptdf):
    alpha = share_factors(case30)
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, alpha, CarbonOpfConfig(0.009, 95 * LBS_PER_TON))
    np.testing.assert_allclose(res.e_n, alpha @ (case30.emission_rates * res.p_g), rtol=1e-9, atol=1e-6)
    assert abs(res.e_n.sum() - res.total_emission_lbs) <= 1e-6 * res.total_emission_lbs


def test_factor_shape_checked(case30, case30_ptdf):
    with pytest.raises(ValueError, match="factor matrix shape"):
        build_carbon_opf(case30, case30.base_loads, case30_ptdf, np.ones((3, 3)), CarbonOpfConfig())


@pytest.mark.parametrize(
    "kwargs", [dict(permit_price=-1.0), dict(total_cap_lbs=0.0), dict(node_caps_lbs={2: 0.0}), dict(horizon=0)]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        CarbonOpfConfig(**kwargs)


def test_node_cap_single_period(case30, case30_ptdf):
    alpha = share_factors(case30)
    free = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, alpha, CarbonOpfConfig())
    k = case30.bus_index[8]
    cap = 0.8 * free.e_n[k]
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, alpha, CarbonOpfConfig(node_caps_lbs={8: cap}))
    assert res.e_n[k] <= cap + 1e-6
    assert res.power_cost >= free.power_cost - 1e-9


def test_multi_period_caps_couple_periods(case30, case30_ptdf):
    alpha = share_factors(case30)
    d = case30.base_loads
    k = case30.bus_index[8]
    free = [solve_carbon_opf(case30, x, case30_ptdf, alpha, CarbonOpfConfig()) for x in (d, 0.8 * d)]
    cap = 0.9 * (free[0].e_n[k] + free[1].e_n[k])
    res = solve_carbon_opf_batch(case30, [d, 0.8 * d], case30_ptdf, alpha,
                                 CarbonOpfConfig(node_caps_lbs={8: cap}, horizon=2))
    assert len(res) == 2
    assert res[0].e_n[k] + res[1].e_n[k] <= cap + 1e-6
    for r, x in zip(res, (d, 0.8 * d)):
        assert abs(r.p_g.sum() - x.sum()) <= 1e-6


def test_batch_horizon_mismatch(case30, case30_ptdf):
    with pytest.raises(ValueError, match="expected 2"):
        solve_carbon_opf_batch(case30, [case30.base_loads], case30_ptdf, share_factors(case30), CarbonOpfConfig(horizon=2))


def test_pwl_path_is_lp_and_close(case30, case30_ptdf):
    qp = build_baseline_opf(case30, case30.base_loads, case30_ptdf, cost_path="pwl")
    assert qp.is_lp
    quad = solve_baseline(case30, case30.base_loads, case30_ptdf)
    pwl = solve_baseline(case30, case30.base_loads, case30_ptdf, cost_path="pwl")
    assert pwl.cost_path == "pwl"
    a = case30.cost_coefficients()[0]
    width = (case30.p_max - case30.p_min) / 10
    # secant overestimates each quadratic by at most a w^2 / 4
    assert pwl.power_cost - quad.power_cost <= float(np.sum(a * width**2 / 4)) + 1e-6
    assert pwl.power_cost >= quad.power_cost - 1e-6
    assert abs(pwl.p_g.sum() - case30.base_loads.sum()) <= 1e-6


def test_capped_dispatch_matches_factor_form(case30, case30_ptdf):
    cfg = CarbonOpfConfig(0.0, 95 * LBS_PER_TON)
    a = solve_capped_dispatch(case30, case30.base_loads, case30_ptdf, cfg)
    b = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30), cfg)
    np.testing.assert_allclose(a.p_g, b.p_g, atol=1e-5)


def test_outputs(tmp_path, case30, case30_ptdf):
    res = solve_carbon_opf(case30, case30.base_loads, case30_ptdf, share_factors(case30), CarbonOpfConfig(0.009))
    res.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert len(data["p_g_mw"]) == 6 and len(data["e_n_lbs"]) == 30
    res.write_csv(tmp_path)
    rows = list(csv.reader(open(tmp_path / "carbon_buses.csv")))
    assert rows[0] == ["bus", "load_mw", "e_lbs"]
    assert len(rows) == 31
    assert len(list(csv.reader(open(tmp_path / "carbon_lines.csv")))) == 42


def test_degenerate_cap_and_line_vertex(case5):
    # cap, one line limit and one unit bound all active: multipliers are not unique
    alpha = np.array([[0, 0, 0], [0.3, 0.3, 0.3], [0.3, 0.3, 0.3], [0.4, 0.4, 0.4], [0, 0, 0]])
    loads = np.array([0, 264.6847151, 213.72943955, 296.20307666, 0])
    res = solve_carbon_opf(case5, loads, None, alpha, CarbonOpfConfig(0.004286464024765153, 804543.5031176066))
    assert check_kkt(res.program, res.solution, 1e-6).passed


@pytest.mark.parametrize("name", ["case5_3gen", "case30"])
def test_random_carbon_instances_solve(name):
    from carbontrace.grid import load_builtin
    from carbontrace.sampler import sample_loads

    net = load_builtin(name)
    ptdf = compute_ptdf(net)
    rng = np.random.default_rng(7)
    for k in range(30):
        loads = sample_loads(net, (0.7, 1.0), 99, draw_index=k).loads
        base = solve_baseline(net, loads, ptdf)
        _, e_min = min_emission_dispatch(net, loads, ptdf)
        cap = e_min + rng.uniform(0.0, 1.2) * (base.total_emission_lbs - e_min)
        cfg = CarbonOpfConfig(rng.uniform(0, 0.02), max(cap, e_min * (1 + 1e-9)))
        res = solve_carbon_opf(net, loads, ptdf, share_factors(net, loads), cfg)
        assert check_kkt(res.program, res.solution, 1e-6).passed
        assert res.total_emission_lbs <= cfg.total_cap_lbs * (1 + 1e-9)
