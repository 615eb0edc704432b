import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from carbontrace.grid import load_builtin
from carbontrace.sampler import Dataset, generate_dataset
from carbontrace.tracing import (
    DistributionFactorRegressor,
    FactorMatrix,
    RankDeficientError,
    ance,
    carbon_report,
    fit_distribution_factors,
    lmce,
    lmce_gradient_projection,
    lmce_oracle_all,
    lmce_sensitivity_oracle,
    nodal_emissions,
    reconstruct_loads,
)

from conftest import make_network

BUS4_FACTORS = (0.4071, 0.3970, 0.4000)
# hand evaluation of the squared-weight average for these factors and rates
BUS4_LMCE = 1189.0582058061436


def planted(rng, n=6, g=3, s=200):
    alpha = rng.uniform(0.05, 1.0, size=(n, g))
    alpha[0] = 0.0
    alpha /= alpha.sum(axis=0)
    P = rng.uniform(10.0, 100.0, size=(s, g))
    return alpha, P, P @ alpha.T


def test_single_generator_proportional_loads():
    beta = np.array([0.0, 0.25, 0.75])
    tot = np.linspace(50, 100, 30)
    est = DistributionFactorRegressor().fit(tot[:, None], np.outer(tot, beta))
    np.testing.assert_allclose(est.alpha_[:, 0], beta, atol=1e-10)
    assert est.fit_metrics_["max_ae"] <= 1e-8


def test_planted_recovery(rng):
    alpha, P, D = planted(rng)
    est = DistributionFactorRegressor().fit(P, D)
    np.testing.assert_allclose(est.alpha_, alpha, atol=1e-6)
    np.testing.assert_allclose(est.predict(P), D, atol=1e-6)
    np.testing.assert_allclose(reconstruct_loads(est.alpha_, P), D, atol=1e-6)


def test_zero_dispatch_gives_zero_loads(rng):
    alpha, _, _ = planted(rng)
    np.testing.assert_array_equal(reconstruct_loads(alpha, np.zeros(3)), 0.0)
    with pytest.raises(ValueError, match="generators"):
        reconstruct_loads(alpha, np.zeros(4))


def test_rank_deficient_without_ridge_names_group(rng):
    p1 = rng.uniform(10, 50, size=40)
    P = np.column_stack([p1, 2 * p1, rng.uniform(10, 50, size=40)])
    D = np.column_stack([P.sum(axis=1) * 0.5, P.sum(axis=1) * 0.5])
    with pytest.raises(RankDeficientError, match=r"G1, G2") as info:
        DistributionFactorRegressor(ridge=0.0).fit(P, D)
    assert info.value.groups == [[0, 1]]
    est = DistributionFactorRegressor().fit(P, D)
    assert est.rank_ == 2 and est.collinear_groups_ == [[0, 1]]
    np.testing.assert_allclose(est.alpha_.sum(axis=0), 1.0, atol=1e-12)


def test_zero_output_generator_dropped(rng):
    alpha, P, D = planted(rng)
    P = np.column_stack([P, np.zeros(len(P))])
    est = DistributionFactorRegressor().fit(P, D)
    assert est.dropped_generators_ == [3]
    np.testing.assert_allclose(est.alpha_[:, 3].sum(), 1.0)
    np.testing.assert_allclose(est.alpha_[:, :3], alpha, atol=1e-6)


def test_all_zero_outputs_rejected():
    with pytest.raises(ValueError, match="identically zero"):
        DistributionFactorRegressor().fit(np.zeros((5, 2)), np.ones((5, 2)))


def test_negative_loads_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        DistributionFactorRegressor().fit(np.ones((3, 1)), -np.ones((3, 2)))


def test_per_generator_mode_sums_to_one(rng):
    alpha, P, D = planted(rng)
    est = DistributionFactorRegressor(mode="per_generator").fit(P, D)
    np.testing.assert_allclose(est.alpha_.sum(axis=0), 1.0, atol=1e-10)


def test_estimator_protocol():
    est = DistributionFactorRegressor(mode="per_generator", ridge=1e-6)
    assert est.get_params()["ridge"] == 1e-6
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "alpha_")
    with pytest.raises(ValueError, match="mode"):
        DistributionFactorRegressor(mode="bogus").fit(np.ones((3, 1)), np.ones((3, 1)))


@pytest.fixture(scope="module")
def fitted5():
    net = load_builtin("case5_3gen")
    ds = generate_dataset(net, S=120, rng_seed=2, mode="system")
    return net, ds, fit_distribution_factors(ds)


def test_five_bus_structure(fitted5):
    net, _, fm = fitted5
    zero = [net.bus_index[b] for b in net.bus_ids if net.base_loads[net.bus_index[b]] == 0]
    assert len(zero) == 2
    assert np.all(np.abs(fm.alpha[zero]) <= 1e-6)
    assert fm.check_invariants() == []


def test_factor_matrix_round_trip(tmp_path, fitted5):
    _, ds, fm = fitted5
    fm.save(tmp_path / "f.csv")
    back = FactorMatrix.load(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.alpha, fm.alpha)
    assert back.bus_ids == fm.bus_ids
    assert back.evaluate(ds)["mae"] == pytest.approx(fm.evaluate(ds)["mae"])
    header = next(csv.reader(open(tmp_path / "f.csv")))
    assert header == ["bus", "g1", "g2", "g3"]


@given(arrays(float, (5, 4), elements=st.floats(0, 1)), arrays(float, 4, elements=st.floats(0, 3000)),
       arrays(float, 4, elements=st.floats(0, 500)))
@settings(max_examples=60, deadline=None)
def test_conservation(alpha, gamma, p):
    sums = alpha.sum(axis=0)
    alpha = np.where(sums > 0, alpha / np.where(sums > 0, sums, 1), 0.2)
    e = nodal_emissions(alpha, gamma, p)
    total = float(gamma @ p)
    assert abs(e.sum() - total) <= 1e-9 * max(total, 1.0)


def test_nodal_emission_example():
    np.testing.assert_allclose(nodal_emissions(np.array([[0.4], [0.6]]), [1000.0], [100.0]), [40000.0, 60000.0])
    np.testing.assert_array_equal(nodal_emissions(np.array([[0.4], [0.6]]), [0.0], [100.0]), 0.0)


def test_ance():
    out = ance([500.0, 3.0, 1.0], [2.0, 0.0, 1e-7])
    assert out[0] == 250.0
    assert math.isnan(out[1]) and math.isnan(out[2])


def test_ance_single_generator(two_bus):
    gamma = two_bus.emission_rates
    alpha = np.array([[0.0], [1.0]])
    e = nodal_emissions(alpha, gamma, [50.0])
    assert ance(e, two_bus.base_loads)[1] == pytest.approx(gamma[0])


def test_lmce_basic():
    alpha = np.array([[0.0, 0.0], [0.2, 0.7], [0.8, 0.3]])
    out = lmce(alpha, [500.0, 900.0], in_service=[1])
    assert math.isnan(out[0])
    np.testing.assert_allclose(out[1:], 900.0)
    eq = lmce(np.full((2, 3), 0.5), [100.0, 200.0, 600.0])
    np.testing.assert_allclose(eq, 300.0)


def test_lmce_bus4_row():
    alpha = np.array([BUS4_FACTORS])
    assert lmce(alpha, [565.0, 1890.0, 1145.0])[0] == pytest.approx(BUS4_LMCE, rel=1e-12)


def test_in_service_validation():
    with pytest.raises(ValueError, match="empty"):
        lmce(np.ones((2, 2)), [1.0, 2.0], in_service=np.zeros(2, dtype=bool))
    with pytest.raises(ValueError, match="index"):
        lmce(np.ones((2, 2)), [1.0, 2.0], in_service=[5])


unit = st.floats(0, 1, allow_nan=False)


@given(arrays(float, (4, 5), elements=unit), arrays(float, 5, elements=st.floats(1, 3000)),
       arrays(bool, 5, elements=st.booleans()))
@settings(max_examples=100, deadline=None)
def test_lmce_bounds_and_gradient_identity(alpha, gamma, mask):
    if not mask.any():
        mask[0] = True
    mu = lmce(alpha, gamma, mask)
    gp = lmce_gradient_projection(alpha, gamma, mask)
    lo, hi = gamma[mask].min(), gamma[mask].max()
    for m, g in zip(mu, gp):
        if math.isnan(m):
            assert math.isnan(g)
            continue
        assert lo - 1e-9 * hi <= m <= hi + 1e-9 * hi
        assert abs(m - g) <= 1e-12 * abs(m)


@given(arrays(float, (4, 3), elements=st.floats(0.01, 1)), arrays(float, 4, elements=st.floats(0.1, 10)))
@settings(max_examples=50, deadline=None)
def test_lmce_row_scale_invariance(alpha, scale):
    gamma = np.array([565.0, 1890.0, 1145.0])
    np.testing.assert_allclose(lmce(alpha * scale[:, None], gamma), lmce(alpha, gamma), rtol=1e-12)


def test_oracle_single_generator(two_bus):
    assert lmce_sensitivity_oracle(two_bus, None, two_bus.base_loads, 2) == pytest.approx(1000.0, rel=1e-8)
    assert lmce_sensitivity_oracle(two_bus, None, two_bus.base_loads, 2, central=True) == pytest.approx(1000.0, rel=1e-8)


def test_oracle_marginal_generator(ring3):
    # unconstrained: the cheaper unit at its marginal cost sets both outputs interior;
    # make one unit flat-priced so the other one is marginal
    net = make_network(
        {1: 0.0, 2: 40.0, 3: 60.0},
        [(1, 2, 0.1, None), (2, 3, 0.1, None), (1, 3, 0.1, None)],
        [(1, 0.0, 60.0, 900.0, (0.0, 5.0, 0.0)), (3, 0.0, 200.0, 500.0, (0.02, 12.0, 0.0))],
        slack=3,
    )
    vals = lmce_oracle_all(net, None, net.base_loads, buses=[2, 3])
    np.testing.assert_allclose(vals, 500.0, rtol=1e-6)


def test_oracle_infeasible_suggests_smaller_delta(two_bus):
    with pytest.raises(Exception, match="smaller delta"):
        lmce_sensitivity_oracle(two_bus, None, two_bus.base_loads, 2, delta_mw=60.0)


def test_report_outputs(tmp_path, fitted5):
    net, ds, fm = fitted5
    rep = carbon_report(fm, net, ds.P[0], ds.D[0])
    gam = net.emission_rates[rep.in_service]
    ok = ~np.isnan(rep.lmce)
    assert np.all((rep.lmce[ok] >= gam.min() - 1e-9) & (rep.lmce[ok] <= gam.max() + 1e-9))
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(rows) == net.n_buses + 1
    by_bus = {int(r[0]): r for r in rows[1:]}
    for b in net.bus_ids:
        if net.base_loads[net.bus_index[b]] == 0:
            assert by_bus[int(b)][3] == "NA" and by_bus[int(b)][4] == "NA"
    rep.to_csv(tmp_path / "s.csv", sort=True)
    vals = [float(r[4]) for r in list(csv.reader(open(tmp_path / "s.csv")))[1:] if r[4] != "NA"]
    assert vals == sorted(vals)
    d = rep.to_dict()
    assert any(b["lmce_lbs_per_mwh"] is None for b in d["buses"])
