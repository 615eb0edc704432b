import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carbontrace.dispatch import build_baseline_opf, solve_baseline
from carbontrace.qp import (
    INFEASIBLE,
    NUMERIC_FAILURE,
    OPTIMAL,
    UNBOUNDED,
    QuadraticProgram,
    Solution,
    check_kkt,
    solve_qp,
)


def _x_ge_3():
    return QuadraticProgram([1.0], [0.0], lower=[3.0])


def test_analytic_bound():
    sol = solve_qp(_x_ge_3())
    assert sol.status == OPTIMAL
    assert sol.values[0] == pytest.approx(3.0, abs=1e-8)
    assert sol.objective == pytest.approx(9.0, abs=1e-7)
    assert check_kkt(_x_ge_3(), sol, 1e-8).passed


def test_perturbed_point_fails_kkt():
    qp = _x_ge_3()
    sol = solve_qp(qp)
    bad = Solution(sol.values + 0.1, 0.0, OPTIMAL, sol.eq_duals, sol.ineq_duals, sol.bound_duals, 0, 0.0)
    rep = check_kkt(qp, bad, 1e-8)
    assert rep.stationarity_residual > 1e-8
    assert not rep.passed


def test_equality_infeasible_reports_rows():
    qp = QuadraticProgram([0.0], [0.0], A_eq=[[1.0], [1.0]], b_eq=[1.0, 2.0], eq_names=("first", "second"))
    sol = solve_qp(qp)
    assert sol.status == INFEASIBLE
    assert sol.violated
    assert set(sol.violated) <= {"first", "second"}


def test_unbounded():
    sol = solve_qp(QuadraticProgram([0.0], [-1.0], lower=[0.0]))
    assert sol.status == UNBOUNDED


def test_iteration_cap_contract():
    # without the polish step one iteration cannot converge
    rng = np.random.default_rng(3)
    n = 40
    qp = QuadraticProgram(rng.uniform(0, 1, n), rng.normal(size=n), A_eq=rng.normal(size=(5, n)),
                          b_eq=rng.normal(size=5), lower=np.full(n, -1.0), upper=np.full(n, 1.0))
    statuses = set()
    for k in (1, 2, 3):
        sol = solve_qp(qp, max_iter=k)
        statuses.add(sol.status)
        assert set(sol.residuals) == {"primal", "stationarity", "complementarity"}
        if sol.status == OPTIMAL:
            assert check_kkt(qp, sol, 1e-6).passed
        else:
            assert sol.status == NUMERIC_FAILURE
            assert max(sol.residuals.values()) > 0
    assert NUMERIC_FAILURE in statuses


def build_baseline_opf_fixture():
    from carbontrace.grid import load_builtin

    net = load_builtin("case30")
    return build_baseline_opf(net, net.base_loads)


def _enumerate_vertices(c, a_eq, b_eq, lo, hi):
    """Brute-force LP optimum over box vertices of {A x = b}."""
    n, m = len(c), len(b_eq)
    best = np.inf
    for free in itertools.combinations(range(n), m):
        fixed = [j for j in range(n) if j not in free]
        for sides in itertools.product((0, 1), repeat=len(fixed)):
            x = np.zeros(n)
            for j, s in zip(fixed, sides):
                x[j] = hi[j] if s else lo[j]
            sub = a_eq[:, list(free)]
            if m and abs(np.linalg.det(sub)) < 1e-10:
                continue
            if m:
                x[list(free)] = np.linalg.solve(sub, b_eq - a_eq[:, fixed] @ x[fixed])
            if np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9):
                best = min(best, float(c @ x))
    return best


def test_two_variable_vertex_example():
    # min 3 x1 + 2 x2 on [0, 4]^2 with x1 + x2 = 5: vertices (1, 4) and (4, 1)
    c = np.array([3.0, 2.0])
    qp = QuadraticProgram([0, 0], c, A_eq=[[1, 1]], b_eq=[5], lower=[0, 0], upper=[4, 4])
    sol = solve_qp(qp)
    assert _enumerate_vertices(c, np.array([[1.0, 1.0]]), np.array([5.0]), np.zeros(2), np.full(2, 4.0)) == 11.0
    np.testing.assert_allclose(sol.values, [1.0, 4.0], atol=1e-8)
    assert sol.objective == pytest.approx(11.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_lp_matches_vertex_enumeration(n, m, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=n)
    a = rng.normal(size=(m, n))
    lo = -rng.uniform(0, 2, n)
    hi = rng.uniform(0, 2, n)
    x0 = rng.uniform(lo, hi)
    b = a @ x0
    qp = QuadraticProgram(np.zeros(n), c, A_eq=a, b_eq=b, lower=lo, upper=hi)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(_enumerate_vertices(c, a, b, lo, hi), abs=1e-6)
    assert check_kkt(qp, sol, 1e-6).passed


def test_degenerate_lp_lexicographic():
    qp = QuadraticProgram([0, 0], [1, 1], A_eq=[[1, 1]], b_eq=[1], lower=[0, 0], upper=[1, 1])
    sol = solve_qp(qp)
    np.testing.assert_allclose(sol.values, [0.0, 1.0], atol=1e-8)


def test_zero_objective_lexicographic():
    qp = QuadraticProgram([0, 0, 0], [0, 0, 0], A_ineq=[[1, 1, 1]], ineq_lower=[1], ineq_upper=[2],
                          lower=[0, 0, 0], upper=[1, 1, 1])
    sol = solve_qp(qp)
    np.testing.assert_allclose(sol.values, [0.0, 0.0, 1.0], atol=1e-8)


def test_deterministic_repeat():
    qp = QuadraticProgram([0, 0, 0], [1, 1, 1], A_eq=[[1, 1, 1]], b_eq=[1.5], lower=[0, 0, 0], upper=[1, 1, 1])
    runs = [solve_qp(qp).values for _ in range(5)]
    for r in runs[1:]:
        np.testing.assert_array_equal(r, runs[0])


@pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
def test_objective_scaling_invariance(factor):
    qp = build_baseline_opf_fixture()
    base = solve_qp(qp).values
    np.testing.assert_allclose(solve_qp(qp.scaled(factor)).values, base, atol=1e-6)


def test_baseline_case30_kkt(case30, case30_ptdf):
    res = solve_baseline(case30, case30.base_loads, case30_ptdf)
    rep = check_kkt(res.program, res.solution, 1e-6)
    assert rep.passed, rep


def test_duals_follow_sign_convention():
    # min x^2 s.t. x >= 3: stationarity 2x + nu = 0 with nu < 0 on the lower side
    sol = solve_qp(_x_ge_3())
    assert sol.bound_duals[0] == pytest.approx(-6.0, abs=1e-6)
    qp = QuadraticProgram([1.0], [0.0], A_ineq=[[1.0]], ineq_lower=[-np.inf], ineq_upper=[-2.0])
    sol = solve_qp(qp)
    assert sol.values[0] == pytest.approx(-2.0, abs=1e-8)
    assert sol.ineq_duals[0] == pytest.approx(4.0, abs=1e-6)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(quadratic_diag=[-1.0], linear=[0.0]),
        dict(quadratic_diag=[0.0], linear=[0.0], lower=[2.0], upper=[1.0]),
        dict(quadratic_diag=[0.0], linear=[0.0], A_ineq=[[1.0]], ineq_lower=[3.0], ineq_upper=[1.0]),
        dict(quadratic_diag=[0.0, 0.0], linear=[0.0, 0.0], A_eq=[[1.0]], b_eq=[1.0]),
    ],
)
def test_invalid_programs_rejected(kwargs):
    with pytest.raises(ValueError):
        QuadraticProgram(**kwargs)


def test_qp_with_inequalities_and_fixed_variable():
    # min (x-1)^2 + (y-2)^2 = x^2 + y^2 - 2x - 4y + 5 with x + y <= 2 and z fixed at 3
    qp = QuadraticProgram([1, 1, 0], [-2, -4, 1], 5.0, A_ineq=[[1, 1, 0]], ineq_upper=[2.0],
                          lower=[-np.inf, -np.inf, 3.0], upper=[np.inf, np.inf, 3.0])
    sol = solve_qp(qp)
    np.testing.assert_allclose(sol.values, [0.5, 1.5, 3.0], atol=1e-8)
    assert check_kkt(qp, sol, 1e-8).passed
