"""Baseline and carbon-aware DC optimal power flow.

The baseline program dispatches generators against a fixed load vector with
the PTDF network model::

    min   sum_g a_g p_g^2 + b_g p_g + c_g
    s.t.  sum_g p_g = sum_n d_n
          -P_l^max <= Gamma_l (C_g p - d) <= P_l^max
          P_g^min <= p_g <= P_g^max

The carbon-aware program adds nodal emission variables tied to dispatch by
the generator-to-load carbon distribution factors, a system-wide cap and a
permit charge on generation emissions.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np
from scipy import sparse

from .flow import PtdfMatrix, compute_ptdf, incidence_matrix
from .grid import LBS_PER_TON, Network
from .qp import DEFAULT_TOL, INFEASIBLE, NUMERIC_FAILURE, OPTIMAL, QuadraticProgram, Solution, solve_qp

if TYPE_CHECKING:
    from .tracing import FactorMatrix

CostPath = Literal["quadratic", "pwl"]


class DispatchError(RuntimeError):
    """Base class for dispatch failures."""


class InfeasibleDispatchError(DispatchError):
    def __init__(self, message, violated=(), min_emission_lbs=None, cap_lbs=None):
        super().__init__(message)
        self.violated = list(violated)
        self.min_emission_lbs = min_emission_lbs
        self.cap_lbs = cap_lbs


class NumericFailureError(DispatchError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


@dataclass(frozen=True)
class CarbonOpfConfig:
    """Carbon policy parameters.

    permit_price : $ per lb CO2 charged on generator emissions.
    total_cap_lbs : system-wide emission cap in lbs (``inf`` disables it).
    node_caps_lbs : optional ``{bus_id: lbs}`` caps on nodal emissions summed
        over the ``horizon`` periods of a batch solve.
    """

    permit_price: float = 0.0
    total_cap_lbs: float = math.inf
    node_caps_lbs: dict | None = None
    horizon: int = 1

    def __post_init__(self):
        if not self.permit_price >= 0:
            raise ValueError("permit_price must be >= 0")
        if not self.total_cap_lbs > 0:
            raise ValueError("total_cap_lbs must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for bus, cap in (self.node_caps_lbs or {}).items():
            if not cap > 0:
                raise ValueError(f"node cap for bus {bus} must be > 0")


@dataclass
class DispatchResult:
    p_g: np.ndarray
    p_l: np.ndarray
    power_cost: float
    carbon_cost: float
    total_cost: float
    total_emission_lbs: float
    solve_time: float
    loads: np.ndarray
    bus_ids: tuple[int, ...]
    e_n: np.ndarray | None = None
    cost_path: CostPath = "quadratic"
    kind: str = "baseline"
    cap_dual: float | None = None
    solution: Solution | None = field(default=None, repr=False)
    program: QuadraticProgram | None = field(default=None, repr=False)

    @property
    def total_emission_tons(self) -> float:
        return self.total_emission_lbs / LBS_PER_TON

    @property
    def balance_residual(self) -> float:
        return float(abs(self.p_g.sum() - self.loads.sum()))

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "power_cost": self.power_cost,
            "carbon_cost": self.carbon_cost,
            "total_cost": self.total_cost,
            "total_emission_lbs": self.total_emission_lbs,
            "total_emission_tons": self.total_emission_tons,
            "solve_time_s": self.solve_time,
            "cost_path": self.cost_path,
            "cap_dual": self.cap_dual,
        }

    def to_dict(self) -> dict:
        out = self.summary()
        out["p_g_mw"] = self.p_g.tolist()
        out["p_l_mw"] = self.p_l.tolist()
        out["loads_mw"] = dict(zip(map(str, self.bus_ids), self.loads.tolist()))
        if self.e_n is not None:
            out["e_n_lbs"] = dict(zip(map(str, self.bus_ids), self.e_n.tolist()))
        return out

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def write_csv(self, directory, prefix=None):
        """Write per-generator, per-line and per-bus tables."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.kind
        with open(directory / f"{prefix}_generators.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generator", "p_mw"])
            w.writerows((g + 1, repr(float(p))) for g, p in enumerate(self.p_g))
        with open(directory / f"{prefix}_lines.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["line", "flow_mw"])
            w.writerows((k + 1, repr(float(f))) for k, f in enumerate(self.p_l))
        with open(directory / f"{prefix}_buses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "load_mw", "e_lbs"])
            for k, bus in enumerate(self.bus_ids):
                e = "NA" if self.e_n is None else repr(float(self.e_n[k]))
                w.writerow([bus, repr(float(self.loads[k])), e])


# --------------------------------------------------------------------------
# program assembly


def _check_loads(net: Network, loads) -> np.ndarray:
    d = np.asarray(loads, dtype=float)
    if d.shape != (net.n_buses,):
        raise ValueError(f"loads must have shape ({net.n_buses},), got {d.shape}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("loads must be finite and >= 0")
    total = d.sum()
    lo, hi = net.p_min.sum(), net.p_max.sum()
    tol = 1e-9 * max(1.0, total)
    if total < lo - tol or total > hi + tol:
        raise InfeasibleDispatchError(
            f"total load {total:.6g} MW outside generation range [{lo:.6g}, {hi:.6g}] MW",
            ["power_balance"],
        )
    return d


def _flow_rows(net: Network, loads, ptdf: PtdfMatrix):
    """PTDF flow limits as rows over the generator outputs."""
    lim = net.flow_limits
    finite = np.flatnonzero(np.isfinite(lim))
    gamma = ptdf.values[finite]
    mat = gamma @ net.generator_incidence()
    offset = gamma @ loads
    names = tuple(f"flow[{net.lines[k].from_bus}-{net.lines[k].to_bus}#{k + 1}]" for k in finite)
    return mat, offset - lim[finite], offset + lim[finite], names


@dataclass(frozen=True)
class _Layout:
    n_gen: int
    n_seg: int = 0
    n_e: int = 0

    @property
    def p(self):
        return slice(0, self.n_gen)

    @property
    def seg(self):
        return slice(self.n_gen, self.n_gen + self.n_seg)

    @property
    def e(self):
        start = self.n_gen + self.n_seg
        return slice(start, start + self.n_e)

    @property
    def n(self):
        return self.n_gen + self.n_seg + self.n_e


def _assemble(
    net: Network,
    loads,
    ptdf: PtdfMatrix,
    *,
    extra_linear=None,
    cost_path: CostPath = "quadratic",
    segments: int = 10,
    n_e: int = 0,
):
    """Shared rows of both programs; returns pieces to extend."""
    g = net.n_generators
    a, b, c = net.cost_coefficients()
    lin_p = b + (0.0 if extra_linear is None else np.asarray(extra_linear))
    pmin, pmax = net.p_min, net.p_max
    if cost_path == "pwl":
        k = int(segments)
        if k < 1:
            raise ValueError("segments must be >= 1")
        lay = _Layout(g, g * k, n_e)
        width = (pmax - pmin) / k
        quad = np.zeros(lay.n)
        lin = np.zeros(lay.n)
        # secant slope of the quadratic over each segment
        lo_pts = pmin[:, None] + width[:, None] * np.arange(k)[None, :]
        hi_pts = lo_pts + width[:, None]
        slopes = a[:, None] * (lo_pts + hi_pts) + lin_p[:, None]
        lin[lay.seg] = slopes.ravel()
        constant = float(np.sum(a * pmin**2 + lin_p * pmin + c))
        lower = np.zeros(lay.n)
        upper = np.zeros(lay.n)
        lower[lay.p], upper[lay.p] = pmin, pmax
        upper[lay.seg] = np.repeat(width, k)
        rows = sparse.lil_matrix((g, lay.n))
        for gi in range(g):
            rows[gi, gi] = 1.0
            for j in range(k):
                rows[gi, g + gi * k + j] = -1.0
        link = (rows.tocsr(), pmin.copy(), tuple(f"segments[{gi + 1}]" for gi in range(g)))
    elif cost_path == "quadratic":
        lay = _Layout(g, 0, n_e)
        quad = np.zeros(lay.n)
        lin = np.zeros(lay.n)
        quad[lay.p] = a
        lin[lay.p] = lin_p
        constant = float(c.sum())
        lower = np.zeros(lay.n)
        upper = np.zeros(lay.n)
        lower[lay.p], upper[lay.p] = pmin, pmax
        link = None
    else:
        raise ValueError(f"unknown cost path {cost_path!r}")
    lower[lay.e], upper[lay.e] = -np.inf, np.inf

    balance = np.zeros((1, lay.n))
    balance[0, lay.p] = 1.0
    eq_rows = [sparse.csr_matrix(balance)]
    eq_rhs = [np.array([loads.sum()])]
    eq_names = ["power_balance"]
    if link is not None:
        eq_rows.append(link[0])
        eq_rhs.append(link[1])
        eq_names.extend(link[2])

    fmat, flo, fhi, fnames = _flow_rows(net, loads, ptdf)
    full = np.zeros((fmat.shape[0], lay.n))
    full[:, lay.p] = fmat
    return lay, quad, lin, constant, lower, upper, eq_rows, eq_rhs, eq_names, [sparse.csr_matrix(full)], [flo], [fhi], list(fnames)


def build_baseline_opf(
    net: Network,
    loads,
    ptdf: PtdfMatrix | None = None,
    *,
    objective_permit_price: float = 0.0,
    cost_path: CostPath = "quadratic",
    segments: int = 10,
) -> QuadraticProgram:
    """Baseline DC-OPF over generator outputs.

    ``objective_permit_price`` adds a $/lb charge on emissions to the
    objective; the plain baseline leaves it at zero.  ``cost_path="pwl"``
    replaces each quadratic cost with ``segments`` secant pieces so the
    program is a pure LP.

    Raises
    ------
    InfeasibleDispatchError
        Total load cannot be met within generator limits.
    """
    d = _check_loads(net, loads)
    ptdf = ptdf or compute_ptdf(net)
    extra = objective_permit_price * net.emission_rates if objective_permit_price else None
    lay, quad, lin, const, lo, hi, eqr, eqb, eqn, inr, inl, inu, inn = _assemble(
        net, d, ptdf, extra_linear=extra, cost_path=cost_path, segments=segments
    )
    return QuadraticProgram(
        quad, lin, const,
        sparse.vstack(eqr, format="csr"), np.concatenate(eqb),
        sparse.vstack(inr, format="csr"), np.concatenate(inl), np.concatenate(inu),
        lo, hi,
        eq_names=tuple(eqn), ineq_names=tuple(inn),
    )


def _factor_alpha(net: Network, factors) -> np.ndarray:
    alpha = np.asarray(getattr(factors, "alpha", factors), dtype=float)
    if alpha.shape != (net.n_buses, net.n_generators):
        raise ValueError(
            f"factor matrix shape {alpha.shape} does not match network ({net.n_buses} buses, {net.n_generators} generators)"
        )
    return alpha


def _carbon_pieces(net, d, ptdf, alpha, cfg: CarbonOpfConfig, cost_path, segments):
    gamma = net.emission_rates
    extra = cfg.permit_price * gamma if cfg.permit_price else None
    pieces = _assemble(net, d, ptdf, extra_linear=extra, cost_path=cost_path, segments=segments, n_e=net.n_buses)
    lay = pieces[0]
    # e_n - sum_g alpha_ng gamma_g p_g = 0
    link = np.zeros((net.n_buses, lay.n))
    link[:, lay.e] = np.eye(net.n_buses)
    link[:, lay.p] = -alpha * gamma[None, :]
    pieces[6].append(sparse.csr_matrix(link))
    pieces[7].append(np.zeros(net.n_buses))
    pieces[8].extend(f"nodal_emission[{b.id}]" for b in net.buses)
    return pieces


def build_carbon_opf(
    net: Network,
    loads,
    ptdf: PtdfMatrix | None,
    factors: "FactorMatrix | np.ndarray",
    cfg: CarbonOpfConfig,
    *,
    cost_path: CostPath = "quadratic",
    segments: int = 10,
) -> QuadraticProgram:
    """Carbon-aware DC-OPF over ``[p_g, e_n]``.

    Nodal emissions are ``e_n = sum_g alpha_ng gamma_g p_g``; the sum of
    ``e_n`` is capped at ``cfg.total_cap_lbs`` and individual buses at
    ``cfg.node_caps_lbs`` (single-period form).  The objective adds
    ``permit_price * sum_g gamma_g p_g`` to the generation cost.
    """
    d = _check_loads(net, loads)
    ptdf = ptdf or compute_ptdf(net)
    alpha = _factor_alpha(net, factors)
    lay, quad, lin, const, lo, hi, eqr, eqb, eqn, inr, inl, inu, inn = _carbon_pieces(
        net, d, ptdf, alpha, cfg, cost_path, segments
    )
    if math.isfinite(cfg.total_cap_lbs):
        row = np.zeros((1, lay.n))
        row[0, lay.e] = 1.0
        inr.append(sparse.csr_matrix(row))
        inl.append(np.array([-np.inf]))
        inu.append(np.array([cfg.total_cap_lbs]))
        inn.append("emission_cap")
    idx = net.bus_index
    for bus, cap in sorted((cfg.node_caps_lbs or {}).items()):
        row = np.zeros((1, lay.n))
        row[0, lay.e.start + idx[int(bus)]] = 1.0
        inr.append(sparse.csr_matrix(row))
        inl.append(np.array([-np.inf]))
        inu.append(np.array([float(cap)]))
        inn.append(f"node_cap[{bus}]")
    return QuadraticProgram(
        quad, lin, const,
        sparse.vstack(eqr, format="csr"), np.concatenate(eqb),
        sparse.vstack(inr, format="csr"), np.concatenate(inl), np.concatenate(inu),
        lo, hi,
        eq_names=tuple(eqn), ineq_names=tuple(inn),
    )


def build_angle_opf(net: Network, loads) -> QuadraticProgram:
    """Baseline DC-OPF in the bus-angle formulation (variables ``[p_g, theta_n]``).

    Used as an independent check on the PTDF formulation: nodal balance is
    written per bus and flows are ``base_mva * (theta_f - theta_t) / x``.
    """
    d = _check_loads(net, loads)
    g, n = net.n_generators, net.n_buses
    a, b, c = net.cost_coefficients()
    inc = incidence_matrix(net)
    x = np.array([ln.reactance for ln in net.lines])
    flow_theta = net.base_mva * inc / x[:, None]  # L x N
    balance = np.hstack([net.generator_incidence(), -inc.T @ flow_theta])
    lim = net.flow_limits
    fin = np.flatnonzero(np.isfinite(lim))
    a_in = np.hstack([np.zeros((fin.size, g)), flow_theta[fin]])
    lower = np.concatenate([net.p_min, np.full(n, -np.inf)])
    upper = np.concatenate([net.p_max, np.full(n, np.inf)])
    slack = net.bus_index[net.slack_bus]
    lower[g + slack] = upper[g + slack] = 0.0
    return QuadraticProgram(
        np.concatenate([a, np.zeros(n)]),
        np.concatenate([b, np.zeros(n)]),
        float(c.sum()),
        balance, d,
        a_in, -lim[fin], lim[fin],
        lower, upper,
    )


# --------------------------------------------------------------------------
# solving


def _raise_for(sol: Solution, what: str):
    if sol.status == INFEASIBLE:
        raise InfeasibleDispatchError(
            f"{what} is infeasible: {sol.message}; relaxed constraints: {', '.join(sol.violated) or 'n/a'}",
            sol.violated,
        )
    if sol.status != OPTIMAL:
        raise NumericFailureError(f"{what} failed with status {sol.status}: {sol.message}", sol.residuals)


def _result(net, d, ptdf, qp, sol, elapsed, kind, cost_path, permit_price, n_gen_slice, e_slice=None, cap_row=None):
    p = sol.values[n_gen_slice].copy()
    a, b, c = net.cost_coefficients()
    power = float(np.sum(a * p * p + b * p + c))
    emission = float(net.emission_rates @ p)
    carbon = float(permit_price * emission) if permit_price else 0.0
    flows = ptdf.values @ net.nodal_injections(p, d)
    e_n = sol.values[e_slice].copy() if e_slice is not None else None
    cap_dual = float(sol.ineq_duals[cap_row]) if cap_row is not None else None
    return DispatchResult(
        p_g=p, p_l=flows, power_cost=power, carbon_cost=carbon, total_cost=power + carbon,
        total_emission_lbs=emission, solve_time=elapsed, loads=d, bus_ids=ptdf.bus_ids,
        e_n=e_n, cost_path=cost_path, kind=kind, cap_dual=cap_dual, solution=sol, program=qp,
    )


def solve_baseline(
    net: Network,
    loads,
    ptdf: PtdfMatrix | None = None,
    *,
    permit_price: float | None = None,
    cost_path: CostPath = "quadratic",
    segments: int = 10,
    tol: float = DEFAULT_TOL,
) -> DispatchResult:
    """Solve the baseline OPF; ``permit_price`` only prices emissions ex post."""
    t0 = time.perf_counter()
    ptdf = ptdf or compute_ptdf(net)
    d = _check_loads(net, loads)
    qp = build_baseline_opf(net, d, ptdf, cost_path=cost_path, segments=segments)
    sol = solve_qp(qp, tol)
    _raise_for(sol, "baseline OPF")
    return _result(net, d, ptdf, qp, sol, time.perf_counter() - t0, "baseline", cost_path, permit_price, slice(0, net.n_generators))


def min_emission_dispatch(net: Network, loads, ptdf: PtdfMatrix | None = None, tol: float = DEFAULT_TOL):
    """Dispatch minimising total emissions under balance, flow and capacity limits.

    Returns ``(p_g, emission_lbs)``.
    """
    ptdf = ptdf or compute_ptdf(net)
    d = _check_loads(net, loads)
    base = build_baseline_opf(net, d, ptdf)
    from .qp import _replace

    qp = _replace(base, quadratic_diag=np.zeros(base.n_vars), linear=net.emission_rates.copy(), constant=0.0)
    sol = solve_qp(qp, tol)
    _raise_for(sol, "minimum-emission dispatch")
    return sol.values.copy(), float(sol.objective)


def solve_capped_dispatch(
    net: Network,
    loads,
    ptdf: PtdfMatrix | None = None,
    cfg: CarbonOpfConfig | None = None,
    *,
    tol: float = DEFAULT_TOL,
) -> DispatchResult:
    """Carbon-aware dispatch without distribution factors.

    With column-stochastic factors, ``sum_n e_n = sum_g gamma_g p_g``, so the
    system cap reduces to a single row on generator outputs.  Node caps need
    the factors and are ignored here.
    """
    cfg = cfg or CarbonOpfConfig()
    t0 = time.perf_counter()
    ptdf = ptdf or compute_ptdf(net)
    d = _check_loads(net, loads)
    base = build_baseline_opf(net, d, ptdf, objective_permit_price=cfg.permit_price)
    cap_row = None
    qp = base
    if math.isfinite(cfg.total_cap_lbs):
        from .qp import _replace

        qp = _replace(
            base,
            A_ineq=sparse.vstack([base.A_ineq, sparse.csr_matrix(net.emission_rates[None, :])], format="csr"),
            ineq_lower=np.append(base.ineq_lower, -np.inf),
            ineq_upper=np.append(base.ineq_upper, cfg.total_cap_lbs),
            ineq_names=tuple(base.ineq_names) + ("emission_cap",),
        )
        cap_row = qp.n_ineq - 1
    sol = solve_qp(qp, tol)
    if sol.status == INFEASIBLE:
        _diagnose_cap(net, d, ptdf, cfg, sol)
    _raise_for(sol, "emission-capped dispatch")
    return _result(net, d, ptdf, qp, sol, time.perf_counter() - t0, "capped", "quadratic",
                   cfg.permit_price, slice(0, net.n_generators), None, cap_row)


def solve_carbon_opf(
    net: Network,
    loads,
    ptdf: PtdfMatrix | None,
    factors: "FactorMatrix | np.ndarray",
    cfg: CarbonOpfConfig,
    *,
    cost_path: CostPath = "quadratic",
    segments: int = 10,
    tol: float = DEFAULT_TOL,
) -> DispatchResult:
    """Solve the carbon-aware OPF.

    Raises
    ------
    InfeasibleDispatchError
        The cap is below the least emission any feasible dispatch can reach;
        ``min_emission_lbs`` carries that tightest feasible cap.
    """
    t0 = time.perf_counter()
    ptdf = ptdf or compute_ptdf(net)
    d = _check_loads(net, loads)
    qp = build_carbon_opf(net, d, ptdf, factors, cfg, cost_path=cost_path, segments=segments)
    sol = solve_qp(qp, tol)
    elapsed = time.perf_counter() - t0
    if sol.status == INFEASIBLE:
        _diagnose_cap(net, d, ptdf, cfg, sol)
    _raise_for(sol, "carbon-aware OPF")
    lay_e = slice(qp.n_vars - net.n_buses, qp.n_vars)
    cap_row = qp.ineq_names.index("emission_cap") if "emission_cap" in qp.ineq_names else None
    res = _result(net, d, ptdf, qp, sol, elapsed, "carbon", cost_path, cfg.permit_price, slice(0, net.n_generators), lay_e, cap_row)
    _check_conservation(res.e_n.sum(), res.total_emission_lbs)
    return res


def _check_conservation(e_sum, emission, rel=1e-6):
    if abs(e_sum - emission) > rel * max(1.0, abs(emission)):
        raise DispatchError(
            f"nodal emissions sum to {e_sum:.9g} lbs but generation emits {emission:.9g} lbs; "
            "factor columns must sum to one"
        )


def _diagnose_cap(net, d, ptdf, cfg, sol):
    try:
        _, e_min = min_emission_dispatch(net, d, ptdf)
    except InfeasibleDispatchError:
        return
    if e_min > cfg.total_cap_lbs:
        raise InfeasibleDispatchError(
            f"emission cap {cfg.total_cap_lbs:.6g} lbs is below the minimum achievable emission "
            f"{e_min:.6g} lbs ({e_min / LBS_PER_TON:.4g} ton); tightest feasible cap is {e_min:.6g} lbs",
            sol.violated,
            min_emission_lbs=e_min,
            cap_lbs=cfg.total_cap_lbs,
        )


def solve_carbon_opf_batch(
    net: Network,
    loads_by_period: Sequence,
    ptdf: PtdfMatrix | None,
    factors: "FactorMatrix | np.ndarray",
    cfg: CarbonOpfConfig,
    *,
    tol: float = DEFAULT_TOL,
) -> list[DispatchResult]:
    """Stack ``cfg.horizon`` single-period programs coupled by the node caps.

    Each period keeps its own balance, flow, capacity and system-cap rows;
    ``cfg.node_caps_lbs`` bound the per-bus emission summed over periods.
    """
    ptdf = ptdf or compute_ptdf(net)
    loads_by_period = [np.asarray(d, dtype=float) for d in loads_by_period]
    if len(loads_by_period) != cfg.horizon:
        raise ValueError(f"expected {cfg.horizon} load vectors, got {len(loads_by_period)}")
    single = CarbonOpfConfig(cfg.permit_price, cfg.total_cap_lbs, None, 1)
    progs = [build_carbon_opf(net, d, ptdf, factors, single) for d in loads_by_period]
    t0 = time.perf_counter()
    nv = progs[0].n_vars
    n_t = len(progs)
    a_in = [sparse.block_diag([p.A_ineq for p in progs], format="csr")]
    in_lo = [np.concatenate([p.ineq_lower for p in progs])]
    in_hi = [np.concatenate([p.ineq_upper for p in progs])]
    names = [f"{nm}@t{t + 1}" for t, p in enumerate(progs) for nm in p.ineq_names]
    idx = net.bus_index
    e0 = nv - net.n_buses
    for bus, cap in sorted((cfg.node_caps_lbs or {}).items()):
        row = np.zeros((1, nv * n_t))
        for t in range(n_t):
            row[0, t * nv + e0 + idx[int(bus)]] = 1.0
        a_in.append(sparse.csr_matrix(row))
        in_lo.append(np.array([-np.inf]))
        in_hi.append(np.array([float(cap)]))
        names.append(f"node_cap[{bus}]")
    qp = QuadraticProgram(
        np.concatenate([p.quadratic_diag for p in progs]),
        np.concatenate([p.linear for p in progs]),
        sum(p.constant for p in progs),
        sparse.block_diag([p.A_eq for p in progs], format="csr"),
        np.concatenate([p.b_eq for p in progs]),
        sparse.vstack(a_in, format="csr"),
        np.concatenate(in_lo),
        np.concatenate(in_hi),
        np.concatenate([p.lower for p in progs]),
        np.concatenate([p.upper for p in progs]),
        ineq_names=tuple(names),
    )
    sol = solve_qp(qp, tol)
    _raise_for(sol, "multi-period carbon-aware OPF")
    elapsed = time.perf_counter() - t0
    out = []
    for t, (p, d) in enumerate(zip(progs, loads_by_period)):
        sub = Solution(
            sol.values[t * nv : (t + 1) * nv], p.objective(sol.values[t * nv : (t + 1) * nv]), sol.status,
            np.zeros(0), np.zeros(0), np.zeros(0), sol.iterations, elapsed,
        )
        res = _result(net, d, ptdf, p, sub, elapsed, "carbon", "quadratic", cfg.permit_price,
                      slice(0, net.n_generators), slice(e0, nv))
        _check_conservation(res.e_n.sum(), res.total_emission_lbs)
        out.append(res)
    return out


def solve_angle_opf(net: Network, loads, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Generator dispatch from the angle-formulation baseline OPF."""
    qp = build_angle_opf(net, loads)
    sol = solve_qp(qp, tol)
    _raise_for(sol, "angle-formulation OPF")
    return sol.values[: net.n_generators].copy()


def compare(baseline: DispatchResult, carbon: DispatchResult) -> dict:
    """Side-by-side cost/emission comparison with the same rows for both runs."""
    rows = {}
    for key in ("power_cost", "carbon_cost", "total_cost", "total_emission_tons", "solve_time"):
        rows[key] = {"baseline": getattr(baseline, key), "carbon": getattr(carbon, key)}
    rows["total_emission_lbs"] = {"baseline": baseline.total_emission_lbs, "carbon": carbon.total_emission_lbs}
    return rows
