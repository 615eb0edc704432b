"""DC power flow and power transfer distribution factors (PTDF)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .grid import Network, _components

#: Reduced susceptance matrices with a condition estimate above this are rejected.
SINGULARITY_COND = 1e12


class DisconnectedNetworkError(ValueError):
    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = list(components)


@dataclass(frozen=True)
class PtdfMatrix:
    """Slack-referenced PTDF: ``values[l, n]`` is the MW flow on line ``l``
    per MW injected at bus ``n`` and withdrawn at the slack bus."""

    values: np.ndarray
    slack_bus: int
    bus_ids: tuple[int, ...]
    line_ends: tuple[tuple[int, int], ...]

    @property
    def shape(self):
        return self.values.shape

    def column(self, bus_id: int) -> np.ndarray:
        return self.values[:, self.bus_ids.index(bus_id)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["line", "from_bus", "to_bus", *self.bus_ids])
            for k, (f, t) in enumerate(self.line_ends, start=1):
                w.writerow([k, f, t, *(repr(float(v)) for v in self.values[k - 1])])


def incidence_matrix(net: Network) -> np.ndarray:
    """L x N branch-bus incidence: +1 at the from bus, -1 at the to bus."""
    idx = net.bus_index
    a = np.zeros((net.n_lines, net.n_buses))
    for k, ln in enumerate(net.lines):
        a[k, idx[ln.from_bus]] = 1.0
        a[k, idx[ln.to_bus]] = -1.0
    return a


def susceptance_matrix(net: Network) -> np.ndarray:
    a = incidence_matrix(net)
    b = 1.0 / np.array([ln.reactance for ln in net.lines])
    return a.T @ (b[:, None] * a)


def _reduced_lu(net: Network):
    bmat = susceptance_matrix(net)
    slack = net.bus_index[net.slack_bus]
    keep = np.array([i for i in range(net.n_buses) if i != slack], dtype=int)
    reduced = bmat[np.ix_(keep, keep)]
    if keep.size:
        cond = np.linalg.cond(reduced)
        if not np.isfinite(cond) or cond > SINGULARITY_COND:
            comps = _components(net)
            detached = [c for c in comps if net.slack_bus not in c]
            raise DisconnectedNetworkError(
                f"reduced susceptance matrix is singular (condition {cond:.3g}); "
                f"buses {detached[0] if detached else '?'} are not connected to slack bus {net.slack_bus}",
                detached,
            )
    return scipy.linalg.lu_factor(reduced) if keep.size else None, keep


def compute_ptdf(net: Network) -> PtdfMatrix:
    """Build the L x N PTDF matrix by solving the slack-reduced DC system.

    Raises
    ------
    DisconnectedNetworkError
        If some buses cannot reach the slack bus.
    """
    lu, keep = _reduced_lu(net)
    a = incidence_matrix(net)
    b = 1.0 / np.array([ln.reactance for ln in net.lines])
    values = np.zeros((net.n_lines, net.n_buses))
    if keep.size:
        # theta_red = B_red^-1 P_red, flows = diag(b) A theta
        inv = scipy.linalg.lu_solve(lu, np.eye(keep.size))
        values[:, keep] = (b[:, None] * a[:, keep]) @ inv
    values.setflags(write=False)
    return PtdfMatrix(
        values,
        net.slack_bus,
        tuple(int(i) for i in net.bus_ids),
        tuple((ln.from_bus, ln.to_bus) for ln in net.lines),
    )


def line_flows(ptdf: PtdfMatrix, injections) -> np.ndarray:
    """Line flows in MW for per-bus net injections in MW (``bus_ids`` order)."""
    inj = np.asarray(injections, dtype=float)
    if inj.shape != (ptdf.values.shape[1],):
        raise ValueError(f"injections must have shape ({ptdf.values.shape[1]},), got {inj.shape}")
    return ptdf.values @ inj


def dc_power_flow(net: Network, injections) -> tuple[np.ndarray, np.ndarray]:
    """Angle-based DC power flow.

    Solves ``B theta = P`` with the slack angle fixed at zero and returns the
    bus angles (rad) and the line flows ``base_mva * (theta_f - theta_t) / x``
    in MW.  The slack bus absorbs any imbalance.  Independent of the PTDF
    construction, so it doubles as its test oracle.
    """
    inj = np.asarray(injections, dtype=float)
    if inj.shape != (net.n_buses,):
        raise ValueError(f"injections must have shape ({net.n_buses},), got {inj.shape}")
    _reduced_lu(net)  # connectivity check only
    bmat = susceptance_matrix(net)
    slack = net.bus_index[net.slack_bus]
    keep = np.array([i for i in range(net.n_buses) if i != slack], dtype=int)
    theta = np.zeros(net.n_buses)
    if keep.size:
        theta[keep] = np.linalg.solve(bmat[np.ix_(keep, keep)], inj[keep] / net.base_mva)
    x = np.array([ln.reactance for ln in net.lines])
    flows = net.base_mva * (incidence_matrix(net) @ theta) / x
    return theta, flows
