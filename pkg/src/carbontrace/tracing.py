"""Generator-to-load distribution factors and locational carbon signals.

A factor matrix ``alpha`` (buses x generators) attributes ``alpha[n, g] * p_g``
of generator ``g``'s output to the load at bus ``n``.  Under a lossless DC
model each column sums to one, so nodal emissions
``e_n = sum_g alpha[n, g] * gamma_g * p_g`` add up to the system emission.

The marginal rate at a bus weights generator emission rates by the squared
factors::

    mu_n = sum_g alpha[n, g]^2 gamma_g / sum_g alpha[n, g]^2

which is the projection of the emission gradient onto the demand gradient.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dispatch import CarbonOpfConfig, InfeasibleDispatchError, solve_capped_dispatch
from .flow import PtdfMatrix, compute_ptdf
from .grid import Network
from .qp import OPTIMAL, QuadraticProgram, solve_qp
from .sampler import Dataset
from .validation import check_dispatch, check_dispatch_loads, check_in_service, check_vector

logger = logging.getLogger(__name__)

FitMode = Literal["joint", "per_generator"]

#: Loads at or below this (MW) have no defined average emission rate.
ANCE_LOAD_THRESHOLD = 1e-6
NA = "NA"


class RankDeficientError(ValueError):
    """The dispatch matrix cannot separate some generators."""

    def __init__(self, message, groups=()):
        super().__init__(message)
        self.groups = [list(g) for g in groups]


def _collinear_groups(P: np.ndarray, cols: np.ndarray, tol: float) -> list[list[int]]:
    """Generator groups (global indices) tied together by the null space of ``P``."""
    _, s, vt = np.linalg.svd(P, full_matrices=True)
    rank = int(np.sum(s > tol))
    null = vt[rank:]
    if null.size == 0:
        return []
    involved = np.abs(null) > 1e-8
    # union generators sharing a null vector
    parent = list(range(P.shape[1]))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for row in involved:
        idx = np.flatnonzero(row)
        for j in idx[1:]:
            parent[find(j)] = find(idx[0])
    groups: dict[int, list[int]] = {}
    for j in np.flatnonzero(involved.any(axis=0)):
        groups.setdefault(find(j), []).append(int(cols[j]))
    return sorted(groups.values())


def _fit_joint(P, D, load_rows, ridge, tol):
    """min sum_s sum_n (D - P alpha')^2 + ridge * |alpha|^2
    s.t. columns of alpha sum to one, 0 <= alpha <= 1.

    Works through a thin SVD ``P = U S V'`` with auxiliary ``z_n = S V' alpha_n``
    so the kernel sees a diagonal Hessian.
    """
    S, G = P.shape
    u, sv, vt = np.linalg.svd(P, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * max(S, G) * np.finfo(float).eps)) if sv.size and sv[0] > 0 else 0
    u, sv, vt = u[:, :rank], sv[:rank], vt[:rank]
    W = sv[:, None] * vt  # r x G
    nl = load_rows.size
    n_alpha = nl * G
    n_z = nl * rank
    lam = ridge * (sv[0] ** 2 if rank else 1.0)
    quad = np.concatenate([np.full(n_alpha, lam), np.ones(n_z)])
    Dl = D[:, load_rows]
    proj = u.T @ Dl  # r x nl
    lin = np.concatenate([np.zeros(n_alpha), -2.0 * proj.T.ravel()])
    const = float(np.sum(Dl**2))
    # column sums: sum_n alpha[n, g] = 1
    col_sum = sparse.hstack(
        [sparse.kron(np.ones((1, nl)), sparse.identity(G)), sparse.csr_matrix((G, n_z))], format="csr"
    )
    # z_n - W alpha_n = 0
    link = sparse.hstack(
        [sparse.kron(sparse.identity(nl), sparse.csr_matrix(-W)), sparse.identity(n_z)], format="csr"
    )
    A = sparse.vstack([col_sum, link], format="csr")
    b = np.concatenate([np.ones(G), np.zeros(n_z)])
    lower = np.concatenate([np.zeros(n_alpha), np.full(n_z, -np.inf)])
    upper = np.concatenate([np.ones(n_alpha), np.full(n_z, np.inf)])
    qp = QuadraticProgram(quad, lin, const, A, b, None, None, None, lower, upper)
    sol = solve_qp(qp, tol, tie_break="none")
    if sol.status != OPTIMAL:
        raise RuntimeError(f"factor fit failed: {sol.status} ({sol.message})")
    return sol.values[:n_alpha].reshape(nl, G), rank, sol


def _fit_per_generator(P, D, load_rows, tol):
    """Literal per-generator regression: d_n ~ alpha[n, g] * p_g with column sum one."""
    S, G = P.shape
    nl = load_rows.size
    Dl = D[:, load_rows]
    pp = np.sum(P * P, axis=0)  # G
    pd = P.T @ Dl  # G x nl
    quad = np.repeat(pp, nl)
    lin = -2.0 * pd.ravel()
    const = float(G * np.sum(Dl**2))
    A = sparse.kron(sparse.identity(G), np.ones((1, nl)), format="csr")
    qp = QuadraticProgram(quad, lin, const, A, np.ones(G), None, None, None, None, None)
    sol = solve_qp(qp, tol, tie_break="none")
    if sol.status != OPTIMAL:
        raise RuntimeError(f"factor fit failed: {sol.status} ({sol.message})")
    return sol.values.reshape(G, nl).T, sol


def _metrics(D, D_hat, load_rows=None) -> dict:
    err = np.abs(D - D_hat)
    per_bus_mae = err.mean(axis=0)
    per_bus_max = err.max(axis=0)
    rows = np.arange(D.shape[1]) if load_rows is None or len(load_rows) == 0 else load_rows
    return {
        "mae": float(per_bus_mae[rows].mean()),
        "max_ae": float(per_bus_max.max()),
        "per_bus_mae": per_bus_mae.tolist(),
        "per_bus_max_ae": per_bus_max.tolist(),
        "n_samples": int(D.shape[0]),
    }


class DistributionFactorRegressor(RegressorMixin, BaseEstimator):
    """Constrained regression of nodal loads on generator outputs.

    Parameters
    ----------
    mode : {"joint", "per_generator"}
        ``joint`` fits ``D ~ P alpha'`` over all generators at once with
        ``0 <= alpha <= 1``.  ``per_generator`` regresses each bus load on a
        single generator's output with only the column-sum constraint.
    ridge : float
        Relative weight of a ``|alpha|^2`` penalty that selects the
        minimum-norm factors when dispatch samples are collinear.  Only
        applied to rank-deficient designs; with ``ridge=0`` such a design
        raises :class:`RankDeficientError`.
    tol : float
        Kernel tolerance.
    zero_output_tol : float
        Generators whose output never exceeds this (MW) are left out of the
        fit and receive the average load-share column.

    Attributes
    ----------
    alpha_ : ndarray of shape (n_buses, n_generators)
    fit_metrics_ : dict
        Training MAE and Max-AE (MW), overall and per bus.
    dropped_generators_ : list of int
        0-based indices of generators excluded from the fit.
    rank_ : int
        Numerical rank of the dispatch matrix over fitted generators.
    collinear_groups_ : list of list of int
    """

    def __init__(self, mode: FitMode = "joint", ridge: float = 1e-9, tol: float = 1e-10, zero_output_tol: float = 1e-9):
        self.mode = mode
        self.ridge = ridge
        self.tol = tol
        self.zero_output_tol = zero_output_tol

    def fit(self, X, y):
        """Fit factors from dispatch ``X`` (S x G) and loads ``y`` (S x N)."""
        P, D = check_dispatch_loads(X, y)
        if self.mode not in ("joint", "per_generator"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        S, G = P.shape
        N = D.shape[1]
        active = np.flatnonzero(np.max(np.abs(P), axis=0) > self.zero_output_tol)
        if active.size == 0:
            raise ValueError("all generator outputs are identically zero")
        dropped = [int(g) for g in range(G) if g not in set(active.tolist())]
        if dropped:
            logger.info("dropping zero-output generators %s", [g + 1 for g in dropped])
        load_rows = np.flatnonzero(np.max(D, axis=0) > 0)
        scale = float(np.max(np.abs(D))) or 1.0
        Ps, Ds = P[:, active] / scale, D / scale

        sv = np.linalg.svd(Ps, compute_uv=False)
        rank_tol = sv[0] * max(Ps.shape) * 1e-10
        self.rank_ = int(np.sum(sv > rank_tol))
        self.collinear_groups_ = []
        if self.rank_ < active.size:
            self.collinear_groups_ = _collinear_groups(Ps, active, rank_tol)
            if self.mode == "joint" and self.ridge == 0:
                names = "; ".join("{" + ", ".join(f"G{g + 1}" for g in grp) + "}" for grp in self.collinear_groups_)
                raise RankDeficientError(
                    f"dispatch matrix has rank {self.rank_} < {active.size} generators; collinear groups: {names}",
                    self.collinear_groups_,
                )
            logger.info("dispatch matrix rank %d < %d; minimum-norm factors selected", self.rank_, active.size)

        alpha = np.zeros((N, G))
        if load_rows.size:
            if self.mode == "joint":
                ridge = self.ridge if self.rank_ < active.size else 0.0
                sub, _, _ = _fit_joint(Ps, Ds, load_rows, ridge, self.tol)
                sub = np.clip(sub, 0.0, 1.0)
            else:
                sub, _ = _fit_per_generator(Ps, Ds, load_rows, self.tol)
            alpha[np.ix_(load_rows, active)] = sub
            # exact column sums; the kernel meets them only to tolerance
            sums = alpha[:, active].sum(axis=0)
            alpha[:, active] /= np.where(sums != 0, sums, 1.0)
        if dropped:
            tot = D.sum(axis=1, keepdims=True)
            share = np.divide(D, tot, out=np.zeros_like(D), where=tot > 0).mean(axis=0)
            share = share / share.sum() if share.sum() > 0 else np.full(N, 1.0 / N)
            alpha[:, dropped] = share[:, None]
        self.alpha_ = alpha
        self.dropped_generators_ = dropped
        self.n_features_in_ = G
        self.n_outputs_ = N
        self.load_buses_ = load_rows
        self.fit_metrics_ = _metrics(D, P @ alpha.T, load_rows)
        return self

    def predict(self, X):
        """Reconstructed nodal loads ``X @ alpha_.T``."""
        check_is_fitted(self, "alpha_")
        P = check_dispatch(X, n_generators=self.n_features_in_, name="X")
        return P @ self.alpha_.T


@dataclass
class FactorMatrix:
    """Fitted factors with per-bus training metrics.

    ``alpha[n, g]`` uses internal bus order ``bus_ids`` and 0-based generators.
    """

    alpha: np.ndarray
    bus_ids: tuple[int, ...]
    fit_metrics: dict = field(default_factory=dict)
    network_fingerprint: str = ""
    mode: str = "joint"
    dropped_generators: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.bus_ids = tuple(int(b) for b in self.bus_ids)
        if self.alpha.ndim != 2 or self.alpha.shape[0] != len(self.bus_ids):
            raise ValueError("alpha must be (n_buses, n_generators) matching bus_ids")

    @property
    def n_buses(self):
        return self.alpha.shape[0]

    @property
    def n_generators(self):
        return self.alpha.shape[1]

    def column_sums(self) -> np.ndarray:
        return self.alpha.sum(axis=0)

    def check_invariants(self, tol: float = 1e-8) -> list[str]:
        problems = []
        bad = np.flatnonzero(np.abs(self.column_sums() - 1.0) > tol)
        if bad.size:
            problems.append(f"columns {[int(g) + 1 for g in bad]} do not sum to one")
        if self.alpha.min() < -tol or self.alpha.max() > 1 + tol:
            problems.append("entries outside [0, 1]")
        return problems

    def evaluate(self, dataset: Dataset) -> dict:
        """MAE / Max-AE (MW) of reconstructed loads on ``dataset``."""
        d_hat = reconstruct_loads(self, dataset.P)
        load_rows = np.flatnonzero(np.max(dataset.D, axis=0) > 0)
        return _metrics(dataset.D, d_hat, load_rows)

    def metadata(self) -> dict:
        return {
            "bus_ids": list(self.bus_ids),
            "n_generators": self.n_generators,
            "network_fingerprint": self.network_fingerprint,
            "mode": self.mode,
            "dropped_generators": [g + 1 for g in self.dropped_generators],
            "fit_metrics": self.fit_metrics,
            **self.meta,
        }

    def save(self, csv_path, meta_path=None):
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bus", *(f"g{g + 1}" for g in range(self.n_generators))])
            for b, row in zip(self.bus_ids, self.alpha):
                w.writerow([b, *(repr(float(v)) for v in row)])
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta_path.write_text(json.dumps(self.metadata(), indent=1, sort_keys=True))
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path, meta_path=None) -> "FactorMatrix":
        csv_path = Path(csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{csv_path}: no factor rows")
        body = rows[1:]
        fm = cls(
            alpha=np.array([[float(v) for v in r[1:]] for r in body]),
            bus_ids=tuple(int(r[0]) for r in body),
            fit_metrics=meta.get("fit_metrics", {}),
            network_fingerprint=meta.get("network_fingerprint", ""),
            mode=meta.get("mode", "joint"),
            dropped_generators=[g - 1 for g in meta.get("dropped_generators", [])],
        )
        return fm


def fit_distribution_factors(
    train: Dataset, mode: FitMode = "joint", *, ridge: float = 1e-9, tol: float = 1e-10
) -> FactorMatrix:
    """Fit a :class:`FactorMatrix` on a training dataset."""
    est = DistributionFactorRegressor(mode=mode, ridge=ridge, tol=tol).fit(train.P, train.D)
    return FactorMatrix(
        est.alpha_,
        train.bus_ids,
        est.fit_metrics_,
        train.network_fingerprint,
        mode,
        est.dropped_generators_,
        {"rank": est.rank_, "collinear_groups": [[g + 1 for g in grp] for grp in est.collinear_groups_]},
    )


def _alpha(factors) -> np.ndarray:
    return np.asarray(getattr(factors, "alpha", factors), dtype=float)


def reconstruct_loads(factors, p_g) -> np.ndarray:
    """Nodal loads implied by dispatch: ``alpha @ p`` (accepts one or many samples)."""
    alpha = _alpha(factors)
    p = np.asarray(p_g, dtype=float)
    if p.shape[-1] != alpha.shape[1]:
        raise ValueError(f"dispatch has {p.shape[-1]} generators, factors have {alpha.shape[1]}")
    return p @ alpha.T


def nodal_emissions(factors, gamma, p_g) -> np.ndarray:
    """Per-bus emissions in lbs: ``e_n = sum_g alpha[n, g] gamma_g p_g``."""
    alpha = _alpha(factors)
    gamma = check_vector(gamma, alpha.shape[1], "gamma")
    p = check_vector(p_g, alpha.shape[1], "p_g")
    return alpha @ (gamma * p)


def ance(e_n, d_n, threshold: float = ANCE_LOAD_THRESHOLD) -> np.ndarray:
    """Average nodal emission rate ``e_n / d_n``; NaN where the load is at most ``threshold``."""
    e = np.asarray(e_n, dtype=float)
    d = np.asarray(d_n, dtype=float)
    if e.shape != d.shape:
        raise ValueError("e_n and d_n must have the same shape")
    out = np.full(e.shape, np.nan)
    ok = d > threshold
    out[ok] = e[ok] / d[ok]
    return out


def lmce(factors, gamma, in_service=None) -> np.ndarray:
    """Marginal emission rate per bus over the in-service generators.

    NaN where a bus has no nonzero factor among them.
    """
    alpha = _alpha(factors)
    gamma = check_vector(gamma, alpha.shape[1], "gamma")
    mask = check_in_service(in_service, alpha.shape[1])
    a = alpha[:, mask]
    # the ratio is scale-free per row; normalising keeps tiny factors from underflowing
    peak = np.max(np.abs(a), axis=1, keepdims=True)
    a2 = np.divide(a, peak, out=np.zeros_like(a), where=peak > 0) ** 2
    num = a2 @ gamma[mask]
    den = a2.sum(axis=1)
    out = np.full(alpha.shape[0], np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def lmce_gradient_projection(factors, gamma, in_service=None) -> np.ndarray:
    """Same quantity as :func:`lmce`, written as ``(grad e_n . grad d_n) / |grad d_n|^2``.

    ``grad d_n = alpha[n, :]`` and ``grad e_n = alpha[n, :] * gamma`` over the
    in-service generators.
    """
    alpha = _alpha(factors)
    gamma = check_vector(gamma, alpha.shape[1], "gamma")
    mask = check_in_service(in_service, alpha.shape[1])
    out = np.full(alpha.shape[0], np.nan)
    for n in range(alpha.shape[0]):
        grad_d = alpha[n, mask]
        peak = float(np.max(np.abs(grad_d)))
        if peak == 0:
            continue
        grad_d = grad_d / peak
        grad_e = grad_d * gamma[mask]
        nrm = float(np.dot(grad_d, grad_d))
        if nrm > 0:
            out[n] = float(np.dot(grad_e, grad_d)) / nrm
    return out


def _system_emission(net, ptdf, loads, cfg):
    return solve_capped_dispatch(net, loads, ptdf, cfg).total_emission_lbs


def lmce_sensitivity_oracle(
    net: Network,
    ptdf: PtdfMatrix | None,
    loads,
    bus: int,
    delta_mw: float = 1.0,
    cfg: CarbonOpfConfig | None = None,
    *,
    central: bool = False,
) -> float:
    """Finite-difference marginal emission rate at ``bus`` (external id).

    Re-solves the dispatch with the load at ``bus`` raised by ``delta_mw``
    and returns the change in system emission per MW.  ``central=True``
    also lowers the load and uses the symmetric difference.
    """
    if not delta_mw > 0:
        raise ValueError("delta_mw must be > 0")
    ptdf = ptdf or compute_ptdf(net)
    d = np.asarray(loads, dtype=float)
    k = net.bus_index[int(bus)]
    up = d.copy()
    up[k] += delta_mw
    try:
        e_up = _system_emission(net, ptdf, up, cfg)
        if central:
            if d[k] < delta_mw:
                raise ValueError(f"bus {bus} load {d[k]:.6g} MW is below delta {delta_mw:g} MW; use a forward difference")
            dn = d.copy()
            dn[k] -= delta_mw
            return (e_up - _system_emission(net, ptdf, dn, cfg)) / (2 * delta_mw)
        return (e_up - _system_emission(net, ptdf, d, cfg)) / delta_mw
    except InfeasibleDispatchError as exc:
        raise InfeasibleDispatchError(
            f"perturbed dispatch at bus {bus} is infeasible ({exc}); try a smaller delta_mw", exc.violated
        ) from exc


def lmce_oracle_all(net, ptdf, loads, buses=None, delta_mw=1.0, cfg=None, *, central=False) -> np.ndarray:
    """Oracle values for ``buses`` (default: every bus), base solve shared."""
    ptdf = ptdf or compute_ptdf(net)
    buses = list(net.bus_ids) if buses is None else list(buses)
    d = np.asarray(loads, dtype=float)
    base = None if central else _system_emission(net, ptdf, d, cfg)
    out = np.empty(len(buses))
    for i, b in enumerate(buses):
        if central:
            out[i] = lmce_sensitivity_oracle(net, ptdf, d, b, delta_mw, cfg, central=True)
            continue
        up = d.copy()
        up[net.bus_index[int(b)]] += delta_mw
        try:
            out[i] = (_system_emission(net, ptdf, up, cfg) - base) / delta_mw
        except InfeasibleDispatchError as exc:
            raise InfeasibleDispatchError(
                f"perturbed dispatch at bus {b} is infeasible ({exc}); try a smaller delta_mw", exc.violated
            ) from exc
    return out


def in_service_from_dispatch(p_g, tol: float = 1e-6) -> np.ndarray:
    """Generators producing more than ``tol`` MW."""
    return np.asarray(p_g, dtype=float) > tol


@dataclass
class CarbonReport:
    bus_ids: tuple[int, ...]
    loads: np.ndarray
    e_n: np.ndarray
    ance: np.ndarray
    lmce: np.ndarray
    in_service: np.ndarray
    total_emission_lbs: float
    oracle: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def _rows(self, sort: bool):
        order = np.arange(len(self.bus_ids))
        if sort:
            key = np.where(np.isnan(self.lmce), np.inf, self.lmce)
            order = np.argsort(key, kind="stable")
        for k in order:
            yield k

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        buses = []
        for k in self._rows(False):
            row = {
                "bus": self.bus_ids[k],
                "load_mw": float(self.loads[k]),
                "e_lbs": float(self.e_n[k]),
                "ance_lbs_per_mwh": clean(float(self.ance[k])),
                "lmce_lbs_per_mwh": clean(float(self.lmce[k])),
            }
            if self.oracle is not None:
                row["oracle_lbs_per_mwh"] = clean(float(self.oracle[k]))
            buses.append(row)
        return {
            "total_emission_lbs": self.total_emission_lbs,
            "in_service": [int(g) + 1 for g in np.flatnonzero(self.in_service)],
            "buses": buses,
            **self.meta,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def to_csv(self, path, sort: bool = False):
        """One row per bus; undefined rates are written as ``NA``.  ``sort`` orders by LMCE."""

        def fmt(v):
            return NA if math.isnan(v) else repr(float(v))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["bus", "load_mw", "e_lbs", "ance_lbs_per_mwh", "lmce_lbs_per_mwh"]
            if self.oracle is not None:
                head.append("oracle_lbs_per_mwh")
            w.writerow(head)
            for k in self._rows(sort):
                row = [self.bus_ids[k], repr(float(self.loads[k])), repr(float(self.e_n[k])), fmt(self.ance[k]), fmt(self.lmce[k])]
                if self.oracle is not None:
                    row.append(fmt(self.oracle[k]))
                w.writerow(row)


def carbon_report(factors: FactorMatrix, net: Network, p_g, loads, *, in_service=None, oracle=None, meta=None) -> CarbonReport:
    """Nodal emissions, ANCE and LMCE for one dispatch.

    ``in_service`` defaults to the generators with positive output in ``p_g``.
    """
    gamma = net.emission_rates
    p = check_vector(p_g, net.n_generators, "p_g")
    d = check_vector(loads, net.n_buses, "loads")
    mask = in_service_from_dispatch(p) if in_service is None else check_in_service(in_service, net.n_generators)
    e = nodal_emissions(factors, gamma, p)
    return CarbonReport(
        bus_ids=net.bus_ids,
        loads=d,
        e_n=e,
        ance=ance(e, d),
        lmce=lmce(factors, gamma, mask),
        in_service=mask,
        total_emission_lbs=float(gamma @ p),
        oracle=None if oracle is None else np.asarray(oracle, dtype=float),
        meta=dict(meta or {}),
    )
