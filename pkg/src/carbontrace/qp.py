"""Convex QP/LP kernel with separable quadratic costs.

Problems have the form::

    minimise    sum_i q_i x_i**2 + c @ x + k
    subject to  A_eq x = b_eq
                l_in <= A_in x <= u_in
                lo <= x <= hi

with ``q >= 0``.  They are solved by a Mehrotra predictor-corrector
interior-point method followed by an active-set polish.  When the optimum
is not unique the lexicographically smallest optimal point (by variable
index) is returned.

Dual sign convention: at an optimum ::

    2 q x + c - A_eq.T @ eq_duals + A_in.T @ ineq_duals + bound_duals = 0

A positive ``ineq_duals[i]`` (``bound_duals[j]``) means the upper side of the
constraint is binding, a negative one the lower side.  ``eq_duals`` are the
sensitivities of the optimal objective to ``b_eq``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.optimize import lsq_linear
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERIC_FAILURE = "numeric_failure"

DEFAULT_TOL = 1e-8
_DENSE_LIMIT = 600
_DENSE_RUIZ = 250_000
_BIG = 1e13


def _as_csr(a, n):
    if a is None:
        return sparse.csr_matrix((0, n))
    a = sparse.csr_matrix(a, dtype=float)
    if a.shape[1] != n:
        raise ValueError(f"constraint matrix has {a.shape[1]} columns, expected {n}")
    return a


def _vec(v, n, default, what):
    if v is None:
        return np.full(n, default, dtype=float)
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{what} must have length {n}, got {arr.shape[0]}")
    return arr


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    """Convex program with a diagonal quadratic objective.

    ``quadratic_diag[i]`` multiplies ``x_i**2`` directly (no factor 1/2).
    Missing bounds default to ``(-inf, inf)``.
    """

    quadratic_diag: np.ndarray
    linear: np.ndarray
    constant: float = 0.0
    A_eq: sparse.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    A_ineq: sparse.csr_matrix | None = None
    ineq_lower: np.ndarray | None = None
    ineq_upper: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    var_names: tuple[str, ...] | None = None
    eq_names: tuple[str, ...] | None = None
    ineq_names: tuple[str, ...] | None = None

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float).reshape(-1)
        n = lin.size
        quad = _vec(self.quadratic_diag, n, 0.0, "quadratic_diag")
        a_eq = _as_csr(self.A_eq, n)
        a_in = _as_csr(self.A_ineq, n)
        set_ = object.__setattr__
        set_(self, "linear", lin)
        set_(self, "quadratic_diag", quad)
        set_(self, "constant", float(self.constant))
        set_(self, "A_eq", a_eq)
        set_(self, "b_eq", _vec(self.b_eq, a_eq.shape[0], 0.0, "b_eq"))
        set_(self, "A_ineq", a_in)
        set_(self, "ineq_lower", _vec(self.ineq_lower, a_in.shape[0], -np.inf, "ineq_lower"))
        set_(self, "ineq_upper", _vec(self.ineq_upper, a_in.shape[0], np.inf, "ineq_upper"))
        set_(self, "lower", _vec(self.lower, n, -np.inf, "lower"))
        set_(self, "upper", _vec(self.upper, n, np.inf, "upper"))
        if np.any(quad < 0) or not np.all(np.isfinite(quad)):
            raise ValueError("quadratic_diag entries must be finite and >= 0")
        if not np.all(np.isfinite(lin)) or not np.all(np.isfinite(self.b_eq)):
            raise ValueError("linear costs and equality right-hand sides must be finite")
        if np.any(self.lower > self.upper) or np.any(self.ineq_lower > self.ineq_upper):
            raise ValueError("every lower bound must not exceed its upper bound")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise ValueError("variable bounds must not be +inf below or -inf above")

    @property
    def n_vars(self) -> int:
        return self.linear.size

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.A_ineq.shape[0]

    @property
    def is_lp(self) -> bool:
        return not np.any(self.quadratic_diag > 0)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.quadratic_diag @ (x * x) + self.linear @ x + self.constant)

    def scaled(self, factor: float) -> "QuadraticProgram":
        """Same feasible set with the objective multiplied by ``factor > 0``."""
        return _replace(
            self,
            quadratic_diag=self.quadratic_diag * factor,
            linear=self.linear * factor,
            constant=self.constant * factor,
        )


def _replace(qp: QuadraticProgram, **kw) -> QuadraticProgram:
    fields_ = {
        k: getattr(qp, k)
        for k in (
            "quadratic_diag", "linear", "constant", "A_eq", "b_eq", "A_ineq", "ineq_lower",
            "ineq_upper", "lower", "upper", "var_names", "eq_names", "ineq_names",
        )
    }
    fields_.update(kw)
    return QuadraticProgram(**fields_)


@dataclass
class Solution:
    values: np.ndarray
    objective: float
    status: str
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    bound_duals: np.ndarray
    iterations: int = 0
    wall_time: float = 0.0
    message: str = ""
    residuals: dict = field(default_factory=dict)
    #: infeasible programs: names of constraints that had to be relaxed
    violated: list = field(default_factory=list)

    @property
    def is_optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def dual_values(self) -> dict:
        return {"eq": self.eq_duals, "ineq": self.ineq_duals, "bounds": self.bound_duals}


@dataclass(frozen=True)
class KKTReport:
    primal_residual: float
    stationarity_residual: float
    complementarity_residual: float
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def _side_products(lam, act, lo, hi):
    """Complementarity of signed multipliers: lam > 0 pairs with hi, lam < 0 with lo."""
    up = np.maximum(lam, 0.0)
    dn = np.maximum(-lam, 0.0)
    gap_hi = np.where(np.isfinite(hi), np.abs(hi - act), np.inf)
    gap_lo = np.where(np.isfinite(lo), np.abs(act - lo), np.inf)
    with np.errstate(invalid="ignore"):
        r_up = np.where(up > 0, np.where(np.isinf(gap_hi), up, up * gap_hi), 0.0)
        r_dn = np.where(dn > 0, np.where(np.isinf(gap_lo), dn, dn * gap_lo), 0.0)
    return np.maximum(r_up, r_dn)


def _residuals(qp: QuadraticProgram, x, y, lam, nu):
    ax_eq = qp.A_eq @ x
    ax_in = qp.A_ineq @ x
    prim = [np.abs(ax_eq - qp.b_eq)]
    prim.append(np.maximum(qp.ineq_lower - ax_in, 0.0))
    prim.append(np.maximum(ax_in - qp.ineq_upper, 0.0))
    prim.append(np.maximum(qp.lower - x, 0.0))
    prim.append(np.maximum(x - qp.upper, 0.0))
    grad = 2.0 * qp.quadratic_diag * x + qp.linear - qp.A_eq.T @ y + qp.A_ineq.T @ lam + nu
    comp = np.concatenate(
        [_side_products(lam, ax_in, qp.ineq_lower, qp.ineq_upper), _side_products(nu, x, qp.lower, qp.upper)]
    )

    def mx(parts):
        parts = [p for p in parts if p.size]
        return float(max((np.max(p) for p in parts), default=0.0))

    return mx(prim), mx([np.abs(grad)]), mx([comp])


def _drop_inactive(qp: QuadraticProgram, x, lam, nu):
    """Zero multipliers on rows and bounds whose gap exceeds the multiplier.

    Such multipliers are rounding leftovers; on a loose row with a large
    right-hand side they would otherwise dominate the complementarity residual.
    """

    def clean(mult, act, lo, hi):
        gap = np.where(mult > 0, np.abs(hi - act), np.abs(act - lo))
        gap = np.where(np.isnan(gap), np.inf, gap)
        return np.where(gap > np.maximum(np.abs(mult), 1e-9 * (1 + np.abs(act))) * 1e3, 0.0, mult)

    with np.errstate(invalid="ignore"):
        return clean(lam, qp.A_ineq @ x, qp.ineq_lower, qp.ineq_upper), clean(nu, x, qp.lower, qp.upper)


def _recover_duals(qp: QuadraticProgram, x, tight_tol=1e-9):
    """Sign-feasible multipliers for a given primal point, by bounded least squares
    on stationarity with only the tight sides allowed a nonzero multiplier."""
    n = qp.n_vars
    ax = qp.A_ineq @ x

    def tight(val, bound):
        return np.isfinite(bound) & (np.abs(val - bound) <= tight_tol * (1 + np.abs(np.where(np.isfinite(bound), bound, 0))))

    r_hi, r_lo = np.flatnonzero(tight(ax, qp.ineq_upper)), np.flatnonzero(tight(ax, qp.ineq_lower))
    b_hi, b_lo = np.flatnonzero(tight(x, qp.upper)), np.flatnonzero(tight(x, qp.lower))
    n_cols = qp.n_eq + r_hi.size + r_lo.size + b_hi.size + b_lo.size
    if n * n_cols > 4_000_000:
        return None
    ain = qp.A_ineq.toarray()
    eye = np.eye(n)
    # 2qx + c - A_eq'y + A_in'lam + nu = 0
    mat = np.hstack([-qp.A_eq.toarray().T, ain[r_hi].T, -ain[r_lo].T, eye[:, b_hi], -eye[:, b_lo]])
    g = -(2.0 * qp.quadratic_diag * x + qp.linear)
    lb = np.concatenate([np.full(qp.n_eq, -np.inf), np.zeros(n_cols - qp.n_eq)])
    if n_cols == 0:
        return np.zeros(0), np.zeros(qp.n_ineq), np.zeros(n)
    u = lsq_linear(mat, g, bounds=(lb, np.full(n_cols, np.inf)), method="bvls", tol=1e-14).x
    k = qp.n_eq
    y = u[:k]
    lam = np.zeros(qp.n_ineq)
    nu = np.zeros(n)
    lam[r_hi] = u[k : k + r_hi.size]
    k += r_hi.size
    lam[r_lo] -= u[k : k + r_lo.size]
    k += r_lo.size
    nu[b_hi] = u[k : k + b_hi.size]
    k += b_hi.size
    nu[b_lo] -= u[k:]
    return y, lam, nu


def check_kkt(qp: QuadraticProgram, sol: Solution, tol: float = 1e-6) -> KKTReport:
    """Verify first-order optimality of ``sol`` for ``qp``.

    Residuals are absolute max-norms: MW (constraint units) for primal
    feasibility, objective-per-variable units for stationarity, and
    multiplier times slack for complementarity.
    """
    p, s, c = _residuals(qp, sol.values, sol.eq_duals, sol.ineq_duals, sol.bound_duals)
    return KKTReport(p, s, c, bool(p <= tol and s <= tol and c <= tol))


# --------------------------------------------------------------------------
# internal standard form: min 1/2 v'Hv + c'v, A v = b, lo <= v <= hi


@dataclass
class _Std:
    h: np.ndarray
    c: np.ndarray
    A: sparse.csr_matrix
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _standard_form(qp: QuadraticProgram) -> _Std:
    n, mi = qp.n_vars, qp.n_ineq
    a = sparse.bmat(
        [[qp.A_eq, sparse.csr_matrix((qp.n_eq, mi))], [qp.A_ineq, -sparse.identity(mi, format="csr")]],
        format="csr",
    ) if (qp.n_eq + mi) else sparse.csr_matrix((0, n + mi))
    return _Std(
        h=np.concatenate([2.0 * qp.quadratic_diag, np.zeros(mi)]),
        c=np.concatenate([qp.linear, np.zeros(mi)]),
        A=a,
        b=np.concatenate([qp.b_eq, np.zeros(mi)]),
        lo=np.concatenate([qp.lower, qp.ineq_lower]),
        hi=np.concatenate([qp.upper, qp.ineq_upper]),
    )


def _ruiz(h, A, iters=15):
    n = A.shape[1]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    small = m * n <= _DENSE_RUIZ
    absA = np.abs(A.toarray()) if small else abs(A).tocsc()
    for _ in range(iters):
        if small:
            sa = e[:, None] * absA * d[None, :]
            col = sa.max(axis=0) if m else np.zeros(n)
            row = sa.max(axis=1) if m else np.zeros(0)
        else:
            sa = sparse.diags(e) @ absA @ sparse.diags(d)
            col = np.asarray(sa.max(axis=0).todense()).ravel() if m else np.zeros(n)
            row = np.asarray(sa.max(axis=1).todense()).ravel() if m else np.zeros(0)
        col = np.maximum(col, np.abs(h) * d * d)
        col = np.where(col > 0, col, 1.0)
        row = np.where(row > 0, row, 1.0)
        d = d / np.sqrt(col)
        e = e / np.sqrt(row)
    return d, e


class _KKTSolver:
    """Factorises [[H + S + dp, A'], [A, -dd]] and solves with refinement."""

    def __init__(self, hs, A, dp=1e-10, dd=1e-10, dense_A=None):
        self.n = hs.size
        self.m = A.shape[0]
        self.hs = hs
        self.A = A
        self.dense = (self.n + self.m) <= _DENSE_LIMIT
        reg = np.concatenate([np.full(self.n, dp), np.full(self.m, -dd)])
        if self.dense:
            ad = A.toarray() if dense_A is None else dense_A
            k = np.zeros((self.n + self.m, self.n + self.m))
            k[np.arange(self.n), np.arange(self.n)] = hs
            k[: self.n, self.n :] = ad.T
            k[self.n :, : self.n] = ad
            self.k = k
            kr = k.copy()
            kr[np.diag_indices_from(kr)] += reg
            self.lu = scipy.linalg.lu_factor(kr, check_finite=False)
        else:
            k = sparse.bmat([[sparse.diags(hs), A.T], [A, None]], format="csc") if self.m else sparse.diags(hs).tocsc()
            self.k = k
            self.lu = splu(k + sparse.diags(reg, format="csc"), permc_spec="COLAMD", diag_pivot_thresh=0.0)

    def _raw(self, r):
        return scipy.linalg.lu_solve(self.lu, r, check_finite=False) if self.dense else self.lu.solve(r)

    def solve(self, r1, r2, refine=3):
        r = np.concatenate([r1, r2])
        x = self._raw(r)
        for _ in range(refine):
            res = r - self.k @ x
            if not np.all(np.isfinite(res)) or np.max(np.abs(res)) <= 1e-15 * (1 + np.max(np.abs(r))):
                break
            x = x + self._raw(res)
        return x[: self.n], x[self.n :]


@dataclass
class _IpmResult:
    v: np.ndarray
    y: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    status: str
    iterations: int
    message: str = ""


def _initial_point(lo, hi):
    v = np.zeros(lo.size)
    fl, fu = np.isfinite(lo), np.isfinite(hi)
    both = fl & fu
    width = hi - lo
    theta = np.where(both, np.minimum(1.0, 0.25 * width), 1.0)
    low_side = fl & (v < lo + theta)
    v[low_side] = (lo + theta)[low_side]
    high_side = fu & (v > hi - theta)
    v[high_side] = (hi - theta)[high_side]
    narrow = both & (width <= 2.0)
    v[narrow] = 0.5 * (lo[narrow] + hi[narrow])
    return v


def _projected_start(s: "_Std"):
    """Least-change projection of the box centre onto ``A v = b``, pushed
    back into the interior of the bounds."""
    v = _initial_point(s.lo, s.hi)
    if s.b.size:
        try:
            kkt = _KKTSolver(np.ones(v.size), s.A, dd=1e-8)
            dv, _ = kkt.solve(np.zeros(v.size), s.b - s.A @ v, refine=1)
            if np.all(np.isfinite(dv)):
                v = v + dv
        except (RuntimeError, np.linalg.LinAlgError, ValueError):
            pass
    fl, fu = np.isfinite(s.lo), np.isfinite(s.hi)
    both = fl & fu
    width = np.where(both, s.hi - s.lo, np.inf)
    gap = np.maximum(1.0, 0.1 * np.abs(v))
    gap = np.minimum(gap, 0.25 * width)
    lo_side = fl & (v < s.lo + gap)
    v[lo_side] = (s.lo + gap)[lo_side]
    hi_side = fu & (v > s.hi - gap)
    v[hi_side] = (s.hi - gap)[hi_side]
    return v


def _ipm(s: _Std, eps=1e-10, max_iter=200) -> _IpmResult:
    """Primal-dual predictor-corrector on the scaled standard form."""
    n, m = s.c.size, s.b.size
    fl, fu = np.isfinite(s.lo), np.isfinite(s.hi)
    lo = np.where(fl, s.lo, 0.0)
    hi = np.where(fu, s.hi, 0.0)
    v = _projected_start(s)
    y = np.zeros(m)
    zl = np.where(fl, 1.0, 0.0)
    zu = np.where(fu, 1.0, 0.0)
    ncomp = max(int(fl.sum() + fu.sum()), 1)
    bnorm = 1.0 + (np.max(np.abs(s.b)) if m else 0.0)
    cnorm = 1.0 + np.max(np.abs(s.c)) if n else 1.0
    Ad = s.A.toarray() if n + m <= _DENSE_LIMIT else None
    Aop = Ad if Ad is not None else s.A
    At = Aop.T if Ad is not None else s.A.T.tocsr()
    best = None
    # slacks are carried as iterates: recomputing v - lo loses them to
    # cancellation once they fall below the rounding level of the bound
    sl = np.where(fl, v - lo, 1.0)
    su = np.where(fu, hi - v, 1.0)

    for it in range(1, max_iter + 1):
        rp = Aop @ v - s.b if m else np.zeros(0)
        rd = s.h * v + s.c - (At @ y if m else 0.0) - zl + zu
        mu = float((zl * sl)[fl].sum() + (zu * su)[fu].sum()) / ncomp
        rp_n = float(np.max(np.abs(rp))) if m else 0.0
        rd_n = float(np.max(np.abs(rd))) if n else 0.0
        score = max(rp_n / bnorm, rd_n / cnorm, mu)
        if best is None or score < best[0]:
            best = (score, v.copy(), y.copy(), zl.copy(), zu.copy(), it)
        if rp_n <= eps * bnorm and rd_n <= eps * cnorm and mu <= eps:
            return _IpmResult(v, y, zl, zu, OPTIMAL, it)
        if np.max(np.abs(v)) > _BIG:
            return _IpmResult(v, y, zl, zu, UNBOUNDED, it, "primal iterates diverged")
        if max(np.max(np.abs(y), initial=0.0), np.max(zl, initial=0.0), np.max(zu, initial=0.0)) > _BIG:
            return _IpmResult(v, y, zl, zu, INFEASIBLE, it, "dual iterates diverged")

        sig = np.where(fl, zl / sl, 0.0) + np.where(fu, zu / su, 0.0)
        try:
            kkt = _KKTSolver(s.h + sig, s.A, dense_A=Ad)
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            return _IpmResult(*best[1:5], NUMERIC_FAILURE, it, f"KKT factorisation failed: {exc}")

        def direction(tl, tu):
            r1 = -rd + np.where(fl, tl / sl - zl, 0.0) - np.where(fu, tu / su - zu, 0.0)
            dv, u = kkt.solve(r1, -rp)
            dzl = np.where(fl, (tl - sl * zl - zl * dv) / sl, 0.0)
            dzu = np.where(fu, (tu - su * zu + zu * dv) / su, 0.0)
            return dv, -u, dzl, dzu

        def steps(dv, dzl, dzu, frac=1.0):
            ap = 1.0
            ad = 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                m1 = fl & (dv < 0)
                if m1.any():
                    ap = min(ap, float(np.min(-sl[m1] / dv[m1])) * frac)
                m2 = fu & (dv > 0)
                if m2.any():
                    ap = min(ap, float(np.min(su[m2] / dv[m2])) * frac)
                m3 = fl & (dzl < 0)
                if m3.any():
                    ad = min(ad, float(np.min(-zl[m3] / dzl[m3])) * frac)
                m4 = fu & (dzu < 0)
                if m4.any():
                    ad = min(ad, float(np.min(-zu[m4] / dzu[m4])) * frac)
            return min(ap, 1.0), min(ad, 1.0)

        zero = np.zeros(n)
        dv_a, dy_a, dzl_a, dzu_a = direction(zero, zero)
        ap, ad = steps(dv_a, dzl_a, dzu_a)
        sl_a = sl + ap * dv_a
        su_a = su - ap * dv_a
        zl_a = zl + ad * dzl_a
        zu_a = zu + ad * dzu_a
        mu_a = float((zl_a * sl_a)[fl].sum() + (zu_a * su_a)[fu].sum()) / ncomp
        sigma = min(1.0, (mu_a / mu) ** 3) if mu > 0 else 0.0
        tl = np.where(fl, sigma * mu - dv_a * dzl_a, 0.0)
        tu = np.where(fu, sigma * mu + dv_a * dzu_a, 0.0)
        dv, dy, dzl, dzu = direction(tl, tu)
        if not (np.all(np.isfinite(dv)) and np.all(np.isfinite(dy))):
            return _IpmResult(*best[1:5], NUMERIC_FAILURE, it, "non-finite search direction")
        ap, ad = steps(dv, dzl, dzu, frac=0.995)
        v = v + ap * dv
        y = y + ad * dy
        sl = np.where(fl, np.maximum(sl + ap * dv, 1e-30), 1.0)
        su = np.where(fu, np.maximum(su - ap * dv, 1e-30), 1.0)
        zl = np.where(fl, np.maximum(zl + ad * dzl, 1e-300), 0.0)
        zu = np.where(fu, np.maximum(zu + ad * dzu, 1e-300), 0.0)
        v = np.where(fl, np.maximum(v, lo), v)
        v = np.where(fu, np.minimum(v, hi), v)

    v, y, zl, zu, _ = best[1:]
    return _IpmResult(v, y, zl, zu, NUMERIC_FAILURE, max_iter, "iteration limit reached")


def _active_set(s: _Std, v, zl, zu):
    fl, fu = np.isfinite(s.lo), np.isfinite(s.hi)
    sl = np.where(fl, v - s.lo, np.inf)
    su = np.where(fu, s.hi - v, np.inf)
    act_lo = fl & (sl < zl)
    act_hi = fu & (su < zu) & ~act_lo
    return act_lo, act_hi


def _polish(s: _Std, v, zl, zu, drop=()):
    """Re-solve the equality-constrained QP on the guessed active set,
    less the variables in ``drop``."""
    n, m = s.c.size, s.b.size
    act_lo, act_hi = _active_set(s, v, zl, zu)
    if len(drop):
        act_lo[list(drop)] = False
        act_hi[list(drop)] = False
    fixed = act_lo | act_hi
    vf = v.copy()
    vf[act_lo] = s.lo[act_lo]
    vf[act_hi] = s.hi[act_hi]
    free = np.flatnonzero(~fixed)
    A = s.A.tocsc()
    a_free = A[:, free]
    rhs2 = s.b - A[:, np.flatnonzero(fixed)] @ vf[fixed] if m else np.zeros(0)
    nf = free.size
    if nf + m > 3000:
        return None
    k = np.zeros((nf + m, nf + m))
    k[:nf, :nf] = np.diag(s.h[free])
    if m:
        k[:nf, nf:] = a_free.T.toarray()
        k[nf:, :nf] = a_free.toarray()
    # primal part must be unique on the active set, otherwise keep the IPM point
    stack = np.vstack([k[nf:, :nf], np.diag(s.h[free])]) if m else np.diag(s.h[free])
    if nf and np.linalg.matrix_rank(stack) < nf:
        return None
    rhs = np.concatenate([-s.c[free], rhs2])
    sol, *_ = np.linalg.lstsq(k, rhs, rcond=None)
    vf[free] = sol[:nf]
    y = -sol[nf:]
    g = s.h * vf + s.c
    r = g - (s.A.T @ y if m else 0.0)
    zl_new = np.where(act_lo, np.maximum(r, 0.0), 0.0)
    zu_new = np.where(act_hi, np.maximum(-r, 0.0), 0.0)
    clipped = np.any(act_lo & (r < 0)) or np.any(act_hi & (r > 0))
    if clipped and m + fixed.sum() <= 1000:
        # degenerate vertex: pick sign-feasible multipliers instead of the minimum-norm ones
        lo_idx, hi_idx = np.flatnonzero(act_lo), np.flatnonzero(act_hi)
        cols = [s.A.T.toarray()] if m else []
        cols.append(np.eye(n)[:, lo_idx])
        cols.append(-np.eye(n)[:, hi_idx])
        mat = np.hstack(cols)
        nb = np.concatenate([np.full(m, -np.inf), np.zeros(lo_idx.size + hi_idx.size)])
        fit = lsq_linear(mat, g, bounds=(nb, np.full(mat.shape[1], np.inf)), method="bvls", tol=1e-14)
        u = fit.x
        y = u[:m]
        zl_new = np.zeros(n)
        zu_new = np.zeros(n)
        zl_new[lo_idx] = u[m : m + lo_idx.size]
        zu_new[hi_idx] = u[m + lo_idx.size :]
    return vf, y, zl_new, zu_new


def _kkt_score(s: _Std, v, y, zl, zu):
    fl, fu = np.isfinite(s.lo), np.isfinite(s.hi)
    rp = np.max(np.abs(s.A @ v - s.b), initial=0.0)
    bnd = max(
        np.max(np.where(fl, s.lo - v, 0.0), initial=0.0),
        np.max(np.where(fu, v - s.hi, 0.0), initial=0.0),
    )
    rd = np.max(np.abs(s.h * v + s.c - s.A.T @ y - zl + zu), initial=0.0)
    dfeas = max(np.max(-zl, initial=0.0), np.max(-zu, initial=0.0))
    comp = max(
        np.max(np.where(fl, np.abs(zl * (v - np.where(fl, s.lo, 0))), 0.0), initial=0.0),
        np.max(np.where(fu, np.abs(zu * (np.where(fu, s.hi, 0) - v)), 0.0), initial=0.0),
    )
    return max(rp, bnd, rd, dfeas, comp)


def _solve_std(s: _Std, tol: float, max_iter: int, eps: float | None = None):
    """Eliminate fixed variables, scale, run the IPM, polish, unscale."""
    n = s.c.size
    fixed = np.isfinite(s.lo) & (s.lo == s.hi)
    free = np.flatnonzero(~fixed)
    vfix = np.where(fixed, s.lo, 0.0)
    A = s.A.tocsc()
    b = s.b - (A[:, np.flatnonzero(fixed)] @ vfix[fixed] if fixed.any() else 0.0)
    A = A[:, free].tocsr()
    red = _Std(s.h[free], s.c[free], A, b, s.lo[free], s.hi[free])

    d, e = _ruiz(red.h, red.A)
    hs = red.h * d * d
    cs = red.c * d
    sigma = 1.0 / max(1.0, np.max(np.abs(cs), initial=0.0), np.max(np.abs(hs), initial=0.0))
    sc = _Std(
        hs * sigma,
        cs * sigma,
        (sparse.diags(e) @ red.A @ sparse.diags(d)).tocsr(),
        red.b * e,
        red.lo / d,
        red.hi / d,
    )
    res = _ipm(sc, eps=min(1e-10, tol * 1e-2) if eps is None else eps, max_iter=max_iter)
    v, y, zl, zu = res.v, res.y, res.zl, res.zu
    if res.status in (OPTIMAL, NUMERIC_FAILURE) and free.size:
        act_lo, act_hi = _active_set(sc, v, zl, zu)
        weight = np.where(act_lo, zl, np.where(act_hi, zu, np.inf))
        # an over-determined guess (near-degenerate vertex) is retried without
        # its weakest bounds, one at a time
        order = [i for i in np.argsort(weight, kind="stable") if np.isfinite(weight[i])][:3]
        base = _kkt_score(sc, v, y, zl, zu)
        best = None
        for k in range(len(order) + 1):
            pol = _polish(sc, v, zl, zu, drop=order[:k])
            if pol is None or not np.all(np.isfinite(pol[0])):
                continue
            score = _kkt_score(sc, *pol)
            if best is None or score < best[0]:
                best = (score, pol)
            if score <= tol * 1e-2:
                break
        if best is not None and best[0] <= max(1.01 * base, 1e-12):
            v, y, zl, zu = best[1]
            if res.status == NUMERIC_FAILURE and best[0] <= tol * 1e-2:
                res.status = OPTIMAL
    vfull = vfix.copy()
    vfull[free] = v * d
    yfull = e * y / sigma
    z = np.zeros(n)
    z[free] = (zu - zl) / (d * sigma)
    # fixed standard-form variables: multiplier from stationarity
    if fixed.any():
        r = s.h * vfull + s.c - s.A.T @ yfull
        z[fixed] = -r[fixed]
    return vfull, yfull, z, res


def _unpack(qp: QuadraticProgram, v, y, z):
    n = qp.n_vars
    x = v[:n]
    eq = y[: qp.n_eq]
    # slack rows: A_in x - w = 0 with multiplier y_i = zl_w - zu_w
    lam = -y[qp.n_eq :]
    nu = z[:n]
    return x, eq, lam, nu


def _phase_one(qp: QuadraticProgram, tol: float, max_iter: int):
    """Minimise the total relaxation of the rows; nonzero means infeasible."""
    s = _standard_form(qp)
    m, nv = s.A.shape
    if m == 0:
        return 0.0, []
    scale = 1.0 / np.maximum(1.0, np.asarray(abs(s.A).max(axis=1).todense()).ravel())
    A = sparse.hstack([s.A, sparse.identity(m), -sparse.identity(m)], format="csr")
    p1 = _Std(
        np.zeros(nv + 2 * m),
        np.concatenate([np.zeros(nv), scale, scale]),
        A,
        s.b,
        np.concatenate([s.lo, np.zeros(2 * m)]),
        np.concatenate([s.hi, np.full(2 * m, np.inf)]),
    )
    v, _, _, res = _solve_std(p1, tol, max(max_iter, 200))
    if res.status != OPTIMAL:
        return None, []
    relax = np.abs(v[nv : nv + m]) + np.abs(v[nv + m :])
    names = []
    for i in np.flatnonzero(relax > max(tol, 1e-7) * (1 + np.abs(s.b))):
        if i < qp.n_eq:
            names.append(qp.eq_names[i] if qp.eq_names else f"eq[{i}]")
        else:
            k = i - qp.n_eq
            names.append(qp.ineq_names[k] if qp.ineq_names else f"ineq[{k}]")
    return float(relax.max(initial=0.0)), names


def _is_unique(qp: QuadraticProgram, x, cols, tight_tol):
    """True when the rows tight at ``x`` (plus the objective level) pin down ``cols``.

    ``x`` is assumed to lie in the relative interior of the optimal face, so
    the tight rows are exactly the implicit equalities of that face.
    """
    rows = [qp.A_eq[:, cols].toarray(), qp.linear[cols][None, :]]

    def near(val, bound):
        return np.isfinite(bound) & (np.abs(val - bound) <= tight_tol * (1 + np.abs(np.where(np.isfinite(bound), bound, 0))))

    ax = qp.A_ineq @ x
    tight = near(ax, qp.ineq_upper) | near(ax, qp.ineq_lower)
    if tight.any():
        rows.append(qp.A_ineq[np.flatnonzero(tight)][:, cols].toarray())
    xl = x[cols]
    at_bound = near(xl, qp.lower[cols]) | near(xl, qp.upper[cols])
    if at_bound.any():
        rows.append(np.eye(len(cols))[at_bound])
    mat = np.vstack(rows)
    if mat.shape[0] < len(cols):
        return False
    return np.linalg.matrix_rank(mat, tol=1e-9 * max(1.0, np.abs(mat).max())) == len(cols)


def _lexicographic(qp: QuadraticProgram, x, tol, max_iter):
    """Walk to the lexicographically smallest point of the optimal face.

    Variables with positive quadratic cost are unique on the optimal face of
    a convex separable QP, so only linear-cost variables are refined, one LP
    per variable in index order.
    """
    quad = qp.quadratic_diag > 0
    lin_vars = np.flatnonzero(~quad & (qp.lower < qp.upper))
    if lin_vars.size == 0 or _is_unique(qp, x, lin_vars, 1e-9):
        return x, 0
    f_lin = float(qp.linear @ x)
    lower = qp.lower.copy()
    upper = qp.upper.copy()
    lower[quad] = x[quad]
    upper[quad] = x[quad]
    a_in = sparse.vstack([qp.A_ineq, sparse.csr_matrix(qp.linear[None, :])], format="csr")
    ineq_lo = np.concatenate([qp.ineq_lower, [-np.inf]])
    ineq_hi = np.concatenate([qp.ineq_upper, [f_lin + 1e-11 * (1.0 + abs(f_lin))]])
    total = 0
    cur = x
    for j in lin_vars:
        c = np.zeros(qp.n_vars)
        c[j] = 1.0
        sub = QuadraticProgram(np.zeros(qp.n_vars), c, 0.0, qp.A_eq, qp.b_eq, a_in, ineq_lo, ineq_hi, lower, upper)
        sol = solve_qp(sub, tol=tol, max_iter=max_iter, tie_break="none")
        total += sol.iterations
        if sol.status != OPTIMAL:
            break
        cur = sol.values
        upper[j] = max(min(upper[j], cur[j] + 1e-10 * (1 + abs(cur[j]))), lower[j])
        rest = lin_vars[lin_vars > j]
        if rest.size == 0 or _is_unique(qp, cur, rest, 1e-9):
            break
    return cur, total


def solve_qp(
    qp: QuadraticProgram, tol: float = DEFAULT_TOL, *, max_iter: int = 200, tie_break: str = "lexicographic"
) -> Solution:
    """Solve ``qp``.

    Parameters
    ----------
    tol : float
        Tolerance on primal feasibility, stationarity and complementarity,
        relative to ``1 + max(|linear|, |b_eq|)``.
    tie_break : {"lexicographic", "none"}
        How to choose among multiple optima of the linear-cost variables.

    Returns
    -------
    Solution
        ``status`` is one of ``optimal``, ``infeasible``, ``unbounded``,
        ``numeric_failure``.  Infeasible solutions list the constraints that
        had to be relaxed in ``violated``.
    """
    t0 = time.perf_counter()
    s = _standard_form(qp)
    v, y, z, res = _solve_std(s, tol, max_iter)
    x, eq, lam, nu = _unpack(qp, v, y, z)
    status = res.status
    message = res.message
    violated = []
    p, st, cp_ = _residuals(qp, x, eq, lam, nu)
    scale = 1.0 + max(np.max(np.abs(qp.linear), initial=0.0), np.max(np.abs(qp.b_eq), initial=0.0))
    if status == OPTIMAL and cp_ > 0:
        lam2, nu2 = _drop_inactive(qp, x, lam, nu)
        p2, st2, cp2 = _residuals(qp, x, eq, lam2, nu2)
        if st2 <= max(st, tol * scale) and cp2 < cp_:
            lam, nu, st, cp_ = lam2, nu2, st2, cp2
    if status == OPTIMAL and max(p, st, cp_) > tol * scale:
        # scaled stopping test can be looser than the raw one near degenerate vertices
        v2, y2, z2, res2 = _solve_std(s, tol, max_iter, eps=1e-13)
        if res2.status == OPTIMAL:
            x2, eq2, lam2, nu2 = _unpack(qp, v2, y2, z2)
            lam2, nu2 = _drop_inactive(qp, x2, lam2, nu2)
            r2 = _residuals(qp, x2, eq2, lam2, nu2)
            if max(r2) < max(p, st, cp_):
                x, eq, lam, nu, res = x2, eq2, lam2, nu2, res2
                p, st, cp_ = r2
    if status == OPTIMAL and max(p, st, cp_) > tol * scale:
        status = NUMERIC_FAILURE
        message = "converged point misses the requested tolerance"
    if status != OPTIMAL:
        relax, names = _phase_one(qp, tol, max_iter)
        if relax is None:
            status = NUMERIC_FAILURE
            message = message or "no convergence"
        elif relax > max(tol, 1e-7):
            status, violated = INFEASIBLE, names
            message = f"no feasible point; total row relaxation {relax:.3g} needed"
        elif res.status == UNBOUNDED:
            status = UNBOUNDED
        elif status == INFEASIBLE:
            status = NUMERIC_FAILURE
            message = "dual divergence on a feasible program"
    iters = res.iterations
    if status == OPTIMAL and tie_break == "lexicographic":
        x_new, extra = _lexicographic(qp, x, tol, max_iter)
        iters += extra
        if x_new is not x:
            cand = [(eq, lam, nu)]
            rec = _recover_duals(qp, x_new)
            if rec is not None:
                cand.append(rec)
            scored = [(max(_residuals(qp, x_new, *c)), i) for i, c in enumerate(cand)]
            worst, i = min(scored)
            # the walk may trade a little optimality for the tie-break; keep it
            # only if the moved point is still certified at the absolute tolerance
            if worst <= tol:
                x = x_new
                eq, lam, nu = cand[i]
            else:
                logger.debug("tie-break point rejected (KKT residual %.3g)", worst)
    residuals = dict(zip(("primal", "stationarity", "complementarity"), _residuals(qp, x, eq, lam, nu)))
    if status != OPTIMAL:
        logger.debug("solve_qp: %s (%s) residuals=%s", status, message, residuals)
    return Solution(
        values=x,
        objective=qp.objective(x),
        status=status,
        eq_duals=eq,
        ineq_duals=lam,
        bound_duals=nu,
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        message=message,
        residuals=residuals,
        violated=violated,
    )
