"""Primal-dual interior-point solver for convex quadratic programs.

Problems have the form::

    minimize    0.5 z'Qz + c'z
    subject to  A z <= b,  lb <= z <= ub

Variables with ``lb == ub`` are substituted out before the interior-point
iterations start, and rows that the variable bounds make redundant are
dropped.  The iterations use Mehrotra's predictor-corrector on the
inequality form with the normal-equation matrix ``Q + G'WG`` factored by a
dense Cholesky decomposition, or by a sparse LU with iterative refinement
once the problem is large.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SPARSE_MIN_N = 150


class QPError(Exception):
    """Base class for QP solver failures."""


class QPModelError(QPError):
    """The problem data is malformed or Q is not positive semidefinite."""


class QPConvergenceError(QPError):
    """The iteration limit was hit before the KKT conditions were met."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class QPProblem:
    Q: np.ndarray
    c: np.ndarray
    A: object = None  # ndarray or scipy.sparse matrix, shape (m, n)
    b: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    constant: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if sp.issparse(self.Q):
            self.Q = self.Q.toarray()
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.shape != (n, n):
            raise QPModelError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        if not sp.issparse(self.A):
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if self.A.size == 0:
                self.A = self.A.reshape(0, n)
        else:
            self.A = sp.csr_matrix(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[1] != n or self.A.shape[0] != self.b.size:
            raise QPModelError(
                f"A has shape {self.A.shape}, b has {self.b.size} entries, n = {n}")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).copy()
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise QPModelError("bound vectors must have length n")
        if np.any(self.lb > self.ub):
            raise QPModelError("lower bound exceeds upper bound")
        if not np.allclose(self.Q, self.Q.T, atol=1e-12 * (1.0 + np.abs(self.Q).max(initial=0.0))):
            raise QPModelError("Q is not symmetric")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.b.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.Q @ z + self.c @ z + self.constant)

    def row_values(self, z) -> np.ndarray:
        return np.asarray(self.A @ np.asarray(z, dtype=float)).ravel()

    def max_violation(self, z) -> float:
        z = np.asarray(z, dtype=float)
        viol = 0.0
        if self.m:
            viol = max(viol, float(np.max(self.row_values(z) - self.b)))
        viol = max(viol, float(np.max(self.lb - z, initial=0.0)))
        viol = max(viol, float(np.max(z - self.ub, initial=0.0)))
        return viol

    def with_bounds(self, lb, ub) -> "QPProblem":
        """Shallow copy sharing Q, c, A, b but with new variable bounds."""
        new = object.__new__(QPProblem)
        new.Q, new.c, new.A, new.b, new.constant = self.Q, self.c, self.A, self.b, self.constant
        new.lb = np.asarray(lb, dtype=float)
        new.ub = np.asarray(ub, dtype=float)
        return new


@dataclass
class QPSolution:
    status: str  # "optimal" or "infeasible"
    z: np.ndarray = None
    objective: float = np.inf
    lam: np.ndarray = None  # multipliers of A z <= b
    lam_lb: np.ndarray = None
    lam_ub: np.ndarray = None
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    # nonnegative weights on (A rows, lb rows, ub rows) whose combination
    # yields 0 <= negative number; only set for infeasible problems
    certificate: tuple = None


def check_psd(Q: np.ndarray) -> None:
    n = Q.shape[0]
    if n == 0:
        return
    tau = 1e-9 * max(1.0, float(np.abs(Q).max()))
    try:
        np.linalg.cholesky(Q + tau * np.eye(n))
    except np.linalg.LinAlgError:
        raise QPModelError("Q is not positive semidefinite") from None


def kkt_residuals(p: QPProblem, z, lam, lam_lb, lam_ub) -> dict:
    """Infinity-norm KKT residuals of a primal-dual pair on the full problem."""
    z = np.asarray(z, dtype=float)
    grad = p.Q @ z + p.c
    if p.m:
        grad = grad + np.asarray(p.A.T @ lam).ravel()
    grad = grad - lam_lb + lam_ub
    slack = p.b - p.row_values(z) if p.m else np.zeros(0)
    fin_l = np.isfinite(p.lb)
    fin_u = np.isfinite(p.ub)
    comp = [np.abs(lam * slack)]
    comp.append(np.abs(lam_lb[fin_l] * (z[fin_l] - p.lb[fin_l])))
    comp.append(np.abs(lam_ub[fin_u] * (p.ub[fin_u] - z[fin_u])))
    dual_inf = [np.maximum(-lam, 0.0), np.maximum(-lam_lb, 0.0), np.maximum(-lam_ub, 0.0)]
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal": p.max_violation(z),
        "dual": float(max(np.max(d, initial=0.0) for d in dual_inf)),
        "complementarity": float(max(np.max(cc, initial=0.0) for cc in comp)),
    }


def _infeasible_row_certificate(p, row, a_row, fixed_vals=None):
    """Certificate for a single row that cannot hold anywhere in the box."""
    y_rows = np.zeros(p.m)
    y_rows[row] = 1.0
    y_lb = np.zeros(p.n)
    y_ub = np.zeros(p.n)
    pos = a_row > 0
    y_lb[pos] = a_row[pos]
    y_ub[~pos] = -a_row[~pos]
    return (y_rows, y_lb, y_ub)


def solve_qp(p: QPProblem, x0=None, tol=1e-9, max_iter=100, check=True) -> QPSolution:
    """Solve a convex QP.

    Returns an ``optimal`` solution with multipliers or an ``infeasible``
    solution carrying a Farkas-type certificate.  Raises ``QPModelError``
    for a non-PSD ``Q`` and ``QPConvergenceError`` if the iteration limit is
    reached.
    """
    if check:
        check_psd(p.Q)
    n = p.n
    fixed = p.lb == p.ub
    free = ~fixed
    zfix = np.where(fixed, p.lb, 0.0)

    A = p.A
    b_red = p.b - (np.asarray(A @ zfix).ravel() if p.m else 0.0)
    if sp.issparse(A):
        Af = A[:, np.flatnonzero(free)]
    else:
        Af = A[:, free]
    lbf, ubf = p.lb[free], p.ub[free]

    # Rows trivially satisfied or trivially violated over the bound box.
    keep = np.ones(p.m, dtype=bool)
    if p.m:
        if sp.issparse(Af):
            Apos = Af.maximum(0)
            Aneg = Af.minimum(0)
            with np.errstate(invalid="ignore"):
                sup = np.asarray(Apos @ np.where(np.isinf(ubf), 0, ubf)).ravel() + \
                    np.asarray(Aneg @ np.where(np.isinf(lbf), 0, lbf)).ravel()
                inf_ = np.asarray(Apos @ np.where(np.isinf(lbf), 0, lbf)).ravel() + \
                    np.asarray(Aneg @ np.where(np.isinf(ubf), 0, ubf)).ravel()
            # rows touching an infinite bound in the relevant direction
            sup_inf = np.asarray(abs(Apos) @ np.isinf(ubf).astype(float)).ravel() + \
                np.asarray(abs(Aneg) @ np.isinf(lbf).astype(float)).ravel()
            inf_inf = np.asarray(abs(Apos) @ np.isinf(lbf).astype(float)).ravel() + \
                np.asarray(abs(Aneg) @ np.isinf(ubf).astype(float)).ravel()
        else:
            Apos = np.maximum(Af, 0)
            Aneg = np.minimum(Af, 0)
            ubz = np.where(np.isinf(ubf), 0, ubf)
            lbz = np.where(np.isinf(lbf), 0, lbf)
            sup = Apos @ ubz + Aneg @ lbz
            inf_ = Apos @ lbz + Aneg @ ubz
            sup_inf = (Apos != 0) @ np.isinf(ubf) + (Aneg != 0) @ np.isinf(lbf)
            inf_inf = (Apos != 0) @ np.isinf(lbf) + (Aneg != 0) @ np.isinf(ubf)
        scale = 1e-9 * (1.0 + np.abs(b_red))
        bad = (inf_inf == 0) & (inf_ > b_red + scale)
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0])
            a_row = np.asarray(A[row].todense()).ravel() if sp.issparse(A) else A[row]
            return QPSolution(status="infeasible",
                              certificate=_infeasible_row_certificate(p, row, a_row))
        keep = ~((sup_inf == 0) & (sup <= b_red))

    rows = np.flatnonzero(keep)
    Ar = Af[rows]
    br = b_red[rows]
    if sp.issparse(Ar):
        Ar = sp.csr_matrix(Ar)
        rnorm = np.asarray(abs(Ar).max(axis=1).todense()).ravel() if Ar.shape[0] else np.zeros(0)
    else:
        rnorm = np.abs(Ar).max(axis=1, initial=0.0) if Ar.shape[0] else np.zeros(0)
    rnorm[rnorm == 0] = 1.0
    rscale = 1.0 / rnorm
    if sp.issparse(Ar):
        Ar = sp.diags(rscale) @ Ar
        Ar = sp.csr_matrix(Ar)
    else:
        Ar = Ar * rscale[:, None]
    br = br * rscale

    Qff = p.Q[np.ix_(free, free)]
    cf = p.c[free] + p.Q[np.ix_(free, fixed)] @ p.lb[fixed]
    const = p.constant + 0.5 * zfix[fixed] @ p.Q[np.ix_(fixed, fixed)] @ zfix[fixed] + p.c[fixed] @ zfix[fixed]

    x0f = None if x0 is None else np.asarray(x0, dtype=float)[free]
    # breakdowns show up as non-finite iterates and are handled there
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        res = _mehrotra(Qff, cf, Ar, br, lbf, ubf, x0f, tol, max_iter)

    if res["status"] == "infeasible":
        zr, zl, zu = res["certificate"]
        y_rows = np.zeros(p.m)
        y_rows[rows] = zr * rscale
        y_lb = np.zeros(n)
        y_ub = np.zeros(n)
        y_lb[free] = zl
        y_ub[free] = zu
        # fold fixed variables in through their bound rows
        if np.any(fixed) and p.m:
            coef = np.asarray(A.T @ y_rows).ravel()
            fidx = np.flatnonzero(fixed)
            y_lb[fidx] += np.maximum(coef[fidx], 0.0)
            y_ub[fidx] += np.maximum(-coef[fidx], 0.0)
        return QPSolution(status="infeasible", iterations=res["iterations"],
                          certificate=(y_rows, y_lb, y_ub))

    z = zfix.copy()
    z[free] = res["x"]
    lam = np.zeros(p.m)
    lam[rows] = res["z_rows"] * rscale
    lam_lb = np.zeros(n)
    lam_ub = np.zeros(n)
    lam_lb[free] = res["z_lb"]
    lam_ub[free] = res["z_ub"]
    # multipliers of fixed variables absorb their stationarity residual
    if np.any(fixed):
        g = p.Q @ z + p.c + (np.asarray(A.T @ lam).ravel() if p.m else 0.0)
        fidx = np.flatnonzero(fixed)
        lam_lb[fidx] = np.maximum(g[fidx], 0.0)
        lam_ub[fidx] = np.maximum(-g[fidx], 0.0)
    obj = float(0.5 * res["x"] @ Qff @ res["x"] + cf @ res["x"] + const)
    sol = QPSolution(status="optimal", z=z, objective=obj, lam=lam, lam_lb=lam_lb,
                     lam_ub=lam_ub, iterations=res["iterations"])
    sol.residuals = kkt_residuals(p, z, lam, lam_lb, lam_ub)
    return sol


class _Rows:
    """The stacked constraint operator G = [A; -I_lb; I_ub] in pieces."""

    def __init__(self, A, lbi, ubi, n):
        self.A = A
        self.lbi = lbi
        self.ubi = ubi
        self.n = n
        self.ma = A.shape[0]
        self.m = self.ma + lbi.size + ubi.size
        self.sparse = sp.issparse(A)

    def mul(self, x):
        ax = np.asarray(self.A @ x).ravel() if self.ma else np.zeros(0)
        return np.concatenate([ax, -x[self.lbi], x[self.ubi]])

    def tmul(self, y):
        out = np.zeros(self.n)
        if self.ma:
            out += np.asarray(self.A.T @ y[:self.ma]).ravel()
        k = self.ma + self.lbi.size
        np.subtract.at(out, self.lbi, y[self.ma:k])
        np.add.at(out, self.ubi, y[k:])
        return out

    def normal(self, w):
        k = self.ma + self.lbi.size
        d = np.zeros(self.n)
        np.add.at(d, self.lbi, w[self.ma:k])
        np.add.at(d, self.ubi, w[k:])
        if self.ma:
            wa = w[:self.ma]
            if self.sparse:
                H = (self.A.T @ sp.diags(wa) @ self.A).toarray()
            else:
                H = (self.A.T * wa) @ self.A
        else:
            H = np.zeros((self.n, self.n))
        H[np.diag_indices(self.n)] += d
        return H


class _NormalPattern:
    """Fixed sparsity pattern of Q + A' diag(w) A + diag(d).

    Every iteration only rescatters values, avoiding sparse-matrix algebra.
    """

    def __init__(self, Q, A, n):
        A = sp.csr_matrix(A)
        lens = np.diff(A.indptr)
        pr, pi, pj, prod = [], [], [], []
        for ln in np.unique(lens):
            if ln == 0:
                continue
            rows = np.flatnonzero(lens == ln)
            starts = A.indptr[rows]
            cols = A.indices[starts[:, None] + np.arange(ln)]
            vals = A.data[starts[:, None] + np.arange(ln)]
            ii = np.repeat(np.arange(ln), ln)
            jj = np.tile(np.arange(ln), ln)
            pr.append(np.repeat(rows, ln * ln))
            pi.append(cols[:, ii].ravel())
            pj.append(cols[:, jj].ravel())
            prod.append((vals[:, ii] * vals[:, jj]).ravel())
        cat = (lambda xs: np.concatenate(xs)) if pr else (lambda xs: np.zeros(0, int))
        self.pr = cat(pr).astype(int)
        self.prod = cat(prod).astype(float) if prod else np.zeros(0)
        qi, qj = np.nonzero(Q)
        self.qval = np.asarray(Q)[qi, qj]
        diag = np.arange(n)
        keys = np.concatenate([cat(pj).astype(int) * n + cat(pi).astype(int),
                               qj * n + qi, diag * n + diag])
        uniq, inv = np.unique(keys, return_inverse=True)
        npair = self.pr.size
        self.inv_pair = inv[:npair]
        self.inv_q = inv[npair:npair + qi.size]
        self.inv_diag = inv[npair + qi.size:]
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // n, minlength=n))]).astype(np.int32)
        self.nnz = uniq.size
        self.n = n
        self.base = np.bincount(self.inv_q, self.qval, minlength=self.nnz)

    def matrix(self, wa, d):
        data = self.base + np.bincount(self.inv_pair, wa[self.pr] * self.prod, minlength=self.nnz)
        data += np.bincount(self.inv_diag, d, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _refined(solve, H):
    """Solver with one step of iterative refinement."""
    def run(r):
        x = solve(r)
        return x + solve(r - H @ x)
    return run


def _step_len(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _mehrotra(Q, c, A, b, lb, ub, x0, tol, max_iter):
    n = c.size
    lbi = np.flatnonzero(np.isfinite(lb))
    ubi = np.flatnonzero(np.isfinite(ub))
    G = _Rows(A, lbi, ubi, n)
    h = np.concatenate([b, -lb[lbi], ub[ubi]])
    m = G.m
    ma = G.ma
    nl = lbi.size

    def split(v):
        zl = np.zeros(n)
        zu = np.zeros(n)
        zl[lbi] = v[ma:ma + nl]
        zu[ubi] = v[ma + nl:]
        return v[:ma], zl, zu

    if n == 0:
        return {"status": "optimal", "x": np.zeros(0), "z_rows": np.zeros(ma), "z_lb": np.zeros(0),
                "z_ub": np.zeros(0), "iterations": 0}
    if m == 0:
        try:
            x = np.linalg.solve(Q, -c)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(Q, -c, rcond=None)[0]
        return {"status": "optimal", "x": x, "z_rows": np.zeros(0), "z_lb": np.zeros(n),
                "z_ub": np.zeros(n), "iterations": 0}

    diag_reg = 1e-12 * (1.0 + np.abs(Q).max(initial=0.0))
    # Large problems with a sparse constraint matrix and a sparse Hessian
    # factor the normal matrix with a fill-reducing sparse LU instead.
    use_sparse = G.sparse and n >= SPARSE_MIN_N and np.count_nonzero(Q) <= 4 * n

    pattern = _NormalPattern(Q, A, n) if use_sparse else None

    def normal(w):
        if use_sparse:
            k = ma + nl
            d = np.zeros(n)
            np.add.at(d, lbi, w[ma:k])
            np.add.at(d, ubi, w[k:])
            return pattern.matrix(w[:ma], d)
        return Q + G.normal(w)

    def factor(H):
        if use_sparse:
            H.data[pattern.inv_diag] += diag_reg
            try:
                lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                               options={"SymmetricMode": True})
            except RuntimeError:
                bump = 1e-8 * (1.0 + np.abs(H.diagonal()).max())
                try:
                    lu = spla.splu((H + sp.eye(n, format="csc") * bump).tocsc(),
                                   permc_spec="MMD_AT_PLUS_A")
                except RuntimeError:
                    raise QPConvergenceError("normal matrix is singular") from None
            return _refined(lu.solve, H)
        H[np.diag_indices(n)] += diag_reg
        try:
            cf = sla.cho_factor(H, check_finite=False)
        except np.linalg.LinAlgError:
            H[np.diag_indices(n)] += 1e-8 * (1.0 + np.abs(np.diag(H)).max())
            try:
                cf = sla.cho_factor(H, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                raise QPConvergenceError("normal matrix is singular") from None
        return _refined(lambda r: sla.cho_solve(cf, r, check_finite=False), H)

    # Initial point: least-squares fit of the KKT system with unit scaling,
    # then shift slacks and multipliers into the positive orthant.
    if x0 is None:
        x = factor(normal(np.ones(m)))(-c + G.tmul(h))
    else:
        x = np.clip(x0, np.where(np.isfinite(lb), lb, -np.inf), np.where(np.isfinite(ub), ub, np.inf))
    s = h - G.mul(x)
    z = -s.copy()
    ap = -s.min()
    if ap >= -1e-8:
        s = s + 1.0 + ap
    ad = -z.min()
    if ad >= -1e-8:
        z = z + 1.0 + ad

    norm_c = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(Q).max(initial=0.0))
    norm_h = 1.0 + np.abs(h).max(initial=0.0)
    box = np.concatenate([np.abs(lb[lbi]), np.abs(ub[ubi])])
    all_bounded = lbi.size == n and ubi.size == n
    xbound = float(box.max(initial=0.0)) if all_bounded else np.inf

    best = None
    best_merit = np.inf
    stall = 0
    loose = max(100 * tol, 1e-7)

    def finish(xb, zb, it):
        zr, zl, zu = split(zb)
        return {"status": "optimal", "x": xb, "z_rows": zr, "z_lb": zl, "z_ub": zu,
                "iterations": it}

    for it in range(max_iter):
        Gx = G.mul(x)
        rd = Q @ x + c + G.tmul(z)
        rp = Gx + s - h
        mu = float(s @ z) / m
        rd_n = np.abs(rd).max()
        rp_n = np.abs(rp).max()
        comp_n = float(np.max(s * z))
        if not (np.all(np.isfinite(x)) and np.isfinite(mu) and np.isfinite(rd_n)):
            break
        merit = max(rd_n / norm_c, rp_n / norm_h, comp_n / norm_c)
        if merit < best_merit:
            if merit < 0.9 * best_merit:
                stall = 0
            best_merit = merit
            best = (x.copy(), rd_n, rp_n, mu, z.copy())
        else:
            stall += 1
        if rd_n <= tol * norm_c and rp_n <= tol * norm_h and comp_n <= tol * norm_c:
            return finish(x, z, it)
        if stall >= 5 and best_merit <= loose:
            break

        # Farkas test: y >= 0 with G'y ~ 0 and h'y < 0.
        hz = float(h @ z)
        if hz < 0:
            y = z / -hz
            gty = G.tmul(y)
            gap = float(np.abs(gty).sum())
            if (all_bounded and gap * (1.0 + xbound) < 1e-3) or gap < 1e-10:
                zr, zl, zu = split(y)
                return {"status": "infeasible", "certificate": (zr, zl, zu), "iterations": it}

        w = z / s
        try:
            solve = factor(normal(w))
        except QPConvergenceError:
            break

        def direction(rc):
            rhs = -rd + G.tmul((rc - z * rp) / s)
            dx = solve(rhs)
            Gdx = G.mul(dx)
            dz = (-rc + z * rp + z * Gdx) / s
            ds = -rp - Gdx
            return dx, ds, dz

        dx, ds, dz = direction(s * z)
        a_aff = min(_step_len(s, ds), _step_len(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, ds, dz = direction(s * z + ds * dz - sigma * mu)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
            break
        alpha = min(_step_len(s, ds), _step_len(z, dz))
        alpha = min(1.0, 0.99 * alpha)
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        # guard against slacks collapsing to exactly zero
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)

    # Numerical trouble or the iteration limit: settle for the best iterate
    # when it is accurate to a looser tolerance.
    if best is not None and best_merit <= loose:
        return finish(best[0], best[4], it)
    if best is None:
        raise QPConvergenceError("interior point iterates diverged")
    raise QPConvergenceError(
        f"interior point did not converge in {it + 1} iterations "
        f"(dual res {best[1]:.2e}, primal res {best[2]:.2e}, mu {best[3]:.2e})",
        best=best[0])


def dump_triplets(p: QPProblem, binary_indices=()) -> str:
    """Plain-text sparse dump, one ``kind i j value`` line per entry.

    Kinds: ``Q`` (upper triangle), ``c``, ``A``, ``b``, ``lb``, ``ub`` and
    ``bin``; vectors use ``j = 0``.  Infinite bounds are skipped.
    """
    lines = [f"# n={p.n} m={p.m}"]
    Q = sp.coo_matrix(sp.triu(sp.csr_matrix(p.Q)))
    for i, j, v in sorted(zip(Q.row, Q.col, Q.data)):
        lines.append(f"Q {i} {j} {float(v)!r}")
    lines += [f"c {i} 0 {float(v)!r}" for i, v in enumerate(p.c) if v != 0]
    if p.m:
        A = sp.coo_matrix(sp.csr_matrix(p.A))
        for i, j, v in sorted(zip(A.row, A.col, A.data)):
            lines.append(f"A {i} {j} {float(v)!r}")
        lines += [f"b {i} 0 {float(v)!r}" for i, v in enumerate(p.b)]
    lines += [f"lb {i} 0 {float(v)!r}" for i, v in enumerate(p.lb) if np.isfinite(v)]
    lines += [f"ub {i} 0 {float(v)!r}" for i, v in enumerate(p.ub) if np.isfinite(v)]
    lines += [f"bin {int(i)} 0 1" for i in binary_indices]
    return "\n".join(lines) + "\n"
