"""Dense LP and convex QP kernels.

LPs are delegated to HiGHS through :func:`scipy.optimize.linprog`.  QPs are
solved in-house with a dual active-set method (Goldfarb-Idnani) applied after
eliminating the equality constraints through a null-space basis.  Problems
whose structure is fixed and whose data vectors change (the MPC) should build
a :class:`QpWorkspace` once and call :meth:`QpWorkspace.solve` per step.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

FEAS_TOL = 1e-7
OPT_TOL = 1e-6
MAX_ITER = 50_000


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"


@dataclass
class SolveStatus:
    """Outcome of an LP or QP solve.

    ``dual_ineq`` holds nonnegative inequality multipliers and ``dual_eq`` the
    equality multipliers, with sign conventions chosen so that for a QP
    ``P x + q + A_ineq' dual_ineq + A_eq' dual_eq = 0`` and for an LP
    (maximisation) ``c = A_ineq' dual_ineq + A_eq' dual_eq``.
    """

    status: Status
    x: np.ndarray | None = None
    value: float = math.nan
    dual_ineq: np.ndarray | None = None
    dual_eq: np.ndarray | None = None
    dual_value: float = math.nan
    iterations: int = 0
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _as_matrix(M, ncols: int) -> np.ndarray:
    if M is None:
        return np.zeros((0, ncols))
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((0, ncols))
    return np.atleast_2d(M)


def _as_vector(v) -> np.ndarray:
    if v is None:
        return np.zeros(0)
    return np.atleast_1d(np.asarray(v, dtype=float)).ravel()


def _check_block(name: str, A: np.ndarray, b: np.ndarray, n: int) -> None:
    if A.shape[1] != n:
        raise ValueError(f"{name} has {A.shape[1]} columns, expected {n}")
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"{name} has {A.shape[0]} rows but its bound has {b.shape[0]} entries")


@dataclass
class LinearProgram:
    """maximize c.x  s.t.  A_ineq x <= b_ineq,  A_eq x = b_eq."""

    c: np.ndarray
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.c = _as_vector(self.c)
        n = self.c.shape[0]
        self.A_ineq = _as_matrix(self.A_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq)
        _check_block("A_ineq", self.A_ineq, self.b_ineq, n)
        _check_block("A_eq", self.A_eq, self.b_eq, n)


@dataclass
class QuadraticProgram:
    """minimize 1/2 x'Px + q.x  s.t.  A_ineq x <= b_ineq,  A_eq x = b_eq."""

    P: np.ndarray
    q: np.ndarray
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.q = _as_vector(self.q)
        n = self.q.shape[0]
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-10):
            raise ValueError("P is not symmetric")
        self.A_ineq = _as_matrix(self.A_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq)
        _check_block("A_ineq", self.A_ineq, self.b_ineq, n)
        _check_block("A_eq", self.A_eq, self.b_eq, n)


_HIGHS_STATUS = {
    0: Status.OPTIMAL,
    1: Status.MAX_ITERATIONS,
    2: Status.INFEASIBLE,
    3: Status.UNBOUNDED,
}


def lp_solve(lp: LinearProgram, tol: float = FEAS_TOL) -> SolveStatus:
    """Maximise ``lp.c . x`` with HiGHS."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = lp.c.shape[0]
    htol = max(tol, 1e-10)
    res = linprog(
        -lp.c,
        A_ub=lp.A_ineq if lp.A_ineq.shape[0] else None,
        b_ub=lp.b_ineq if lp.A_ineq.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=[(None, None)] * n,
        method="highs",
        options={"primal_feasibility_tolerance": htol, "dual_feasibility_tolerance": htol},
    )
    status = _HIGHS_STATUS.get(res.status, Status.MAX_ITERATIONS)
    out = SolveStatus(status=status, iterations=int(getattr(res, "nit", 0) or 0), message=res.message)
    if status is Status.OPTIMAL:
        out.x = np.asarray(res.x, dtype=float)
        out.value = float(lp.c @ out.x)
        y = -np.asarray(res.ineqlin.marginals) if lp.A_ineq.shape[0] else np.zeros(0)
        nu = -np.asarray(res.eqlin.marginals) if lp.A_eq.shape[0] else np.zeros(0)
        out.dual_ineq, out.dual_eq = y, nu
        out.dual_value = float(lp.b_ineq @ y + lp.b_eq @ nu)
    return out


def _dual_active_set(v0, C, d, feas_tol, max_iter):
    """Project ``v0`` onto ``{v : C v <= d}`` (rows of C of unit norm).

    Goldfarb-Idnani: start from the unconstrained minimiser and repeatedly add
    the most violated constraint, dropping active ones whose multiplier would
    turn negative.  Returns ``(status, v, mu, iterations)``.
    """
    m = C.shape[0]
    v = v0.copy()
    mu = np.zeros(m)
    active: list[int] = []
    it = 0
    while True:
        if m == 0:
            return Status.OPTIMAL, v, mu, it
        slack = d - C @ v
        p = int(np.argmin(slack))
        if slack[p] >= -feas_tol:
            return Status.OPTIMAL, v, mu, it
        cp = C[p]
        while True:
            it += 1
            if it > max_iter:
                return Status.MAX_ITERATIONS, v, mu, it
            if active:
                N = C[active].T
                r = np.linalg.lstsq(N, cp, rcond=None)[0]
                z = cp - N @ r
            else:
                r = np.zeros(0)
                z = cp
            zz = float(z @ z)
            viol = float(cp @ v - d[p])
            if viol <= 0.0:
                # partial steps already restored feasibility of p
                active.append(p)
                break
            t2 = viol / zz if zz > 1e-12 else math.inf
            t1, drop = math.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-12:
                    tj = mu[active[j]] / rj
                    if tj < t1:
                        t1, drop = tj, j
            t = min(t1, t2)
            if math.isinf(t):
                return Status.INFEASIBLE, v, mu, it
            if not math.isinf(t2):
                v = v - t * z
            if active:
                mu[active] -= t * r
            mu[p] += t
            if t2 <= t1:
                active.append(p)
                break
            mu[active[drop]] = 0.0
            del active[drop]


class QpWorkspace:
    """Prepared convex QP with fixed ``P``, ``A_ineq``, ``A_eq``.

    The equality constraints are eliminated once through an SVD null-space
    basis; only ``q``, ``b_ineq`` and ``b_eq`` may change between solves.
    """

    def __init__(self, P, A_ineq=None, A_eq=None, check_psd: bool = True):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        n = P.shape[0]
        if P.shape != (n, n):
            raise ValueError("P must be square")
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-10):
            raise ValueError("P is not symmetric")
        if check_psd and n and np.linalg.eigvalsh(P).min() < -1e-8:
            raise ValueError("P is not positive semidefinite")
        self.n = n
        self.P = P
        self.A_ineq = _as_matrix(A_ineq, n)
        self.A_eq = _as_matrix(A_eq, n)

        if self.A_eq.shape[0]:
            U, s, Vt = np.linalg.svd(self.A_eq)
            rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
            self.Z = Vt[rank:].T
            self.eq_pinv = Vt[:rank].T @ (U[:, :rank].T / s[:rank, None])
            # least-squares multipliers: nu = -pinv(A_eq') grad
            self.eq_dual = -(U[:, :rank] / s[:rank]) @ Vt[:rank]
        else:
            self.Z = np.eye(n)
            self.eq_pinv = np.zeros((n, 0))
            self.eq_dual = np.zeros((0, n))
        self.PZ = P @ self.Z
        H = self.Z.T @ self.PZ
        H = 0.5 * (H + H.T)
        self.H = H
        self.A_red = self.A_ineq @ self.Z

        nr = H.shape[0]
        scale = max(1.0, float(np.abs(H).max()) if nr else 1.0)
        self.strongly_convex = nr == 0 or np.linalg.eigvalsh(H).min() > 1e-10 * scale
        if self.strongly_convex:
            self._prepare_factor(H)

    def _prepare_factor(self, H):
        nr = H.shape[0]
        if nr:
            L = np.linalg.cholesky(H)
            self.Linv = sla.solve_triangular(L, np.eye(nr), lower=True)
        else:
            self.Linv = np.zeros((0, 0))
        C = self.A_red @ self.Linv.T
        norms = np.linalg.norm(C, axis=1) if C.shape[0] else np.zeros(0)
        big = norms.max() if norms.size else 0.0
        self.nz = norms > 1e-12 * max(1.0, big)
        self.row_norm = norms[self.nz]
        self.C = C[self.nz] / self.row_norm[:, None]

    def solve(self, q, b_ineq=None, b_eq=None, tol: float = OPT_TOL,
              feas_tol: float = FEAS_TOL, max_iter: int = MAX_ITER) -> SolveStatus:
        q = _as_vector(q)
        b_ineq = _as_vector(b_ineq)
        b_eq = _as_vector(b_eq)
        if q.shape[0] != self.n or b_ineq.shape[0] != self.A_ineq.shape[0] \
                or b_eq.shape[0] != self.A_eq.shape[0]:
            raise ValueError("data vector sizes do not match the workspace")

        x_p = self.eq_pinv @ b_eq
        if b_eq.size:
            eq_res = np.abs(self.A_eq @ x_p - b_eq).max()
            if eq_res > feas_tol * (1.0 + np.abs(b_eq).max()):
                return SolveStatus(Status.INFEASIBLE, message="inconsistent equality constraints")
        g = self.Z.T @ (self.P @ x_p + q)
        b_red = b_ineq - self.A_ineq @ x_p

        if self.strongly_convex:
            status, y, mu_red, iters = self._solve_strict(g, b_red, feas_tol, max_iter)
        else:
            status, y, mu_red, iters = self._solve_proximal(g, b_red, tol, feas_tol, max_iter)
        if status is not Status.OPTIMAL:
            return SolveStatus(status, iterations=iters)

        x = x_p + self.Z @ y
        mu = mu_red
        grad = self.P @ x + q + self.A_ineq.T @ mu
        nu = self.eq_dual @ grad
        value = float(0.5 * x @ self.P @ x + q @ x)
        return SolveStatus(Status.OPTIMAL, x=x, value=value, dual_ineq=mu, dual_eq=nu,
                           iterations=iters)

    def _solve_strict(self, g, b_red, feas_tol, max_iter):
        zero_rows = ~self.nz
        if np.any(b_red[zero_rows] < -feas_tol):
            return Status.INFEASIBLE, None, None, 0
        v0 = -(self.Linv @ g)
        d = b_red[self.nz] / self.row_norm
        status, v, mu_s, iters = _dual_active_set(v0, self.C, d, 1e-3 * feas_tol, max_iter)
        if status is not Status.OPTIMAL:
            return status, None, None, iters
        y = self.Linv.T @ v
        mu = np.zeros(self.A_ineq.shape[0])
        mu[self.nz] = mu_s / self.row_norm
        return status, y, mu, iters

    def _solve_proximal(self, g, b_red, tol, feas_tol, max_iter):
        # Singular reduced Hessian: certify unboundedness along recession
        # directions first, then run proximal-point iterations.
        H, A = self.H, self.A_red
        nr = H.shape[0]
        if A.shape[0]:
            feas = lp_solve(LinearProgram(np.zeros(nr), A, b_red), feas_tol)
            if feas.status is Status.INFEASIBLE:
                return Status.INFEASIBLE, None, None, feas.iterations
        w, V = np.linalg.eigh(H)
        scale = max(1.0, float(np.abs(H).max()))
        Nh = V[:, w <= 1e-10 * scale]
        k = Nh.shape[1]
        A_rec = np.vstack([A @ Nh, np.eye(k), -np.eye(k)])
        b_rec = np.concatenate([np.zeros(A.shape[0]), np.ones(2 * k)])
        rec = lp_solve(LinearProgram(-(Nh.T @ g), A_rec, b_rec), feas_tol)
        if rec.optimal and rec.value > tol:
            return Status.UNBOUNDED, None, None, rec.iterations

        eps = 1e-2 * scale
        inner = QpWorkspace.__new__(QpWorkspace)
        inner.A_red = A
        inner.A_ineq = A
        inner._prepare_factor(H + eps * np.eye(nr))
        y = np.zeros(nr)
        total = 0
        for _ in range(max_iter):
            status, y_new, mu, iters = inner._solve_strict(g - eps * y, b_red, feas_tol, max_iter)
            total += iters
            if status is not Status.OPTIMAL:
                return status, None, None, total
            step = np.abs(y_new - y).max()
            y = y_new
            if step * eps <= 1e-3 * tol:
                return Status.OPTIMAL, y, mu, total
        return Status.MAX_ITERATIONS, None, None, total


def qp_solve(qp: QuadraticProgram, tol: float = OPT_TOL, max_iter: int = MAX_ITER,
             feas_tol: float = FEAS_TOL) -> SolveStatus:
    """Solve a convex QP; raises ``ValueError`` on a non-PSD cost."""
    ws = QpWorkspace(qp.P, qp.A_ineq, qp.A_eq)
    return ws.solve(qp.q, qp.b_ineq, qp.b_eq, tol=tol, feas_tol=feas_tol, max_iter=max_iter)


def kkt_residuals(qp: QuadraticProgram, sol: SolveStatus) -> dict[str, float]:
    """Primal/dual feasibility, stationarity and complementarity residuals."""
    x, mu, nu = sol.x, sol.dual_ineq, sol.dual_eq
    slack = qp.b_ineq - qp.A_ineq @ x
    primal = max(float(np.max(-slack, initial=0.0)),
                 float(np.max(np.abs(qp.A_eq @ x - qp.b_eq), initial=0.0)))
    dual = float(np.max(-mu, initial=0.0))
    stat = qp.P @ x + qp.q + qp.A_ineq.T @ mu + qp.A_eq.T @ nu
    comp = float(np.max(np.abs(mu * slack), initial=0.0))
    return {"primal": primal, "dual": dual, "stationarity": float(np.abs(stat).max(initial=0.0)),
            "complementarity": comp}
