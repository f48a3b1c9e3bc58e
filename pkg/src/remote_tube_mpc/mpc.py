"""Remote tracking MPC over the nominal model, and its controller packets."""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass

import numpy as np

from .geometry import HPolytope, support
from .optimization import FEAS_TOL, QpWorkspace, SolveStatus, Status
from .synthesis import GainSet, LtiModel, SetSuite

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    """``R`` is the untightened baseline; it shares the RT formulation."""

    R = "r"
    RT = "rt"
    ERT = "ert"


class ConfigError(ValueError):
    pass


class NotOptimalError(RuntimeError):
    pass


def _is_pd(M) -> bool:
    M = np.atleast_2d(M)
    return bool(np.allclose(M, M.T, atol=1e-10) and np.linalg.eigvalsh(0.5 * (M + M.T)).min() > 0)


@dataclass
class MpcConfig:
    model: LtiModel
    N: int
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray
    P: np.ndarray
    gains: GainSet
    sets: SetSuite
    variant: Variant = Variant.RT
    W: HPolytope | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.T = np.atleast_2d(np.asarray(self.T, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        nx, nu = self.model.nx, self.model.nu
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError("horizon N must be a positive integer")
        self.N = int(self.N)
        for name, M, dim in (("Q", self.Q, nx), ("R", self.R, nu), ("T", self.T, nx), ("P", self.P, nx)):
            if M.shape != (dim, dim):
                raise ConfigError(f"{name} has shape {M.shape}, expected {(dim, dim)}")
        for name in ("Q", "R", "T"):
            if not _is_pd(getattr(self, name)):
                raise ConfigError(f"{name} must be symmetric positive definite")
        w, V = np.linalg.eigh(self.Q)
        Qh = V @ np.diag(np.sqrt(np.clip(w, 0, None))) @ V.T
        A = self.model.A
        obs = np.vstack([Qh @ np.linalg.matrix_power(A, i) for i in range(nx)])
        if np.linalg.matrix_rank(obs) < nx:
            raise ConfigError("(Q^1/2, A) is not observable")
        Kb = self.gains.K_bar
        Acl = A - self.model.B @ Kb
        lyap = Acl.T @ self.P @ Acl + self.Q + Kb.T @ self.R @ Kb - self.P
        if np.abs(lyap).max() > 1e-6 * max(1.0, np.abs(self.P).max()):
            raise ConfigError("P does not satisfy the terminal Lyapunov identity")
        if self.variant is Variant.ERT and self.W is None:
            raise ConfigError("the ERT variant needs the disturbance set W")


@dataclass
class MpcSolution:
    u_traj: np.ndarray | None
    x_traj: np.ndarray | None
    x_bar: np.ndarray | None
    u_bar: np.ndarray | None
    cost: float
    status: Status
    iterations: int = 0
    solve_ms: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class ControllerPacket:
    u_traj: np.ndarray
    steady_input_affine: np.ndarray
    q: int
    k_sent: int
    x0_opt: np.ndarray | None = None

    def __post_init__(self):
        if self.q > self.k_sent:
            raise ValueError("packet q must not exceed its send time")
        for a in (self.u_traj, self.steady_input_affine, self.x0_opt):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("packet contains non-finite entries")


class _Layout:
    """Index map for z = (u_0..u_{N-1}, x_0..x_N, x_bar, u_bar)."""

    def __init__(self, N: int, nx: int, nu: int):
        self.N, self.nx, self.nu = N, nx, nu
        self.x0 = N * nu
        self.xb = self.x0 + (N + 1) * nx
        self.ub = self.xb + nx
        self.n = self.ub + nu

    def u(self, i: int) -> slice:
        return slice(i * self.nu, (i + 1) * self.nu)

    def x(self, i: int) -> slice:
        s = self.x0 + i * self.nx
        return slice(s, s + self.nx)

    def sel(self, blk: slice) -> np.ndarray:
        E = np.zeros((blk.stop - blk.start, self.n))
        E[:, blk] = np.eye(blk.stop - blk.start)
        return E


class TrackingMpc:
    """Prepared tracking MPC; one instance per closed-loop run."""

    def __init__(self, cfg: MpcConfig):
        self.cfg = cfg
        A, B = cfg.model.A, cfg.model.B
        nx, nu, N = cfg.model.nx, cfg.model.nu, cfg.N
        L = self.layout = _Layout(N, nx, nu)
        S = cfg.sets
        Xb, Ub = L.sel(slice(L.xb, L.xb + nx)), L.sel(slice(L.ub, L.ub + nu))

        H = np.zeros((L.n, L.n))
        for i in range(N):
            Dx = L.sel(L.x(i)) - Xb
            Du = L.sel(L.u(i)) - Ub
            H += Dx.T @ cfg.Q @ Dx + Du.T @ cfg.R @ Du
        DN = L.sel(L.x(N)) - Xb
        H += DN.T @ cfg.P @ DN + Xb.T @ cfg.T @ Xb
        self.H = 2.0 * 0.5 * (H + H.T)
        self._Xb = Xb

        eq = []
        for i in range(N):
            eq.append(L.sel(L.x(i + 1)) - A @ L.sel(L.x(i)) - B @ L.sel(L.u(i)))
        eq.append((A - np.eye(nx)) @ Xb + B @ Ub)
        A_dyn = np.vstack(eq)
        self._n_dyn = A_dyn.shape[0]

        rows, offs = [], []
        for i in range(N):
            rows.append(S.X_c.H @ L.sel(L.x(i)))
            offs.append(S.X_c.h)
            rows.append(S.U_c.H @ L.sel(L.u(i)))
            offs.append(S.U_c.h)
        trip = np.vstack([L.sel(L.x(N)), Xb, Ub])
        rows.append(S.X_f.H @ trip)
        offs.append(S.X_f.h)
        A_in = np.vstack(rows)
        self._b_in = np.concatenate(offs)

        E0 = L.sel(L.x(0))
        self._ws_fixed = QpWorkspace(self.H, A_in, np.vstack([A_dyn, E0]))
        self._ws_free = None
        if cfg.variant is Variant.ERT:
            Z = S.Z
            # support of W along each tube row, fixed at construction
            self._hW = np.array([support(cfg.W, r) for r in Z.H])
            self._ert_rows = Z.H
            self._ws_free = QpWorkspace(self.H, np.vstack([A_in, -Z.H @ E0]), A_dyn)

    def build_and_solve(self, x_hat, x_r, received_prev: bool = False) -> MpcSolution:
        """Solve from the estimate ``x_hat``.

        For ERT with ``received_prev`` the initial state is a decision
        variable constrained by ``x_hat - x(0) in Z - W`` instead of fixed.
        """
        cfg, L = self.cfg, self.layout
        x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
        x_r = np.asarray(x_r, dtype=float).reshape(-1)
        if x_hat.size != L.nx or x_r.size != L.nx:
            raise ValueError("state dimension mismatch")
        q = -2.0 * (self._Xb.T @ (cfg.T @ x_r))
        b_dyn = np.zeros(self._n_dyn)
        t0 = time.perf_counter()
        if cfg.variant is Variant.ERT and received_prev:
            Zs = cfg.sets.Z
            b_ert = Zs.h - self._hW - self._ert_rows @ x_hat
            res = self._ws_free.solve(q, np.concatenate([self._b_in, b_ert]), b_dyn)
        else:
            res = self._ws_fixed.solve(q, self._b_in, np.concatenate([b_dyn, x_hat]))
        ms = 1e3 * (time.perf_counter() - t0)
        return self._unpack(res, x_r, ms)

    def _unpack(self, res: SolveStatus, x_r, ms: float) -> MpcSolution:
        L, cfg = self.layout, self.cfg
        if not res.optimal:
            log.info("MPC solve failed: %s (%s)", res.status.name, res.message)
            return MpcSolution(None, None, None, None, float("nan"), res.status, res.iterations, ms)
        z = res.x
        u = z[:L.x0].reshape(L.N, L.nu)
        x = z[L.x0:L.xb].reshape(L.N + 1, L.nx)
        cost = res.value + float(x_r @ cfg.T @ x_r)
        return MpcSolution(u, x, z[L.xb:L.ub].copy(), z[L.ub:].copy(), cost, res.status,
                           res.iterations, ms)


def build_and_solve(cfg: MpcConfig, x_hat, x_r, received_prev: bool = False) -> MpcSolution:
    """One-shot convenience wrapper; runs should reuse a :class:`TrackingMpc`."""
    return TrackingMpc(cfg).build_and_solve(x_hat, x_r, received_prev)


def make_controller_packet(sol: MpcSolution, q_k: int, k: int, cfg: MpcConfig) -> ControllerPacket:
    if not sol.optimal:
        raise NotOptimalError(f"cannot packetise a {sol.status.name} solution")
    affine = sol.u_bar + cfg.gains.K_bar @ sol.x_bar
    x0 = sol.x_traj[0].copy() if cfg.variant is Variant.ERT else None
    return ControllerPacket(sol.u_traj.copy(), affine, int(q_k), int(k), x0)


def tracking_cost(cfg: MpcConfig, u_traj, x_traj, x_bar, u_bar, x_r) -> float:
    """Objective value of an arbitrary candidate."""
    c = 0.0
    for i in range(cfg.N):
        dx, du = x_traj[i] - x_bar, u_traj[i] - u_bar
        c += dx @ cfg.Q @ dx + du @ cfg.R @ du
    dN, dr = x_traj[cfg.N] - x_bar, x_bar - x_r
    return float(c + dN @ cfg.P @ dN + dr @ cfg.T @ dr)


def constraint_violation(cfg: MpcConfig, u_traj, x_traj, x_bar, u_bar) -> dict[str, float]:
    """Largest violation of each constraint group (0 when satisfied)."""
    A, B, S = cfg.model.A, cfg.model.B, cfg.sets
    u_traj, x_traj = np.asarray(u_traj), np.asarray(x_traj)
    dyn = max(np.abs(x_traj[i + 1] - A @ x_traj[i] - B @ u_traj[i]).max() for i in range(cfg.N))
    xc = max(float(np.max(S.X_c.H @ x_traj[i] - S.X_c.h)) for i in range(cfg.N))
    uc = max(float(np.max(S.U_c.H @ u_traj[i] - S.U_c.h)) for i in range(cfg.N))
    trip = np.concatenate([x_traj[cfg.N], x_bar, u_bar])
    xf = float(np.max(S.X_f.H @ trip - S.X_f.h))
    steady = float(np.abs((A - np.eye(A.shape[0])) @ x_bar + B @ u_bar).max())
    return {"dynamics": float(dyn), "X_c": max(xc, 0.0), "U_c": max(uc, 0.0),
            "X_f": max(xf, 0.0), "steady": steady}


def shifted_candidate(cfg: MpcConfig, sol: MpcSolution):
    """Previous optimum shifted by one step, closed with the terminal law."""
    A, B, Kb = cfg.model.A, cfg.model.B, cfg.gains.K_bar
    uN = sol.u_bar - Kb @ (sol.x_traj[-1] - sol.x_bar)
    u = np.vstack([sol.u_traj[1:], uN])
    x = np.vstack([sol.x_traj[1:], A @ sol.x_traj[-1] + B @ uN])
    return u, x, sol.x_bar.copy(), sol.u_bar.copy()


def feasible_candidate(cfg: MpcConfig, u, x, x_bar, u_bar, tol: float = 10 * FEAS_TOL) -> bool:
    return all(v <= tol for v in constraint_violation(cfg, u, x, x_bar, u_bar).values())
