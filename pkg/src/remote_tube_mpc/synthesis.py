"""Offline synthesis: gains, tube cross-section, tightened and terminal sets."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .geometry import (
    GEOM_TOL,
    HPolytope,
    LinearMap,
    normalize_directions,
    pontryagin_diff,
    remove_redundant,
    support,
)
from .optimization import FEAS_TOL, LinearProgram, Status, lp_solve

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.99
GT_TOL = 1e-9
GT_KMAX = 500
RPI_TOL = 1e-10


class SynthesisError(RuntimeError):
    pass


@dataclass
class LtiModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None
    sampling_time: float = 1.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        self.C = np.eye(self.nx) if self.C is None else np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.C.shape[1] != self.nx:
            raise ValueError("C has the wrong number of columns")

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
                "sampling_time": self.sampling_time}

    @classmethod
    def from_dict(cls, d: dict) -> "LtiModel":
        return cls(np.array(d["A"]), np.array(d["B"]), np.array(d["C"]), d["sampling_time"])


@dataclass
class GainSet:
    K: np.ndarray
    K_bar: np.ndarray
    P: np.ndarray

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "K_bar": self.K_bar.tolist(), "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GainSet":
        return cls(np.array(d["K"]), np.array(d["K_bar"]), np.array(d["P"]))


@dataclass
class SetSuite:
    Z: HPolytope
    X_c: HPolytope
    U_c: HPolytope
    X_f: HPolytope
    lam: float
    determination_index: int = 0

    def to_dict(self) -> dict:
        return {"Z": self.Z.to_dict(), "X_c": self.X_c.to_dict(), "U_c": self.U_c.to_dict(),
                "X_f": self.X_f.to_dict(), "lambda": self.lam,
                "determination_index": self.determination_index}

    @classmethod
    def from_dict(cls, d: dict) -> "SetSuite":
        return cls(HPolytope.from_dict(d["Z"]), HPolytope.from_dict(d["X_c"]),
                   HPolytope.from_dict(d["U_c"]), HPolytope.from_dict(d["X_f"]),
                   d["lambda"], d.get("determination_index", 0))


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


def zoh_discretize(A_c, B_c, Ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretisation through the augmented matrix exponential."""
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
    n = A_c.shape[0]
    B_c = np.asarray(B_c, dtype=float).reshape(n, -1)
    m = B_c.shape[1]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A_c
    M[:n, n:] = B_c
    E = sla.expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def dare_gain(A, B, Q, R, tol: float = 1e-11, max_iter: int = 10**6):
    """LQR gain by iterating the Riccati recursion from ``P = Q``.

    Returns ``(K, P)`` with ``u = -K x``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
            P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.abs(P_next - P).max() < tol:
            P = P_next
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            if spectral_radius(A - B @ K) >= 1.0:
                break
            return K, P
        P = P_next
    raise SynthesisError("Riccati iteration did not converge: (A, B) is not stabilizable")


def dlyap_terminal_cost(A, B, K_bar, Q, R) -> np.ndarray:
    """Solve ``P = Acl' P Acl + Q + K_bar' R K_bar`` with ``Acl = A - B K_bar``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    K_bar = np.asarray(K_bar, dtype=float).reshape(B.shape[1], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Acl = A - B @ K_bar
    if spectral_radius(Acl) >= 1.0:
        raise SynthesisError("A - B K_bar is not Schur stable")
    n = A.shape[0]
    S = Q + K_bar.T @ R @ K_bar
    # vec(Acl' P Acl) = kron(Acl', Acl') vec(P) in column-major order
    lhs = np.eye(n * n) - np.kron(Acl.T, Acl.T)
    P = np.linalg.solve(lhs, S.reshape(-1, order="F")).reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def default_rpi_directions(A_K, X: HPolytope, U: HPolytope, K, depth: int | None = None,
                           decay: float = 0.1, max_depth: int = 200) -> np.ndarray:
    """Template for :func:`rpi_outer`.

    Base directions are ``+-e_i``, the rows of ``H_x`` and of ``H_u (-K)``;
    each is followed by its images under ``A_K'`` up to ``depth`` so the
    template fixed point exists even when ``|A_K|`` is not a contraction.
    With ``depth=None`` the depth is the smallest ``s`` with
    ``||A_K^(s+1)||_2 <= decay``.
    """
    A_K = np.atleast_2d(A_K)
    n = A_K.shape[0]
    K = np.atleast_2d(K)
    base = normalize_directions([*np.eye(n), *(-np.eye(n)), *X.H, *(-(U.H @ K))])
    if depth is None:
        M = A_K.copy()
        depth = 0
        while np.linalg.norm(M, 2) > decay and depth < max_depth:
            M = A_K @ M
            depth += 1
    dirs = []
    for b in base:
        v = b
        for _ in range(depth + 1):
            dirs.append(v)
            v = A_K.T @ v
    return normalize_directions(dirs)


def _rpi_plan(A_K, D):
    """For each row: ('lp', None, 0) or ('ref', j, scale) or ('zero', None, 0)."""
    norms = np.linalg.norm(D, axis=1)
    Dn = D / norms[:, None]
    plan = []
    for d in D:
        v = A_K.T @ d
        nv = np.linalg.norm(v)
        if nv <= 1e-300:
            plan.append(("zero", None, 0.0))
            continue
        match = np.flatnonzero(np.abs(Dn - v / nv).max(axis=1) <= 1e-12)
        if match.size:
            j = int(match[0])
            plan.append(("ref", j, nv / norms[j]))
        else:
            plan.append(("lp", None, 0.0))
    # rows whose image needs an LP first, then chains back towards the base
    order = [i for i, p in enumerate(plan) if p[0] != "ref"]
    placed = set(order)
    pending = [i for i in range(len(plan)) if i not in placed]
    while pending:
        progressed = [i for i in pending if plan[i][1] in placed]
        if not progressed:
            order.extend(pending)
            break
        order.extend(progressed)
        placed.update(progressed)
        pending = [i for i in pending if i not in placed]
    return plan, order


def rpi_outer(A_K, W, D=None, tol: float = RPI_TOL, max_sweeps: int = 100_000,
              verify_tol: float = GEOM_TOL, prune: bool = True) -> HPolytope:
    """Outer approximation of the minimal RPI set of ``e+ = A_K e + w``.

    Offsets over the template ``D`` are the fixed point of
    ``h(d) = h_Z(A_K' d) + h_W(d)``, iterated upward from the template hull
    of ``W``.  Rows whose image ``A_K' d`` is itself a template direction
    read the current offset instead of solving an LP, and are updated in
    dependency order within a sweep.  The result is checked to satisfy
    ``A_K Z + W <= Z`` before it is returned.
    """
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    n = A_K.shape[0]
    if spectral_radius(A_K) >= 1.0:
        raise SynthesisError("A_K is not Schur stable")
    if D is None:
        D = np.vstack([np.eye(n), -np.eye(n)])
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if not HPolytope(D, np.ones(D.shape[0])).is_bounded:
        raise SynthesisError("template directions do not positively span the space")

    hW = np.array([support(W, d) for d in D])
    if np.any(hW < -1e-12):
        raise SynthesisError("W does not contain the origin")
    plan, order = _rpi_plan(A_K, D)
    lp_rows = [i for i in order if plan[i][0] == "lp"]
    h = hW.copy()
    for sweep in range(max_sweeps):
        old = h.copy()
        Z = HPolytope(D, h) if lp_rows else None
        for i in order:
            kind, j, scale = plan[i]
            if kind == "zero":
                s = 0.0
            elif kind == "ref":
                s = scale * h[j]
            else:
                s = Z.support(A_K.T @ D[i])
            h[i] = s + hW[i]
        change = np.abs(h - old).max()
        if not np.isfinite(change) or np.abs(h).max() > 1e12:
            raise SynthesisError("RPI template iteration diverged; enrich the template")
        if change < tol:
            log.debug("rpi_outer converged after %d sweeps", sweep + 1)
            break
    else:
        raise SynthesisError(f"RPI template iteration did not converge in {max_sweeps} sweeps")

    # the iteration approaches the fixed point from below; grow the offsets
    # until the containment check passes
    for inflate in (0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3):
        h_try = h * (1.0 + inflate) + inflate * np.abs(hW).max()
        if _verify_template(A_K, D, h_try, hW, plan, verify_tol):
            Z = HPolytope(D, h_try)
            return remove_redundant(Z) if prune else Z
    raise SynthesisError("RPI verification failed after convergence")


def _verify_template(A_K, D, h, hW, plan, tol) -> bool:
    """Check ``A_K Z + W <= Z`` row by row.

    Rows with ``A_K' d_i = c d_j`` use the bound ``h_Z(A_K' d_i) <= c h_j``,
    which is exact enough and needs no LP.
    """
    Z = HPolytope(D, h)
    for i, (kind, j, scale) in enumerate(plan):
        if kind == "zero":
            img = 0.0
        elif kind == "ref":
            img = scale * h[j]
        else:
            img = Z.support(A_K.T @ D[i])
        if img + hW[i] > h[i] + tol:
            return False
    return True


def tighten(X: HPolytope, U: HPolytope, Z: HPolytope, K) -> tuple[HPolytope, HPolytope]:
    """``X_c = X - Z`` and ``U_c = U - (-K) Z``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    X_c = pontryagin_diff(X, Z)
    U_c = pontryagin_diff(U, LinearMap(-K, Z))
    for name, S in (("X_c", X_c), ("U_c", U_c)):
        bad = np.flatnonzero(S.h <= 0.0)
        if S.is_empty:
            raise SynthesisError(f"{name} is empty; offending rows {bad.tolist()}")
        if bad.size:
            raise SynthesisError(f"{name} does not contain the origin in its interior; "
                                 f"rows {bad.tolist()} have offsets {S.h[bad].tolist()}")
    return X_c, U_c


def augmented_dynamics(A, B, K_bar) -> np.ndarray:
    """Block matrix propagating ``(x_n, x_bar, u_bar)`` under the steady-state law."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    nx = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(nx, -1)
    nu = B.shape[1]
    K_bar = np.asarray(K_bar, dtype=float).reshape(nu, nx)
    Aa = np.zeros((2 * nx + nu, 2 * nx + nu))
    Aa[:nx, :nx] = A - B @ K_bar
    Aa[:nx, nx:2 * nx] = B @ K_bar
    Aa[:nx, 2 * nx:] = B
    Aa[nx:, nx:] = np.eye(nx + nu)
    return Aa


def max_admissible_set(A_a, X_c: HPolytope, U_c: HPolytope, K_bar, lam: float = DEFAULT_LAMBDA,
                       k_max: int = GT_KMAX, tol: float = GT_TOL,
                       prune: bool = True) -> tuple[HPolytope, int]:
    """Gilbert-Tan iteration for the lambda-restricted maximal admissible set.

    Returns the polytope over ``(x_n, x_bar, u_bar)`` and the determination
    index ``t`` (rows up to ``A_a^t`` were needed).
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    A_a = np.atleast_2d(np.asarray(A_a, dtype=float))
    nx, nu = X_c.n, U_c.n
    K_bar = np.asarray(K_bar, dtype=float).reshape(nu, nx)
    if A_a.shape[0] != 2 * nx + nu:
        raise ValueError("A_a does not match the constraint dimensions")
    Hx, hx, Hu, hu = X_c.H, X_c.h, U_c.H, U_c.h
    zx = np.zeros((Hx.shape[0], nx))
    G = np.vstack([
        np.hstack([Hx, zx, np.zeros((Hx.shape[0], nu))]),
        np.hstack([-Hu @ K_bar, Hu @ K_bar, Hu]),
    ])
    g = np.concatenate([hx, hu])
    steady = np.vstack([
        np.hstack([zx, Hx, np.zeros((Hx.shape[0], nu))]),
        np.hstack([np.zeros((Hu.shape[0], 2 * nx)), Hu]),
    ])
    rows = [G, steady]
    offs = [g, lam * np.concatenate([hx, hu])]
    Ak = np.eye(A_a.shape[0])
    for k in range(1, k_max + 1):
        Ak = A_a @ Ak
        H_cur = np.vstack(rows)
        h_cur = np.concatenate(offs)
        cand = G @ Ak
        keep = []
        for j, row in enumerate(cand):
            res = lp_solve(LinearProgram(row, H_cur, h_cur), FEAS_TOL)
            if res.status is Status.INFEASIBLE:
                raise SynthesisError("terminal constraint set is empty")
            if not (res.optimal and res.value <= g[j] + tol):
                keep.append(j)
        if not keep:
            X_f = HPolytope(H_cur, h_cur)
            if prune:
                X_f = remove_redundant(X_f)
            log.debug("Gilbert-Tan determined at t=%d with %d rows", k - 1, X_f.m)
            return X_f, k - 1
        rows.append(cand[keep])
        offs.append(g[keep])
    raise SynthesisError(f"maximal admissible set not determined within k_max={k_max}")


@dataclass
class Synthesis:
    """Everything the controllers need, computed offline once."""

    model: LtiModel
    X: HPolytope
    U: HPolytope
    W: HPolytope
    Q: np.ndarray
    R: np.ndarray
    gains: GainSet
    sets: SetSuite
    tube: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def A_K(self) -> np.ndarray:
        return self.model.A - self.model.B @ self.gains.K

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "X": self.X.to_dict(), "U": self.U.to_dict(),
                "W": self.W.to_dict(), "Q": self.Q.tolist(), "R": self.R.tolist(),
                "gains": self.gains.to_dict(), "sets": self.sets.to_dict(), "tube": self.tube,
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "Synthesis":
        return cls(LtiModel.from_dict(d["model"]), HPolytope.from_dict(d["X"]),
                   HPolytope.from_dict(d["U"]), HPolytope.from_dict(d["W"]),
                   np.array(d["Q"]), np.array(d["R"]), GainSet.from_dict(d["gains"]),
                   SetSuite.from_dict(d["sets"]), d["tube"], d.get("meta", {}))


def synthesize(model: LtiModel, X: HPolytope, U: HPolytope, W: HPolytope, Q, R,
               lam: float = DEFAULT_LAMBDA, tube: bool = True, K=None, K_bar=None,
               rpi_depth: int | None = None, k_max: int = GT_KMAX) -> Synthesis:
    """Run the whole offline pipeline.

    ``K`` and ``K_bar`` default to the LQR gain for ``(Q, R)``.  With
    ``tube=False`` no tightening happens (``Z = {0}``); that is the
    configuration of the untightened baseline controller.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K_lqr, _ = dare_gain(model.A, model.B, Q, R)
    K = K_lqr if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    K_bar = K_lqr if K_bar is None else np.atleast_2d(np.asarray(K_bar, dtype=float))
    for name, gain in (("K", K), ("K_bar", K_bar)):
        if spectral_radius(model.A - model.B @ gain) >= 1.0:
            raise SynthesisError(f"{name} does not stabilise (A, B)")
    P = dlyap_terminal_cost(model.A, model.B, K_bar, Q, R)
    gains = GainSet(K, K_bar, P)

    if tube:
        A_K = model.A - model.B @ K
        D = default_rpi_directions(A_K, X, U, K, depth=rpi_depth)
        Z = rpi_outer(A_K, W, D)
        X_c, U_c = tighten(X, U, Z, K)
    else:
        Z = HPolytope.symmetric_box(np.zeros(model.nx))
        X_c, U_c = X, U
    A_a = augmented_dynamics(model.A, model.B, K_bar)
    X_f, t = max_admissible_set(A_a, X_c, U_c, K_bar, lam, k_max=k_max)
    sets = SetSuite(Z, X_c, U_c, X_f, lam, t)
    return Synthesis(model, X, U, W, Q, R, gains, sets, tube)


def content_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cached_synthesize(cache_dir: str | Path | None, key_payload: dict, **kwargs) -> Synthesis:
    """:func:`synthesize` with a JSON file cache keyed by ``key_payload``."""
    if cache_dir is None:
        return synthesize(**kwargs)
    cache_dir = Path(cache_dir)
    path = cache_dir / f"synthesis-{content_hash(key_payload)}.json"
    if path.exists():
        return Synthesis.from_dict(json.loads(path.read_text()))
    syn = synthesize(**kwargs)
    syn.meta["key"] = key_payload
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(syn.to_dict()))
    tmp.replace(path)
    return syn
