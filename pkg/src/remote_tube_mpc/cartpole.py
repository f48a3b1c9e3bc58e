"""Cart-pole benchmark: linearisation, nonlinear ODE, RK4 plant, W estimation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Box, HPolytope
from .synthesis import LtiModel, zoh_discretize

# |w_p|, |w_pdot|, |w_phi|, |w_phidot| from the reference experiments
REFERENCE_W_BOUNDS = (1e-4, 2.7e-3, 3e-4, 4.3e-2)
STATE_BOUNDS = (5.0, 5.0, 0.3, 2.0)
INPUT_BOUND = 10.0
Q_DIAG = (100.0, 10.0, 100.0, 10.0)
R_DIAG = (0.1,)
PHYSICS_HZ = 500
SAFETY_PHI = 0.5


@dataclass(frozen=True)
class CartpoleParams:
    I: float = 0.001
    l: float = 0.5
    m: float = 0.1
    M: float = 1.0
    b: float = 0.0
    g: float = 9.8
    Ts: float = 0.02

    def __post_init__(self):
        for name in ("I", "l", "m", "M", "g", "Ts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.b < 0:
            raise ValueError("b must be nonnegative")

    @property
    def r(self) -> float:
        return self.I * (self.M + self.m) + self.M * self.m * self.l ** 2

    @property
    def substeps(self) -> int:
        return max(1, round(self.Ts * PHYSICS_HZ))

    def to_dict(self) -> dict:
        return asdict(self)


def linearized_matrices(p: CartpoleParams) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time (A_c, B_c) about the upright equilibrium, state (p, p', phi, phi')."""
    I, l, m, M, b, g, r = p.I, p.l, p.m, p.M, p.b, p.g, p.r
    A_c = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(I + m * l ** 2) * b / r, -(m ** 2) * g * l ** 2 / r, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -(m * l * b) / r, m * g * l * (M + m) / r, 0.0],
    ])
    B_c = np.array([[0.0], [(I + m * l ** 2) / r], [0.0], [-m * l / r]])
    return A_c, B_c


def discrete_model(p: CartpoleParams) -> LtiModel:
    A_c, B_c = linearized_matrices(p)
    A, B = zoh_discretize(A_c, B_c, p.Ts)
    return LtiModel(A, B, np.eye(4), p.Ts)


def nonlinear_derivative(x, u: float, p: CartpoleParams) -> tuple[float, float, float, float]:
    """Cart-pole vector field.

    Solves the 2x2 mass-matrix system

        (M+m) p'' + b p' + m l cos(phi) phi'' - m l phi'^2 sin(phi) = u
        m l cos(phi) p'' + (I + m l^2) phi'' - m g l sin(phi) = 0
    """
    _, pd, phi, phid = x
    s, c = math.sin(phi), math.cos(phi)
    ml = p.m * p.l
    a11, a12 = p.M + p.m, ml * c
    a22 = p.I + ml * p.l
    r1 = u - p.b * pd + ml * phid * phid * s
    r2 = ml * p.g * s
    det = a11 * a22 - a12 * a12
    if det <= 0.0:
        raise ZeroDivisionError("singular cart-pole mass matrix")
    pdd = (a22 * r1 - a12 * r2) / det
    phidd = (a11 * r2 - a12 * r1) / det
    return pd, pdd, phid, phidd


def plant_step(x, u, p: CartpoleParams, substeps: int | None = None) -> np.ndarray:
    """Advance one sampling period with RK4 under a zero-order-held force."""
    n = p.substeps if substeps is None else substeps
    dt = p.Ts / n
    u = float(np.asarray(u).reshape(-1)[0])
    s = tuple(float(v) for v in np.asarray(x).reshape(-1))
    f = nonlinear_derivative
    for _ in range(n):
        k1 = f(s, u, p)
        k2 = f(tuple(si + 0.5 * dt * ki for si, ki in zip(s, k1)), u, p)
        k3 = f(tuple(si + 0.5 * dt * ki for si, ki in zip(s, k2)), u, p)
        k4 = f(tuple(si + dt * ki for si, ki in zip(s, k3)), u, p)
        s = tuple(si + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                  for si, a, b, c, d in zip(s, k1, k2, k3, k4))
    out = np.array(s)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("cart-pole state became non-finite")
    return out


def energy(x, p: CartpoleParams) -> float:
    """Total mechanical energy (for b = 0 it is conserved when u = 0)."""
    _, pd, phi, phid = (float(v) for v in x)
    ml = p.m * p.l
    kin = 0.5 * (p.M + p.m) * pd ** 2 + ml * math.cos(phi) * pd * phid \
        + 0.5 * (p.I + ml * p.l) * phid ** 2
    return kin + ml * p.g * math.cos(phi)


def state_constraints() -> HPolytope:
    return HPolytope.symmetric_box(STATE_BOUNDS)


def input_constraints() -> HPolytope:
    return HPolytope.symmetric_box([INPUT_BOUND])


def reference_disturbance_set() -> Box:
    return Box(np.zeros(4), np.array(REFERENCE_W_BOUNDS))


@dataclass
class DisturbanceEstimate:
    box: Box
    flagged_runs: list[int]


DEFAULT_INIT_BOX = (0.2, 0.2, 0.1, 0.2)


def estimate_disturbance_set(p: CartpoleParams, K, n_runs: int = 50, horizon: int = 250,
                             init_box=DEFAULT_INIT_BOX, seed: int = 0,
                             step_fn=None) -> DisturbanceEstimate:
    """Empirical W from closed-loop residuals ``x(k+1) - (A - BK) x(k)``.

    ``step_fn(x, u)`` defaults to the nonlinear plant.  A run whose pole
    angle leaves the safety envelope is truncated at that point and flagged.
    """
    from .network import SplitMix64

    model = discrete_model(p)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_K = model.A - model.B @ K
    step = step_fn or (lambda x, u: plant_step(x, u, p))
    half = np.asarray(init_box, dtype=float)
    rng = SplitMix64(seed)
    bound = np.zeros(4)
    flagged = []
    for run in range(n_runs):
        x = half * (2.0 * rng.uniform_array(4) - 1.0)
        for _ in range(horizon):
            u = -K @ x
            x_next = step(x, u)
            if abs(x_next[2]) > SAFETY_PHI:
                flagged.append(run)
                break
            bound = np.maximum(bound, np.abs(x_next - A_K @ x))
            x = x_next
    return DisturbanceEstimate(Box(np.zeros(4), bound), flagged)
