"""Plant-side runtime: consistent actuator, nominal model and ancillary law."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mpc import ControllerPacket, Variant
from .synthesis import LtiModel


class ProtocolError(RuntimeError):
    pass


def consistency_flag(theta_k: int, thetas_since: Sequence[int]) -> int:
    """1 iff the packet arrived and no forward packet was lost since ``q_k + 1``.

    ``thetas_since`` holds the bits for steps ``q_k + 1 .. k`` (including
    ``theta_k`` itself).
    """
    if not theta_k:
        return 0
    return int(all(thetas_since))


def ancillary_control(u_n, x_n, x, K) -> np.ndarray:
    """``u = u_n - K (x - x_n)``."""
    u_n = np.atleast_1d(np.asarray(u_n, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return u_n - K @ (np.asarray(x, dtype=float) - np.asarray(x_n, dtype=float))


def nominal_step(x_n, u_n, model: LtiModel) -> np.ndarray:
    return model.A @ np.asarray(x_n, dtype=float) + model.B @ np.atleast_1d(u_n)


def packet_input(packet: ControllerPacket, k: int, x_n, K_bar) -> np.ndarray:
    """Input prescribed by ``packet`` at step ``k``: stored entry or terminal law."""
    i = k - packet.k_sent
    if i < 0:
        raise ProtocolError(f"packet from step {packet.k_sent} used at earlier step {k}")
    if i < packet.u_traj.shape[0]:
        return packet.u_traj[i].copy()
    return packet.steady_input_affine - np.atleast_2d(K_bar) @ np.asarray(x_n, dtype=float)


@dataclass
class ActuatorState:
    """Active packet and the bookkeeping needed for the consistency flag.

    Instead of the full bit history only the index of the most recent
    forward loss is kept: the product over ``q_k + 1 .. k`` is one iff that
    index is at most ``q_k``.
    """

    s: int | None = None
    active_packet: ControllerPacket | None = None
    last_loss: int = -1

    def record_theta(self, theta_k: int, k: int) -> None:
        if not theta_k:
            self.last_loss = k

    def theta_flag(self, theta_k: int, incoming: ControllerPacket | None) -> int:
        if not theta_k or incoming is None:
            return 0
        return int(self.last_loss <= incoming.q)


def actuator_step(state: ActuatorState, incoming: ControllerPacket | None, Theta_k: int,
                  k: int, x_n, K_bar) -> np.ndarray:
    """Adopt ``incoming`` when consistent, then read the input for step ``k``."""
    if Theta_k:
        if incoming is None or incoming.k_sent != k:
            raise ProtocolError("consistent step without a packet sent at this step")
        state.s = k
        state.active_packet = incoming
    if state.active_packet is None:
        raise ProtocolError("actuator has no packet yet")
    return packet_input(state.active_packet, k, x_n, K_bar)


def nominal_reset(x_n, packet: ControllerPacket | None, Theta_k: int, variant) -> np.ndarray:
    if Variant(variant) is not Variant.ERT or not Theta_k:
        return np.asarray(x_n, dtype=float)
    if packet is None or packet.x0_opt is None:
        raise ProtocolError("ERT packet without x0_opt")
    return packet.x0_opt.copy()


@dataclass
class PlantPacket:
    x_n: np.ndarray
    s: int
    k_sent: int
    x: np.ndarray | None = None

    def __post_init__(self):
        for a in (self.x_n, self.x):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("plant packet contains non-finite entries")


def make_plant_packet(x_n, s: int, x, k: int, variant) -> PlantPacket:
    """RT (and R) send ``{x_n, s}``; ERT also sends the measured state."""
    x_extra = np.array(x, dtype=float) if Variant(variant) is Variant.ERT else None
    return PlantPacket(np.array(x_n, dtype=float), int(s), int(k), x_extra)


@dataclass
class PlantStep:
    Theta: int
    s: int
    u_n: np.ndarray
    u: np.ndarray
    x_n: np.ndarray


class LocalPlant:
    """All logic co-located with the plant for one run.

    In the ``R`` baseline there is no nominal model: the actuator works on
    the measured state, so ``x_n`` is overwritten with ``x`` every step and
    the input is applied without ancillary correction.
    """

    def __init__(self, model: LtiModel, K, K_bar, variant, x0, hold_input=None):
        self.model = model
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.K_bar = np.atleast_2d(np.asarray(K_bar, dtype=float))
        self.variant = Variant(variant)
        self.x_n = np.array(x0, dtype=float)
        self.actuator = ActuatorState()
        # used only before the first adopted packet when the initial
        # exchange is not forced
        self.hold_input = np.zeros(model.nu) if hold_input is None else np.asarray(hold_input)

    def step(self, incoming: ControllerPacket | None, theta_k: int, k: int, x) -> PlantStep:
        """Steps (Theta, s), nominal reset and input computation for tick ``k``."""
        x = np.asarray(x, dtype=float)
        if self.variant is Variant.R:
            self.x_n = x.copy()
        self.actuator.record_theta(theta_k, k)
        Theta = self.actuator.theta_flag(theta_k, incoming)
        if Theta:
            self.x_n = nominal_reset(self.x_n, incoming, Theta, self.variant)
        if Theta or self.actuator.active_packet is not None:
            u_n = actuator_step(self.actuator, incoming if Theta else None, Theta, k,
                                self.x_n, self.K_bar)
        else:
            u_n = self.hold_input.copy()
        if self.variant is Variant.R:
            u = u_n.copy()
        else:
            u = ancillary_control(u_n, self.x_n, x, self.K)
        s = self.actuator.s if self.actuator.s is not None else -1
        return PlantStep(Theta, s, u_n, u, self.x_n.copy())

    def packet(self, x, k: int) -> PlantPacket:
        s = self.actuator.s if self.actuator.s is not None else -1
        return make_plant_packet(self.x_n, s, x, k, self.variant)

    def advance_nominal(self, u_n) -> None:
        self.x_n = nominal_step(self.x_n, u_n, self.model)
