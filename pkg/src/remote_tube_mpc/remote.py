"""Remote side: nominal-state estimator, q bookkeeping and the replica actuator."""

from __future__ import annotations

import numpy as np

from .mpc import ControllerPacket, MpcSolution, TrackingMpc, Variant, make_controller_packet
from .plant import PlantPacket, ProtocolError, ancillary_control, packet_input
from .synthesis import LtiModel


def q_update(q: int, gamma_k: int, k: int) -> int:
    return k if gamma_k else q


def estimator_update(x_hat, incoming: PlantPacket | None, gamma_k: int, variant,
                     model: LtiModel, u_plant=None, u_fallback=None, x_fallback=None) -> np.ndarray:
    """One-step prediction ``x_hat(k+1|k)`` from ``x_hat(k|k-1)``.

    ``u_plant`` is the input the plant used at ``k`` as reconstructed by the
    replica (``u_n`` for R/RT, ``u`` for ERT); ``u_fallback`` is the first
    input of the step-``k`` solution and ``x_fallback`` its initial state
    (ERT only).
    """
    variant = Variant(variant)
    x_hat = np.asarray(x_hat, dtype=float)
    if gamma_k:
        if incoming is None:
            raise ProtocolError("gamma_k = 1 without a plant packet")
        x_kk = incoming.x if variant is Variant.ERT else incoming.x_n
        u_kk = u_plant
    else:
        x_kk = x_fallback if variant is Variant.ERT else x_hat
        u_kk = u_fallback
    return model.A @ x_kk + model.B @ np.atleast_1d(u_kk)


class Replica:
    """Copies of every packet sent, so the plant's inputs can be replayed."""

    def __init__(self, K, K_bar):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.K_bar = np.atleast_2d(np.asarray(K_bar, dtype=float))
        self.sent: dict[int, ControllerPacket] = {}

    def store(self, packet: ControllerPacket) -> None:
        self.sent[packet.k_sent] = packet

    def nominal_input(self, pkt: PlantPacket, k: int, hold=None) -> np.ndarray:
        if pkt.s < 0:
            if hold is None:
                raise ProtocolError("plant reports no adopted packet")
            return np.asarray(hold, dtype=float)
        if pkt.s not in self.sent:
            raise ProtocolError(f"replica lacks the packet sent at step {pkt.s}")
        return packet_input(self.sent[pkt.s], k, pkt.x_n, self.K_bar)

    def plant_input(self, pkt: PlantPacket, k: int, variant, hold=None) -> np.ndarray:
        u_n = self.nominal_input(pkt, k, hold)
        if Variant(variant) is Variant.ERT:
            return ancillary_control(u_n, pkt.x_n, pkt.x, self.K)
        return u_n

    def prune(self, s: int) -> None:
        # the plant's s never decreases, so older packets are never replayed
        for key in [key for key in self.sent if key < s]:
            del self.sent[key]


class RemoteController:
    """MPC plus estimator for one run."""

    def __init__(self, mpc: TrackingMpc, x_r, x0, hold_input=None):
        self.mpc = mpc
        cfg = mpc.cfg
        self.variant = cfg.variant
        self.model = cfg.model
        self.K_bar = cfg.gains.K_bar
        self.x_r = np.asarray(x_r, dtype=float)
        self.x_hat = np.array(x0, dtype=float)
        self.q = -1
        self.gamma_prev = 1
        self.replica = Replica(cfg.gains.K, cfg.gains.K_bar)
        self.last_solution: MpcSolution | None = None
        self.last_packet: ControllerPacket | None = None
        self.hold_input = np.zeros(self.model.nu) if hold_input is None else hold_input

    def solve(self, k: int) -> tuple[MpcSolution, ControllerPacket | None]:
        """Solve at step ``k``; no packet is produced when the solve fails."""
        sol = self.mpc.build_and_solve(self.x_hat, self.x_r, bool(self.gamma_prev))
        self.last_solution = sol
        if not sol.optimal:
            return sol, None
        packet = make_controller_packet(sol, self.q, k, self.mpc.cfg)
        self.replica.store(packet)
        self.last_packet = packet
        return sol, packet

    def _fallback(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        sol = self.last_solution
        if sol is not None and sol.optimal:
            return sol.u_traj[0], sol.x_traj[0]
        # no fresh solution: continue the last packet that was sent
        if self.last_packet is not None:
            return packet_input(self.last_packet, k, self.x_hat, self.K_bar), self.x_hat
        return self.hold_input, self.x_hat

    def receive(self, incoming: PlantPacket | None, gamma_k: int, k: int) -> np.ndarray:
        """Fold in the step-``k`` plant packet; returns ``x_hat(k+1|k)``."""
        u_plant = None
        if gamma_k:
            u_plant = self.replica.plant_input(incoming, k, self.variant, self.hold_input)
        u_fb, x_fb = self._fallback(k)
        self.x_hat = estimator_update(self.x_hat, incoming, gamma_k, self.variant, self.model,
                                      u_plant, u_fb, x_fb)
        self.q = q_update(self.q, gamma_k, k)
        self.gamma_prev = gamma_k
        if gamma_k and incoming.s >= 0:
            self.replica.prune(incoming.s)
        return self.x_hat
