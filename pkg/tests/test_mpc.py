import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import di_mpc
from remote_tube_mpc.geometry import contains_point, support
from remote_tube_mpc.mpc import (
    ConfigError, ControllerPacket, MpcConfig, MpcSolution, NotOptimalError, TrackingMpc, Variant,
    build_and_solve, constraint_violation, feasible_candidate, make_controller_packet,
    shifted_candidate, tracking_cost,
)
from remote_tube_mpc.optimization import LinearProgram, Status, lp_solve
from remote_tube_mpc.synthesis import GainSet

X_R = np.array([0.5, 0.0, 0.0, 0.0])


def cartpole_cfg(syn, T=1e4, variant=Variant.RT, N=20):
    return MpcConfig(syn.model, N, syn.Q, syn.R, T * np.eye(4), syn.gains.P, syn.gains,
                     syn.sets, variant, syn.W)


@pytest.fixture(scope="module")
def cp_mpc(cartpole_syn):
    return TrackingMpc(cartpole_cfg(cartpole_syn[0]))


def check_solution(cfg, sol, tol=1e-6):
    v = constraint_violation(cfg, sol.u_traj, sol.x_traj, sol.x_bar, sol.u_bar)
    assert v["dynamics"] <= 1e-6
    assert v["steady"] <= 1e-7
    assert max(v["X_c"], v["U_c"], v["X_f"]) <= tol


def test_origin_is_zero_cost(cp_mpc):
    sol = cp_mpc.build_and_solve(np.zeros(4), np.zeros(4))
    assert sol.optimal
    assert np.abs(sol.u_traj).max() <= 1e-9
    assert np.abs(sol.x_bar).max() <= 1e-9 and np.abs(sol.u_bar).max() <= 1e-9
    assert sol.cost == pytest.approx(0.0, abs=1e-9)


def test_admissible_reference_from_itself(cp_mpc):
    sol = cp_mpc.build_and_solve(X_R, X_R)
    assert sol.optimal
    assert np.abs(sol.x_bar - X_R).max() <= 1e-6
    assert sol.cost == pytest.approx(0.0, abs=1e-6)


def test_reference_from_origin_approaches_target_as_offset_weight_grows(cartpole_syn):
    # finite T trades the offset against the transient; x_bar -> x_r as T grows
    gaps = []
    for T in (1e2, 1e4, 1e6, 1e8):
        sol = build_and_solve(cartpole_cfg(cartpole_syn[0], T), np.zeros(4), X_R)
        assert sol.optimal
        check_solution(cartpole_cfg(cartpole_syn[0], T), sol)
        gaps.append(np.abs(sol.x_bar - X_R).max())
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4


def test_solution_invariants_cartpole(cp_mpc):
    sol = cp_mpc.build_and_solve(np.array([0.1, -0.2, 0.05, 0.1]), X_R)
    assert sol.optimal
    check_solution(cp_mpc.cfg, sol)
    c = tracking_cost(cp_mpc.cfg, sol.u_traj, sol.x_traj, sol.x_bar, sol.u_bar, X_R)
    assert c == pytest.approx(sol.cost, rel=1e-8, abs=1e-8)


def test_infeasible_start_reported(cp_mpc):
    sol = cp_mpc.build_and_solve(np.array([4.9, 4.0, 0.0, 0.0]), X_R)
    assert sol.status is Status.INFEASIBLE
    assert not sol.optimal
    with pytest.raises(NotOptimalError):
        make_controller_packet(sol, -1, 0, cp_mpc.cfg)


def test_dimension_mismatch(cp_mpc):
    with pytest.raises(ValueError):
        cp_mpc.build_and_solve(np.zeros(3), X_R)


def test_packet_origin(cp_mpc):
    sol = cp_mpc.build_and_solve(np.zeros(4), np.zeros(4))
    pkt = make_controller_packet(sol, 3, 5, cp_mpc.cfg)
    assert np.abs(pkt.steady_input_affine).max() <= 1e-9
    assert pkt.q == 3 and pkt.k_sent == 5 and pkt.x0_opt is None


def test_packet_scalar_affine():
    gains = GainSet(np.eye(1), np.array([[0.5]]), np.eye(1))
    cfg = type("Cfg", (), {"gains": gains, "variant": Variant.RT})()
    sol = MpcSolution(np.zeros((1, 1)), np.zeros((2, 1)), np.array([2.0]), np.array([1.0]),
                      0.0, Status.OPTIMAL)
    assert make_controller_packet(sol, 0, 0, cfg).steady_input_affine == pytest.approx([2.0])


def test_packet_ert_carries_x0(cartpole_syn):
    cfg = cartpole_cfg(cartpole_syn[0], variant=Variant.ERT)
    sol = TrackingMpc(cfg).build_and_solve(np.array([0.1, 0, 0, 0]), X_R, True)
    pkt = make_controller_packet(sol, 0, 1, cfg)
    np.testing.assert_array_equal(pkt.x0_opt, sol.x_traj[0])


def test_packet_validation():
    with pytest.raises(ValueError):
        ControllerPacket(np.zeros((2, 1)), np.zeros(1), 5, 4)
    with pytest.raises(ValueError):
        ControllerPacket(np.full((2, 1), np.nan), np.zeros(1), 0, 4)


def test_config_validation(di_syn):
    s = di_syn
    base = dict(model=s.model, N=5, Q=s.Q, R=s.R, T=np.eye(2), P=s.gains.P, gains=s.gains,
                sets=s.sets)
    MpcConfig(**base)
    for bad in ({"N": 0}, {"Q": -s.Q}, {"T": np.zeros((2, 2))}, {"R": np.eye(2)},
                {"P": 2 * s.gains.P}, {"Q": np.array([[1.0, 2.0], [0.0, 1.0]])}):
        with pytest.raises(ConfigError):
            MpcConfig(**{**base, **bad})
    with pytest.raises(ConfigError):
        MpcConfig(**base, variant=Variant.ERT)


def test_unobservable_q_rejected(di_syn):
    # (Q^1/2, A) with Q penalising only velocity is not observable for the double integrator
    s = di_syn
    Q = np.diag([1e-12, 1.0])
    Q[0, 0] = 0.0
    with pytest.raises(ConfigError):
        MpcConfig(s.model, 5, Q, s.R, np.eye(2), s.gains.P, s.gains, s.sets)


# ------------------------------------------------------------ properties (double integrator)

@st.composite
def di_states(draw):
    return np.array([draw(st.floats(-3.0, 3.0)), draw(st.floats(-1.0, 1.0))])


@settings(max_examples=40, deadline=None)
@given(di_states(), st.floats(-3.0, 3.0))
def test_shifted_candidate_feasible(di_syn, x0, ref):
    mpc = di_mpc(di_syn)
    x_r = np.array([ref, 0.0])
    sol = mpc.build_and_solve(x0, x_r)
    assume(sol.optimal)
    check_solution(mpc.cfg, sol)
    u, x, xb, ub = shifted_candidate(mpc.cfg, sol)
    assert np.allclose(x[0], sol.x_traj[1])
    assert feasible_candidate(mpc.cfg, u, x, xb, ub)
    nxt = mpc.build_and_solve(sol.x_traj[1], x_r)
    assert nxt.optimal
    assert nxt.cost <= tracking_cost(mpc.cfg, u, x, xb, ub, x_r) + 1e-6


@settings(max_examples=40, deadline=None)
@given(di_states(), st.floats(-3.0, 3.0), st.integers(0, 10**6))
def test_ert_dominates_rt(di_syn, x_n, ref, seed):
    rt, ert = di_mpc(di_syn), di_mpc(di_syn, Variant.ERT)
    x_r = np.array([ref, 0.0])
    Z, W = di_syn.sets.Z, di_syn.W
    # previous error e in Z gives x_hat - x_n = A_K e, which lies in Z - W
    d = np.random.default_rng(seed).normal(size=2)
    e = lp_solve(LinearProgram(d, Z.H, Z.h), 1e-10).x
    x_hat = x_n + di_syn.A_K @ e
    a = rt.build_and_solve(x_n, x_r)
    assume(a.optimal)
    b = ert.build_and_solve(x_hat, x_r, True)
    assert b.optimal
    assert b.cost <= a.cost + 1e-6
    check_solution(ert.cfg, b)
    gap = x_hat - b.x_traj[0]
    for row, off in zip(Z.H, Z.h):
        assert row @ gap + support(W, row) <= off + 1e-6


def test_ert_without_previous_reception_fixes_initial_state(di_syn):
    ert = di_mpc(di_syn, Variant.ERT)
    x = np.array([1.0, 0.2])
    sol = ert.build_and_solve(x, np.zeros(2), False)
    np.testing.assert_allclose(sol.x_traj[0], x, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(di_states(), st.floats(-3.0, 3.0))
def test_cost_nonincreasing_nominal_loop(di_syn, x0, ref):
    mpc = di_mpc(di_syn)
    x_r = np.array([ref, 0.0])
    x = x0
    prev = np.inf
    for _ in range(25):
        sol = mpc.build_and_solve(x, x_r)
        assume(sol.optimal)
        assert sol.cost <= prev + 1e-6
        prev = sol.cost
        x = sol.x_traj[1]


def test_solution_states_inside_tightened_set(di_syn):
    mpc = di_mpc(di_syn)
    sol = mpc.build_and_solve(np.array([2.0, -0.5]), np.array([-2.0, 0.0]))
    for xi in sol.x_traj[:-1]:
        assert contains_point(di_syn.sets.X_c, xi, 1e-7)
    trip = np.concatenate([sol.x_traj[-1], sol.x_bar, sol.u_bar])
    assert contains_point(di_syn.sets.X_f, trip, 1e-7)
