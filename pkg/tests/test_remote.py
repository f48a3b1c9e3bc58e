import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import di_mpc
from remote_tube_mpc.geometry import contains_point, in_translate
from remote_tube_mpc.mpc import Variant
from remote_tube_mpc.network import Bernoulli, Link, SplitMix64, derive_seed
from remote_tube_mpc.plant import LocalPlant, PlantPacket, ProtocolError
from remote_tube_mpc.remote import Replica, RemoteController, estimator_update, q_update


def test_q_update_examples():
    assert q_update(3, 1, 7) == 7
    assert q_update(3, 0, 7) == 3
    q = -1
    for k in range(50):
        q = q_update(q, 0, k)
    assert q == -1


def test_estimator_rt_received(di_syn):
    m = di_syn.model
    pkt = PlantPacket(np.array([1.0, 0.5]), 0, 0)
    nxt = estimator_update(np.zeros(2), pkt, 1, Variant.RT, m, np.array([0.2]))
    np.testing.assert_allclose(nxt, m.A @ [1.0, 0.5] + m.B @ [0.2])


def test_estimator_rt_lost_uses_solution_input(di_syn):
    m = di_syn.model
    x_hat = np.array([0.3, 0.1])
    nxt = estimator_update(x_hat, None, 0, Variant.RT, m, None, np.array([-0.4]))
    np.testing.assert_allclose(nxt, m.A @ x_hat + m.B @ [-0.4])


def test_estimator_ert_branches(di_syn):
    m = di_syn.model
    pkt = PlantPacket(np.zeros(2), 0, 0, np.array([1.0, 1.0]))
    got = estimator_update(np.zeros(2), pkt, 1, Variant.ERT, m, np.array([0.1]))
    np.testing.assert_allclose(got, m.A @ [1.0, 1.0] + m.B @ [0.1])
    got = estimator_update(np.zeros(2), None, 0, Variant.ERT, m, None, np.array([0.1]),
                           np.array([2.0, 0.0]))
    np.testing.assert_allclose(got, m.A @ [2.0, 0.0] + m.B @ [0.1])


def test_estimator_missing_packet(di_syn):
    with pytest.raises(ProtocolError):
        estimator_update(np.zeros(2), None, 1, Variant.RT, di_syn.model, np.zeros(1))


def test_replica_missing_packet(di_syn):
    rep = Replica(di_syn.gains.K, di_syn.gains.K_bar)
    with pytest.raises(ProtocolError):
        rep.nominal_input(PlantPacket(np.zeros(2), 4, 5), 5)
    with pytest.raises(ProtocolError):
        rep.nominal_input(PlantPacket(np.zeros(2), -1, 5), 5)


def closed_loop(syn, variant, rho, seed, steps=60, x_r=(-2.0, 0.0)):
    """Hand-wired loop over the double integrator with independent links."""
    mpc = di_mpc(syn, variant)
    x = np.array([1.5, 0.0])
    plant = LocalPlant(syn.model, syn.gains.K, syn.gains.K_bar, variant, x)
    remote = RemoteController(mpc, np.array(x_r), x)
    th = Link(Bernoulli(rho), derive_seed(seed, "th"))
    ga = Link(Bernoulli(rho), derive_seed(seed, "ga"))
    w_rng = SplitMix64(derive_seed(seed, "w"))
    W = syn.W.box
    log = []
    for k in range(steps):
        x_hat = remote.x_hat.copy()
        sol, pkt = remote.solve(k)
        theta = 1 if k == 0 else th.transmit(k)
        step = plant.step(pkt if theta else None, theta, k, x)
        gamma = ga.transmit(k)
        ppk = plant.packet(x, k) if gamma else None
        replica_un = remote.replica.nominal_input(ppk, k) if gamma else None
        x_hat_next = remote.receive(ppk, gamma, k)
        x_next = syn.model.A @ x + syn.model.B @ step.u + W.sample(w_rng.uniform_array(2))
        log.append(dict(k=k, x_hat=x_hat, step=step, gamma=gamma, theta=theta, sol=sol,
                        replica_un=replica_un, x_hat_next=x_hat_next, x=x, x_next=x_next))
        x = x_next
        plant.advance_nominal(step.u_n)
    return log


@settings(max_examples=12, deadline=None)
@given(st.sampled_from([0.0, 0.3, 0.6, 0.9]), st.integers(0, 10**6))
def test_rt_loop_properties(di_syn, rho, seed):
    for r in closed_loop(di_syn, Variant.RT, rho, seed):
        st_ = r["step"]
        assert r["sol"].optimal
        if st_.Theta:
            # the estimate the controller solved from equals the plant's nominal state
            assert np.abs(r["x_hat"] - st_.x_n).max() <= 1e-9
            assert r["theta"] == 1 and st_.s == r["k"]
        else:
            assert st_.s != r["k"]
        if r["gamma"]:
            np.testing.assert_allclose(r["replica_un"], st_.u_n, rtol=0, atol=1e-12)
        assert contains_point(di_syn.sets.X_c, r["x_hat"], 1e-7)
        assert contains_point(di_syn.sets.Z, r["x"] - st_.x_n, 1e-7)
        assert contains_point(di_syn.X, r["x"], 1e-7)
        assert contains_point(di_syn.U, st_.u, 1e-7)


@settings(max_examples=12, deadline=None)
@given(st.sampled_from([0.0, 0.3, 0.6, 0.9]), st.integers(0, 10**6))
def test_ert_loop_properties(di_syn, rho, seed):
    for r in closed_loop(di_syn, Variant.ERT, rho, seed):
        st_ = r["step"]
        assert r["sol"].optimal
        if r["gamma"]:
            assert in_translate(r["x_hat_next"], di_syn.W, r["x_next"], 1e-9)
        assert contains_point(di_syn.sets.Z, r["x"] - st_.x_n, 1e-7)
        assert contains_point(di_syn.X, r["x"], 1e-7)
        assert contains_point(di_syn.U, st_.u, 1e-7)


def test_loss_free_every_step_adopts(di_syn):
    for r in closed_loop(di_syn, Variant.RT, 0.0, 1):
        assert r["step"].Theta == 1 and r["step"].s == r["k"]
        np.testing.assert_allclose(r["step"].u_n, r["sol"].u_traj[0], atol=1e-12)


def test_replica_prunes_old_packets(di_syn):
    from remote_tube_mpc.mpc import ControllerPacket
    rep = Replica(di_syn.gains.K, di_syn.gains.K_bar)
    for k in range(5):
        rep.store(ControllerPacket(np.full((3, 1), float(k)), np.zeros(1), k - 1, k))
    rep.prune(3)
    assert sorted(rep.sent) == [3, 4]
    assert rep.nominal_input(PlantPacket(np.zeros(2), 3, 4), 4) == pytest.approx([3.0])
