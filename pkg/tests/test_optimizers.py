import numpy as np
import pytest

import oracles
from vflsim.core import HyperParams, ModelState, RoleError, StateError, ThetaMessage
from vflsim.data import make_synthetic, vertical_partition_dataset
from vflsim.optimizers import (
    PartyState,
    SagaTable,
    collaborative_step,
    dominated_step,
    init_saga_table,
    take_snapshot,
)


def setup(alg, q=3, m=1, n=40, d=9, seed=0):
    raw = make_synthetic(n, d, seed=seed)
    data = vertical_partition_dataset(raw, q, seed=seed).with_roles(m)
    hp = HyperParams(gamma=0.2, lam=0.05, algorithm=alg)
    rng = np.random.default_rng(seed)
    model = ModelState(data.partition, rng.normal(0, 0.5, d))
    parties = [PartyState(ell, data, model, hp, active=ell < m) for ell in range(q)]
    return raw, data, hp, model, parties


def sample_grad(w, x, y, lam):
    """Gradient of log(1+exp(-y w.x)) + lam/2 |w|^2 by finite differences."""
    return oracles.central_diff(lambda v: oracles.sample_objective("logistic", "l2", lam, v, x, y), w)


def test_sgd_directions_assemble_full_gradient():
    raw, data, hp, model, parties = setup("sgd")
    i = 7
    w = model.w
    inner = float(raw.dense()[i] @ w)
    msg, own = dominated_step("sgd", parties[0], i, inner, step=4)
    assert (msg.index, msg.issuer, msg.step) == (i, 0, 4)
    deltas = [own.delta] + [collaborative_step("sgd", parties[ell], msg).delta for ell in (1, 2)]
    full = np.empty(data.d)
    for ell, b in enumerate(data.partition.blocks):
        full[b] = deltas[ell]
    expected = -hp.gamma * sample_grad(w, raw.dense()[i], raw.y[i], hp.lam)
    assert oracles.rel_error(full, expected) < 1e-7


def test_svrg_direction_matches_formula():
    raw, data, hp, model, parties = setup("svrg")
    snap = take_snapshot(data, model, hp)
    for p in parties:
        p.snapshot = snap
    w_s = model.w
    X, y = raw.dense(), raw.y
    full_s = oracles.central_diff(lambda v: oracles.full_objective("logistic", "l2", hp.lam, v, X, y), w_s)
    # move away from the snapshot
    rng = np.random.default_rng(1)
    for ell in range(3):
        model.apply(ell, rng.normal(0, 0.3, data.partition.sizes[ell]))
    w = model.w
    i = 11
    msg, own = dominated_step("svrg", parties[0], i, float(X[i] @ w))
    deltas = [own.delta] + [collaborative_step("svrg", parties[ell], msg).delta for ell in (1, 2)]
    got = np.empty(data.d)
    for ell, b in enumerate(data.partition.blocks):
        got[b] = deltas[ell]
    v = sample_grad(w, X[i], y[i], hp.lam) - sample_grad(w_s, X[i], y[i], hp.lam) + full_s
    assert oracles.rel_error(got, -hp.gamma * v) < 1e-6


def test_saga_table_bookkeeping():
    raw, data, hp, model, parties = setup("saga")
    for p, t in zip(parties, init_saga_table(data, model, hp)):
        p.saga = t
    X = raw.dense()
    before = [p.saga.alpha.copy() for p in parties]
    avg_before = [p.saga.avg.copy() for p in parties]
    i = 3
    msg, own = dominated_step("saga", parties[0], i, float(X[i] @ model.w))
    collab = collaborative_step("saga", parties[1], msg)
    for p, delta in ((parties[0], own.delta), (parties[1], collab.delta)):
        ell = p.party_id
        g = p.saga.alpha[i]
        # the stored row is the fresh block gradient and v = g - old + old mean
        assert np.allclose(delta, -hp.gamma * (g - before[ell][i] + avg_before[ell]), rtol=1e-14, atol=1e-16)
        assert np.allclose(p.saga.avg, p.saga.recomputed_mean(), rtol=1e-12, atol=1e-15)
        others = np.delete(np.arange(data.n), i)
        assert np.array_equal(p.saga.alpha[others], before[ell][others])
    assert np.array_equal(parties[2].saga.alpha, before[2])


def test_saga_running_mean_stays_accurate(rng):
    t = SagaTable(rng.standard_normal((50, 4)))
    for _ in range(2000):
        t.replace(int(rng.integers(50)), rng.standard_normal(4))
    assert np.allclose(t.avg, t.recomputed_mean(), atol=1e-12)


@pytest.mark.parametrize("alg", ["sgd", "svrg", "saga"])
def test_dominated_and_collaborative_agree_bitwise(alg):
    # the same block driven by a dominated step and by a received theta
    _, data, hp, model, parties = setup(alg, q=2, m=2)
    twin = model.copy()
    twin_parties = [PartyState(ell, data, twin, hp, active=True) for ell in range(2)]
    if alg == "svrg":
        snap = take_snapshot(data, model, hp)
        for p in parties + twin_parties:
            p.snapshot = snap
    if alg == "saga":
        for group, m in ((parties, model), (twin_parties, twin)):
            for p, t in zip(group, init_saga_table(data, m, hp)):
                p.saga = t
    for i in (0, 5, 5, 9):
        msg, own = dominated_step(alg, parties[1], i, 0.3)
        twin_dir = collaborative_step(alg, twin_parties[1], ThetaMessage(msg.theta, i, 0, 0))
        assert np.array_equal(own.delta, twin_dir.delta)
        model.apply(1, own.delta)
        twin.apply(1, twin_dir.delta)


def test_role_and_state_errors():
    _, data, hp, model, parties = setup("svrg")
    with pytest.raises(RoleError):
        dominated_step("sgd", parties[1], 0, 0.0)
    with pytest.raises(StateError):
        dominated_step("svrg", parties[0], 0, 0.0)
    with pytest.raises(StateError):
        collaborative_step("saga", parties[1], ThetaMessage(0.1, 0, 0, 0))
    with pytest.raises(IndexError):
        collaborative_step("sgd", parties[1], ThetaMessage(0.1, data.n, 0, 0))


def test_passive_collaboration_never_reads_labels():
    _, data, hp, model, parties = setup("sgd")
    # labels_for raises for passive parties, so success proves no label access
    collaborative_step("sgd", parties[2], ThetaMessage(-0.4, 1, 0, 0))


def test_snapshot_with_masked_aggregation_is_identical():
    from vflsim.secure_agg import SecureAggregator, build_tree_pair

    _, data, hp, model, _ = setup("svrg", q=4)
    plain = take_snapshot(data, model, hp)
    masked = take_snapshot(data, model, hp, SecureAggregator(build_tree_pair(4, 0), 0))
    assert np.array_equal(plain.full_grad, masked.full_grad)
    assert np.array_equal(plain.theta0, masked.theta0)
