import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vflsim.core import DimensionError, HyperParams, Loss, ModelState, NumericalError, Regularizer
from vflsim.data import SparseRow, make_synthetic, vertical_partition_dataset
from vflsim.objectives import (
    accuracy,
    block_gradient,
    full_gradient,
    full_objective,
    loss_curvature,
    reference_solve,
    reg_grad,
    rmse,
    theta,
    theta_vec,
)

LOSSES = ["logistic", "square", "robust"]
REGS = ["l2", "rational", "none"]


def label_for(loss, rng):
    return float(rng.choice([-1.0, 1.0])) if loss == "logistic" else float(rng.standard_normal())


@pytest.mark.parametrize("loss", LOSSES)
def test_theta_is_loss_derivative(loss, rng):
    for _ in range(50):
        z, y = float(rng.normal(0, 2)), label_for(loss, rng)
        fd = (oracles.loss(loss, z + 1e-6, y) - oracles.loss(loss, z - 1e-6, y)) / 2e-6
        assert theta(Loss(loss), z, y) == pytest.approx(fd, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("loss", LOSSES)
def test_curvature_is_theta_derivative(loss, rng):
    L = Loss(loss)
    for _ in range(30):
        z, y = float(rng.normal(0, 2)), label_for(loss, rng)
        fd = (theta(L, z + 1e-6, y) - theta(L, z - 1e-6, y)) / 2e-6
        assert float(loss_curvature(L, np.array([z]), np.array([y]))[0]) == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_theta_vec_matches_scalar(rng):
    z = rng.normal(0, 30, 200)
    y = rng.choice([-1.0, 1.0], 200)
    for L in Loss:
        vec = theta_vec(L, z, y)
        assert np.allclose(vec, [theta(L, a, b) for a, b in zip(z, y)], rtol=1e-15, atol=0)


def test_logistic_theta_is_stable_at_extreme_margins():
    assert theta(Loss.LOGISTIC, 1e4, 1.0) == pytest.approx(0.0, abs=1e-300)
    assert theta(Loss.LOGISTIC, -1e4, 1.0) == -1.0
    assert np.all(np.isfinite(theta_vec(Loss.LOGISTIC, np.array([-1e5, 1e5]), np.array([1.0, -1.0]))))


def test_theta_rejects_non_finite():
    with pytest.raises(NumericalError):
        theta(Loss.SQUARE, math.nan, 1.0)
    with pytest.raises(NumericalError):
        theta(Loss.LOGISTIC, 1.0, math.inf)


@pytest.mark.parametrize("reg", ["l2", "rational"])
def test_regularizer_gradient(reg, rng):
    for _ in range(20):
        w = rng.normal(0, 2, 6)
        fd = oracles.central_diff(lambda v: oracles.reg(reg, v), w)
        assert oracles.rel_error(reg_grad(Regularizer(reg), w), fd) < 1e-7


@pytest.mark.parametrize("loss", LOSSES)
@pytest.mark.parametrize("reg", REGS)
def test_block_gradient_matches_finite_differences(loss, reg, rng):
    lam = 0.3
    for _ in range(10):
        d = 7
        w, x, y = rng.normal(0, 1, d), rng.normal(0, 1, d), label_for(loss, rng)
        blk = rng.permutation(d)[:3]
        th = theta(Loss(loss), float(w @ x), y)
        g = block_gradient(th, x[blk], lam, Regularizer(reg), w[blk])

        def f(wb):
            full = w.copy()
            full[blk] = wb
            # the regularizer is separable, only the block's share varies
            return oracles.loss(loss, float(full @ x), y) + lam * oracles.reg(reg, wb)

        assert oracles.rel_error(g, oracles.central_diff(f, w[blk])) < 1e-5


def test_block_gradient_sparse_equals_dense(rng):
    x = np.array([0.0, 1.5, 0.0, -2.0])
    w = rng.standard_normal(4)
    sparse = SparseRow(np.array([1, 3]), np.array([1.5, -2.0]), 4)
    for reg in Regularizer:
        assert np.array_equal(block_gradient(0.7, x, 0.1, reg, w), block_gradient(0.7, sparse, 0.1, reg, w))


def test_block_gradient_dimension_mismatch():
    with pytest.raises(DimensionError):
        block_gradient(1.0, np.ones(3), 0.1, Regularizer.L2, np.ones(4))
    with pytest.raises(DimensionError):
        block_gradient(1.0, SparseRow(np.array([0]), np.array([1.0]), 3), 0.1, Regularizer.L2, np.ones(4))


@pytest.mark.parametrize("loss,reg", [("logistic", "l2"), ("square", "rational"), ("robust", "l2")])
def test_full_objective_and_gradient(loss, reg, rng):
    task = "classification" if loss == "logistic" else "regression"
    raw = make_synthetic(30, 8, seed=3, task=task)
    data = vertical_partition_dataset(raw, 3, seed=1)
    hp = HyperParams(gamma=0.1, lam=0.05, loss=loss, regularizer=reg)
    w = rng.standard_normal(8)
    model = ModelState(data.partition, w)
    X, y = raw.dense(), raw.y
    assert full_objective(data, model, hp) == pytest.approx(oracles.full_objective(loss, reg, 0.05, w, X, y), rel=1e-12)
    fd = oracles.central_diff(lambda v: oracles.full_objective(loss, reg, 0.05, v, X, y), w)
    assert oracles.rel_error(full_gradient(data, model, hp), fd) < 1e-6


def test_metrics():
    raw = make_synthetic(50, 4, seed=0)
    data = vertical_partition_dataset(raw, 2, seed=0)
    model = ModelState(data.partition)
    # w = 0 predicts +1 everywhere
    assert accuracy(data, model) == pytest.approx(np.mean(raw.y == 1.0))
    assert rmse(data, model) == pytest.approx(math.sqrt(np.mean(raw.y ** 2)))


def test_reference_solve_reaches_stationarity():
    raw = make_synthetic(80, 6, seed=2)
    data = vertical_partition_dataset(raw, 2, seed=0)
    hp = HyperParams(gamma=0.1, lam=1e-2)
    w, f = reference_solve(data, hp)
    model = ModelState(data.partition, w)
    assert np.linalg.norm(full_gradient(data, model, hp)) < 1e-10
    assert f == pytest.approx(full_objective(data, model, hp), rel=1e-14)


@given(st.floats(-50, 50), st.sampled_from([-1.0, 1.0]))
def test_logistic_theta_bounded(z, y):
    th = theta(Loss.LOGISTIC, z, y)
    assert -1.0 <= th * y <= 0.0
