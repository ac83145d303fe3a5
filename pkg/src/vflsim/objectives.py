"""Losses, regularizers, the backward-updating scalar and block gradients.

Objective: f(w) = (1/n) sum_i L(w^T x_i, y_i) + lam * sum_l g(w_l).

* logistic  L(z, y) = log(1 + exp(-y z))
* square    L(z, y) = (z - y)^2           (no 1/2 factor)
* robust    L(z, y) = log((y - z)^2 / 2 + 1)
* l2        g(v) = 1/2 ||v||^2
* rational  g(v) = sum_j v_j^2 / (1 + v_j^2)
"""

from __future__ import annotations

import math

import numpy as np
import scipy.optimize

from .core import (
    DimensionError,
    EmptyData,
    HyperParams,
    Loss,
    ModelState,
    NumericalError,
    Regularizer,
)
from .data import PartitionedDataset, SparseRow


def theta(loss: Loss, inner: float, y: float) -> float:
    """Derivative of the loss with respect to the inner product w^T x."""
    if not (math.isfinite(inner) and math.isfinite(y)):
        raise NumericalError(f"non-finite input: inner={inner}, y={y}")
    if loss is Loss.LOGISTIC:
        m = y * inner
        if m > 0:
            e = math.exp(-m)
            return -y * e / (1.0 + e)
        return -y / (1.0 + math.exp(m))
    if loss is Loss.SQUARE:
        return 2.0 * (inner - y)
    if loss is Loss.ROBUST:
        r = y - inner
        return -r / (r * r / 2.0 + 1.0)
    raise ValueError(f"unknown loss {loss!r}")


def theta_vec(loss: Loss, inner: np.ndarray, y: np.ndarray) -> np.ndarray:
    inner = np.asarray(inner, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(inner)) and np.all(np.isfinite(y))):
        raise NumericalError("non-finite inner products or labels")
    if loss is Loss.LOGISTIC:
        m = y * inner
        # -y * sigmoid(-m), evaluated without overflow on either side
        e = np.exp(-np.abs(m))
        return np.where(m > 0, -y * e / (1.0 + e), -y / (1.0 + e))
    if loss is Loss.SQUARE:
        return 2.0 * (inner - y)
    if loss is Loss.ROBUST:
        r = y - inner
        return -r / (r * r / 2.0 + 1.0)
    raise ValueError(f"unknown loss {loss!r}")


def loss_values(loss: Loss, inner: np.ndarray, y: np.ndarray) -> np.ndarray:
    inner = np.asarray(inner, dtype=float)
    y = np.asarray(y, dtype=float)
    if loss is Loss.LOGISTIC:
        return np.logaddexp(0.0, -y * inner)
    if loss is Loss.SQUARE:
        return (inner - y) ** 2
    if loss is Loss.ROBUST:
        r = y - inner
        return np.log1p(r * r / 2.0)
    raise ValueError(f"unknown loss {loss!r}")


def loss_curvature(loss: Loss, inner: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second derivative of the loss in the inner product."""
    inner = np.asarray(inner, dtype=float)
    if loss is Loss.LOGISTIC:
        s = 0.5 * (1.0 + np.tanh(0.5 * y * inner))
        return s * (1.0 - s)
    if loss is Loss.SQUARE:
        return np.full_like(inner, 2.0)
    if loss is Loss.ROBUST:
        r2 = (y - inner) ** 2
        return (1.0 - r2 / 2.0) / (r2 / 2.0 + 1.0) ** 2
    raise ValueError(f"unknown loss {loss!r}")


def reg_value(reg: Regularizer, w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    if reg is Regularizer.L2:
        return 0.5 * float(w @ w)
    if reg is Regularizer.RATIONAL:
        w2 = w * w
        return float(np.sum(w2 / (1.0 + w2)))
    return 0.0


def reg_grad(reg: Regularizer, w_block: np.ndarray) -> np.ndarray:
    w = np.asarray(w_block, dtype=float)
    if reg is Regularizer.L2:
        return w.copy()
    if reg is Regularizer.RATIONAL:
        return 2.0 * w / (1.0 + w * w) ** 2
    return np.zeros_like(w)


def reg_hess_diag(reg: Regularizer, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if reg is Regularizer.L2:
        return np.ones_like(w)
    if reg is Regularizer.RATIONAL:
        w2 = w * w
        return (2.0 - 6.0 * w2) / (1.0 + w2) ** 3
    return np.zeros_like(w)


def block_gradient(theta_value: float, x_block, lam: float, reg: Regularizer, w_block: np.ndarray) -> np.ndarray:
    """theta * x_block + lam * grad g(w_block).

    ``x_block`` may be a dense vector or a :class:`SparseRow`. The same
    expression serves the dominator (theta computed locally) and the
    collaborators (theta received), so both produce identical bits.
    """
    if isinstance(x_block, SparseRow):
        if x_block.size != len(w_block):
            raise DimensionError(f"x block has length {x_block.size}, w block {len(w_block)}")
        out = lam * reg_grad(reg, w_block)
        out[x_block.indices] += theta_value * x_block.values
        return out
    x = np.asarray(x_block, dtype=float)
    if x.shape != np.shape(w_block):
        raise DimensionError(f"x block has shape {x.shape}, w block {np.shape(w_block)}")
    if reg is Regularizer.L2:
        return theta_value * x + lam * np.asarray(w_block, dtype=float)
    return theta_value * x + lam * reg_grad(reg, w_block)


def _check_nonempty(data: PartitionedDataset):
    if data.n == 0:
        raise EmptyData("dataset has no samples")


def full_objective(data: PartitionedDataset, w: ModelState, hp: HyperParams) -> float:
    _check_nonempty(data)
    z = data.inner_products(w)
    loss = float(np.mean(loss_values(hp.loss, z, data.pooled_labels())))
    reg = sum(reg_value(hp.regularizer, w.block(ell)) for ell in range(data.q))
    return loss + hp.lam * reg


def block_full_gradient(data: PartitionedDataset, ell: int, theta0: np.ndarray, w_block: np.ndarray, hp: HyperParams) -> np.ndarray:
    """(1/n) sum_i [theta0_i x_{i,l} + lam grad g(w_l)] for one block."""
    n = len(theta0)
    return (data.blocks[ell].T @ theta0) / n + hp.lam * reg_grad(hp.regularizer, w_block)


def full_block_gradients(data: PartitionedDataset, w: ModelState, hp: HyperParams, inner: np.ndarray | None = None):
    """Full gradient in block-concatenated order and the per-sample theta table.

    ``inner`` lets callers supply inner products obtained some other way
    (e.g. through masked aggregation).
    """
    _check_nonempty(data)
    if inner is None:
        inner = data.inner_products(w)
    th = theta_vec(hp.loss, inner, data.pooled_labels())
    grads = [block_full_gradient(data, ell, th, w.block(ell), hp) for ell in range(data.q)]
    return np.concatenate(grads), th


def full_gradient(data: PartitionedDataset, w: ModelState, hp: HyperParams) -> np.ndarray:
    """Full gradient in original feature order."""
    g, _ = full_block_gradients(data, w, hp)
    out = np.empty(data.d)
    out[data.partition.order] = g
    return out


def accuracy(data: PartitionedDataset, w: ModelState) -> float:
    z = data.inner_products(w)
    return float(np.mean(np.where(z >= 0, 1.0, -1.0) == data.pooled_labels()))


def rmse(data: PartitionedDataset, w: ModelState) -> float:
    z = data.inner_products(w)
    return float(np.sqrt(np.mean((z - data.pooled_labels()) ** 2)))


def test_metric(data: PartitionedDataset, w: ModelState, loss: Loss) -> float:
    """Accuracy (threshold 0) for classification, RMSE for regression."""
    return accuracy(data, w) if loss is Loss.LOGISTIC else rmse(data, w)


test_metric.__test__ = False  # not a pytest test


def reference_solve(data: PartitionedDataset, hp: HyperParams, w0: np.ndarray | None = None, gtol: float = 1e-13):
    """High-precision minimizer of the full objective (original feature order).

    Uses a trust-region Newton method with the exact Hessian; meant for
    desk-scale problems where a d x d Hessian fits in memory.
    """
    X = data.assemble()
    y = data.pooled_labels()
    n = data.n

    def fun(w):
        z = X @ w
        return float(np.mean(loss_values(hp.loss, z, y))) + hp.lam * reg_value(hp.regularizer, w)

    def grad(w):
        z = X @ w
        return X.T @ theta_vec(hp.loss, z, y) / n + hp.lam * reg_grad(hp.regularizer, w)

    def hess(w):
        z = X @ w
        c = loss_curvature(hp.loss, z, y)
        return (X.T * c) @ X / n + np.diag(hp.lam * reg_hess_diag(hp.regularizer, w))

    x0 = np.zeros(data.d) if w0 is None else np.asarray(w0, dtype=float)
    res = scipy.optimize.minimize(fun, x0, jac=grad, hess=hess, method="trust-exact", options={"gtol": gtol, "maxiter": 500})
    return res.x, float(res.fun)
