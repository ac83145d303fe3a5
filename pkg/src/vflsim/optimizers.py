"""Dominated and collaborative update rules for SGD, SVRG and SAGA.

A dominated step runs on an active party: it turns the aggregated inner
product into the loss derivative theta, emits a :class:`ThetaMessage` and
computes its own block direction. A collaborative step runs on any party
that receives such a message; it never sees a label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Algorithm,
    HyperParams,
    ModelState,
    RoleError,
    StateError,
    ThetaMessage,
    UpdateDirection,
)
from .data import PartitionedDataset
from .objectives import block_full_gradient, block_gradient, theta
from .secure_agg import exact_sum


@dataclass(frozen=True)
class SvrgSnapshot:
    """Reference point shared by all parties for one SVRG outer loop.

    ``w_s`` and ``full_grad`` are in block-concatenated order.
    """

    w_s: np.ndarray
    full_grad: np.ndarray
    theta0: np.ndarray
    offsets: np.ndarray
    epoch: int = 0

    def block(self, arr: np.ndarray, ell: int) -> np.ndarray:
        return arr[self.offsets[ell]:self.offsets[ell + 1]]

    def w_block(self, ell: int) -> np.ndarray:
        return self.block(self.w_s, ell)

    def grad_block(self, ell: int) -> np.ndarray:
        return self.block(self.full_grad, ell)


class SagaTable:
    """One party's table of stored block gradients and their running mean."""

    def __init__(self, alpha: np.ndarray):
        self.alpha = np.array(alpha, dtype=float)
        self.n = self.alpha.shape[0]
        self.avg = self.alpha.mean(axis=0)

    def replace(self, i: int, new: np.ndarray) -> None:
        old = self.alpha[i]
        self.avg += (new - old) / self.n
        self.alpha[i] = new

    def recomputed_mean(self) -> np.ndarray:
        return self.alpha.mean(axis=0)


@dataclass
class PartyState:
    """What one party holds locally: its feature block, its parameter block
    (a view into the shared model), and algorithm state for that block."""

    party_id: int
    data: PartitionedDataset
    model: ModelState
    hp: HyperParams
    active: bool = False
    snapshot: SvrgSnapshot | None = None
    saga: SagaTable | None = None

    @property
    def w(self) -> np.ndarray:
        return self.model.block(self.party_id)

    def x(self, i: int):
        return self.data.row(self.party_id, i)

    def label(self, i: int) -> float:
        return float(self.data.labels_for(self.party_id)[i])


def block_direction(alg: Algorithm, party: PartyState, i: int, th: float, w_block: np.ndarray) -> np.ndarray:
    """Shared tail of both step kinds: the block direction v~ for sample i."""
    hp = party.hp
    x = party.x(i)
    g = block_gradient(th, x, hp.lam, hp.regularizer, w_block)
    if alg is Algorithm.SGD:
        return g
    if alg is Algorithm.SVRG:
        snap = party.snapshot
        if snap is None:
            raise StateError("SVRG step without a snapshot")
        ell = party.party_id
        g0 = block_gradient(snap.theta0[i], x, hp.lam, hp.regularizer, snap.w_block(ell))
        return g - g0 + snap.grad_block(ell)
    if alg is Algorithm.SAGA:
        table = party.saga
        if table is None:
            raise StateError("SAGA step without a gradient table")
        v = g - table.alpha[i] + table.avg
        table.replace(i, g)
        return v
    raise ValueError(f"unknown algorithm {alg!r}")


def dominated_step(
    alg: Algorithm, party: PartyState, i: int, w_inner: float, step: int = 0
) -> tuple[ThetaMessage, UpdateDirection]:
    """Active-party update from an (possibly stale) aggregated inner product."""
    if not party.active:
        raise RoleError(f"party {party.party_id} is passive and cannot dominate")
    if not isinstance(alg, Algorithm):
        alg = Algorithm(alg)
    th = theta(party.hp.loss, w_inner, party.label(i))
    epoch = party.snapshot.epoch if (alg is Algorithm.SVRG and party.snapshot is not None) else 0
    msg = ThetaMessage(theta=th, index=i, issuer=party.party_id, step=step, epoch=epoch)
    v = block_direction(alg, party, i, th, party.w)
    return msg, UpdateDirection(party.party_id, -party.hp.gamma * v, "dominated", step)


def collaborative_step(alg: Algorithm, party: PartyState, msg: ThetaMessage) -> UpdateDirection:
    """Update of ``party``'s block from a received theta; uses no label."""
    if not 0 <= msg.index < party.data.n:
        raise IndexError(f"sample index {msg.index} out of range")
    if not isinstance(alg, Algorithm):
        alg = Algorithm(alg)
    v = block_direction(alg, party, msg.index, msg.theta, party.w)
    return UpdateDirection(party.party_id, -party.hp.gamma * v, "collaborative", msg.step)


Aggregator = Callable[[Sequence[float]], float]


def aggregated_inner_products(data: PartitionedDataset, model: ModelState, aggregate: Aggregator = exact_sum) -> np.ndarray:
    P = data.all_partials(model)
    return np.array([aggregate(list(row)) for row in P])


def take_snapshot(
    data: PartitionedDataset, model: ModelState, hp: HyperParams, aggregate: Aggregator = exact_sum, epoch: int = 0
) -> SvrgSnapshot:
    """Freeze w^s, compute theta_0 for every sample and the full gradient."""
    inner = aggregated_inner_products(data, model, aggregate)
    y = data.pooled_labels()  # theta_0 is computed by the active side and shared
    th0 = np.array([theta(hp.loss, z, yi) for z, yi in zip(inner, y)])
    grads = [block_full_gradient(data, ell, th0, model.block(ell), hp) for ell in range(data.q)]
    return SvrgSnapshot(
        w_s=model.storage(),
        full_grad=np.concatenate(grads),
        theta0=th0,
        offsets=data.partition.offsets,
        epoch=epoch,
    )


def init_saga_table(
    data: PartitionedDataset, model: ModelState, hp: HyperParams, aggregate: Aggregator = exact_sum
) -> list[SagaTable]:
    """Per-party tables of block gradients at the initial model."""
    inner = aggregated_inner_products(data, model, aggregate)
    y = data.pooled_labels()
    th = np.array([theta(hp.loss, z, yi) for z, yi in zip(inner, y)])
    tables = []
    for ell in range(data.q):
        w = model.block(ell)
        rows = [block_gradient(th[i], data.row(ell, i), hp.lam, hp.regularizer, w) for i in range(data.n)]
        tables.append(SagaTable(np.array(rows).reshape(data.n, len(w))))
    return tables
