"""Single-threaded, seeded execution of every mode.

All modes share the same per-block update functions, so with zero delay the
federated trajectory and the centralized one agree bit for bit.
"""

from __future__ import annotations

import time

import numpy as np

from ..core import Algorithm, ConfigError, ModelState
from ..data import PartitionedDataset
from ..objectives import full_objective, test_metric, theta
from ..optimizers import (
    PartyState,
    block_direction,
    collaborative_step,
    dominated_step,
    init_saga_table,
    take_snapshot,
)
from ..secure_agg import SecureAggregator, build_tree_pair, exact_sum
from .config import Mode, SimConfig, TraceRow, TrainingTrace
from .scheduler import Action, SampleOrder, SchedulerState, inject_delay, stream


class Setup:
    """State shared by the deterministic and threaded engines."""

    def __init__(self, config: SimConfig, data: PartitionedDataset, test_data: PartitionedDataset | None = None):
        if data.q != config.q:
            raise ConfigError(f"dataset has {data.q} blocks but config.q={config.q}")
        if test_data is not None and test_data.partition != data.partition:
            raise ConfigError("test data is partitioned differently from the training data")
        self.config = config
        self.hp = config.hp
        self.alg = config.hp.algorithm
        self.data = data.with_roles(config.m)
        self.test = test_data if test_data is not None else self.data
        self.model = ModelState(data.partition)
        centralized = config.mode is Mode.CENTRALIZED
        self.parties = [
            PartyState(ell, self.data, self.model, self.hp, active=centralized or ell < config.m)
            for ell in range(config.q)
        ]
        self.trees = build_tree_pair(config.q, config.hp.seed) if config.q >= 2 and not centralized else None
        self.order = SampleOrder(config.hp.seed, list(range(config.m)), self.data.n)
        self.trace = TrainingTrace()
        self.labels = self.data.pooled_labels() if centralized else None

    def aggregator(self, key: int = 0):
        """Inner-product aggregator; masked unless centralized or single party."""
        if self.trees is None:
            return exact_sum
        return SecureAggregator(self.trees, stream(self.hp.seed, 0xA66, key), self.config.mask_scale)

    def targets(self, issuer: int) -> list[int]:
        """Parties that receive a theta broadcast from ``issuer``."""
        limit = self.config.m if self.config.mode is Mode.FROZEN_PASSIVE else self.config.q
        return [ell for ell in range(limit) if ell != issuer]

    def refresh_state(self, epoch: int, aggregate) -> None:
        if self.alg is Algorithm.SVRG:
            snap = take_snapshot(self.data, self.model, self.hp, aggregate, epoch=epoch)
            for p in self.parties:
                p.snapshot = snap
        elif self.alg is Algorithm.SAGA and self.parties[0].saga is None:
            for p, table in zip(self.parties, init_saga_table(self.data, self.model, self.hp, aggregate)):
                p.saga = table

    def record(self, epoch: int, wall_s: float, staleness: int) -> bool:
        """Append a trace row; True when the stop target has been reached."""
        obj = full_objective(self.data, self.model, self.hp)
        metric = test_metric(self.test, self.model, self.hp.loss)
        self.trace.rows.append(TraceRow(float(epoch), wall_s * 1e3, obj, metric, int(staleness)))
        if self.config.record_models:
            self.trace.models.append(self.model.storage())
        self.trace.block_updates.append(list(self.model.versions))
        target = self.config.stop_target
        if target is not None and obj <= target:
            self.trace.converged = True
            self.trace.wall_to_target_ms = wall_s * 1e3
            return True
        return False

    def finish(self) -> TrainingTrace:
        if self.config.stop_target is not None and self.trace.converged is None:
            self.trace.converged = False
        self.trace.final_w = self.model.w
        return self.trace


def run_deterministic(config: SimConfig, data: PartitionedDataset, test_data=None) -> TrainingTrace:
    s = Setup(config, data, test_data)
    if s.record(0, 0.0, 0):
        return s.finish()
    if config.mode is Mode.CENTRALIZED:
        loop = _CentralizedLoop(s)
    elif config.mode is Mode.SYNC:
        loop = _SyncLoop(s)
    else:
        loop = _AsyncLoop(s)
    wall = 0.0
    for epoch in range(1, config.hp.epochs + 1):
        t0 = time.perf_counter()
        s.refresh_state(epoch, loop.aggregate)
        staleness = loop.epoch()
        wall += time.perf_counter() - t0
        if s.record(epoch, wall, staleness):
            break
    trace = s.finish()
    if isinstance(loop, _AsyncLoop):
        trace.staleness_histogram = dict(loop.sched.histogram)
    return trace


class _CentralizedLoop:
    """One worker, exact reads, all blocks updated per sample."""

    def __init__(self, s: Setup):
        self.s = s
        self.aggregate = exact_sum

    def epoch(self) -> int:
        s = self.s
        data, model, alg, gamma = s.data, s.model, s.alg, s.hp.gamma
        for _ in range(data.n):
            _, i = s.order.next()
            inner = exact_sum([data.partial(ell, i, model.block(ell)) for ell in range(data.q)])
            th = theta(s.hp.loss, inner, float(s.labels[i]))
            for p in s.parties:
                model.apply(p.party_id, -gamma * block_direction(alg, p, i, th, p.w))
        return 0


class _SyncLoop:
    """Federated protocol with a barrier after every global step."""

    def __init__(self, s: Setup):
        self.s = s
        self.aggregate = s.aggregator()

    def epoch(self) -> int:
        s = self.s
        data, model = s.data, s.model
        for step in range(data.n):
            p, i = s.order.next()
            inner = self.aggregate([data.partial(ell, i, model.block(ell)) for ell in range(data.q)])
            msg, own = dominated_step(s.alg, s.parties[p], i, inner, step=step)
            model.apply(p, own.delta)
            for ell in s.targets(p):
                model.apply(ell, collaborative_step(s.alg, s.parties[ell], msg).delta)
        return 0


class _AsyncLoop:
    """Seeded interleaving of dominated steps and delayed collaborative ones.

    ``tau2`` bounds how long a theta message may wait before being applied
    (counted in dominated steps); ``tau1`` lets a read miss block updates
    applied within the last ``tau1`` steps.
    """

    def __init__(self, s: Setup):
        self.s = s
        c = s.config
        self.aggregate = s.aggregator()
        self.sched = SchedulerState(q=c.q, k=c.k, seed=c.hp.seed, deliver_prob=c.deliver_prob, adversarial=c.adversarial_delay)
        self.tau1 = c.hp.tau1
        self.tau2 = c.hp.tau2
        self.log: list[list] = [[] for _ in range(c.q)]
        self.hide_rng = stream(c.hp.seed, 0x41D)
        self.targets = {p: s.targets(p) for p in range(c.m)}
        self.bound = max(self.tau1, self.tau2)

    def _apply(self, ell: int, delta: np.ndarray, source_step: int) -> None:
        self.s.model.apply(ell, delta)
        if self.tau1 > 0:
            self.log[ell].append((source_step, delta))

    def _read_block(self, ell: int, t: int):
        """Block as seen by a read at step t, possibly missing recent updates."""
        w = self.s.model.block(ell)
        if self.tau1 == 0 or not self.log[ell]:
            return w, None
        horizon = t - self.tau1
        self.log[ell] = entries = [e for e in self.log[ell] if e[0] >= horizon]
        if not entries:
            return w, None
        if self.s.config.adversarial_delay:
            hidden = entries
        else:
            coins = self.hide_rng.random(len(entries))
            hidden = [e for e, c in zip(entries, coins) if c < 0.5]
            if not hidden:
                return w, None
        oldest, missing = hidden[0]
        for src, d in hidden[1:]:
            missing = missing + d
            if src < oldest:
                oldest = src
        return w - missing, oldest

    def _deliver(self, party: int, position: int) -> None:
        msg = self.sched.take(party, position)
        direction = collaborative_step(self.s.alg, self.s.parties[party], msg)
        self._apply(party, direction.delta, msg.step)

    def _dominate(self) -> None:
        s, sched = self.s, self.sched
        data = s.data
        p, i = s.order.next()
        t = sched.step
        partials = []
        hidden_oldest = None
        for ell in range(data.q):
            w, h = self._read_block(ell, t)
            partials.append(data.partial(ell, i, w))
            if h is not None and (hidden_oldest is None or h < hidden_oldest):
                hidden_oldest = h
        staleness = sched.read_staleness(hidden_oldest)
        assert staleness <= self.bound, "staleness bound violated"
        inner = self.aggregate(partials)
        msg, own = dominated_step(s.alg, s.parties[p], i, inner, step=t)
        self._apply(p, own.delta, t)
        for ell in self.targets[p]:
            sched.enqueue(ell, msg)
        sched.step += 1

    def epoch(self) -> int:
        sched = self.sched
        sched.realized_max = 0
        for _ in range(self.s.data.n):
            while True:
                d = inject_delay(sched, self.tau2)
                if d.action is Action.DOMINATE:
                    break
                self._deliver(d.party, d.position)
            self._dominate()
        # epoch boundary: every in-flight message lands before evaluation
        for party, dq in enumerate(sched.pending):
            while dq:
                self._deliver(party, 0)
        for entries in self.log:
            entries.clear()
        return sched.realized_max
