"""Real-thread execution for wall-clock measurements.

Each active party runs a dominator thread; every party runs ``k`` worker
threads that consume its bounded theta queue. Block writes go through one lock
per block. A dominator may only start step ``t`` once every step older than
``t - tau`` has been fully applied on all parties, which bounds staleness.
Party work is simulated by sleeping, so threads overlap even under the GIL.
"""

from __future__ import annotations

import heapq
import queue
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

from ..data import PartitionedDataset
from ..optimizers import collaborative_step, dominated_step
from .config import Mode, SimConfig, TrainingTrace
from .engine import Setup, run_deterministic

_STOP = object()


class StepTracker:
    """Outstanding-step bookkeeping shared by all threads."""

    def __init__(self, bound: int):
        self.bound = bound
        self.cv = threading.Condition()
        self.next_step = 0
        self.limit = 0
        self.realized_max = 0
        self.histogram: Counter = Counter()
        self.error: BaseException | None = None
        self._holds: Counter = Counter()
        self._heap: list[int] = []

    def _oldest(self):
        while self._heap and self._heap[0] not in self._holds:
            heapq.heappop(self._heap)
        return self._heap[0] if self._heap else None

    def claim(self, holds: int) -> int | None:
        """Reserve the next step and wait until reading for it is allowed."""
        with self.cv:
            if self.error is not None or self.next_step >= self.limit:
                return None
            t = self.next_step
            self.next_step += 1
            heapq.heappush(self._heap, t)
            self._holds[t] = holds
            while True:
                oldest = self._oldest()
                if self.error is not None:
                    return None
                if t - oldest <= self.bound:
                    break
                self.cv.wait()
            s = t - oldest
            self.histogram[s] += 1
            self.realized_max = max(self.realized_max, s)
            return t

    def release(self, step: int) -> None:
        with self.cv:
            self._holds[step] -= 1
            if self._holds[step] == 0:
                del self._holds[step]
                self.cv.notify_all()

    def fail(self, exc: BaseException) -> None:
        with self.cv:
            if self.error is None:
                self.error = exc
            self.cv.notify_all()


def run_threaded(config: SimConfig, data: PartitionedDataset, test_data=None) -> TrainingTrace:
    if config.mode is Mode.CENTRALIZED:
        # a single worker by definition
        return run_deterministic(config, data, test_data)
    s = Setup(config, data, test_data)
    if config.mode is Mode.SYNC:
        return _run_sync(s)
    return _run_async(s)


def _costs(s: Setup) -> list[float]:
    return [s.config.op_cost_s(ell, size) for ell, size in enumerate(s.data.partition.sizes)]


def _run_async(s: Setup) -> TrainingTrace:
    c = s.config
    data, model, alg = s.data, s.model, s.alg
    q, n = c.q, data.n
    cost = _costs(s)
    read_cost = max(cost)
    locks = [threading.Lock() for _ in range(q)]
    queues = [queue.Queue(maxsize=c.queue_capacity) for _ in range(q)]
    tracker = StepTracker(c.hp.tau)
    targets = {p: s.targets(p) for p in range(c.m)}
    aggregators = {p: s.aggregator(key=p + 1) for p in range(c.m)}

    def worker(ell: int):
        party = s.parties[ell]
        qu = queues[ell]
        while True:
            msg = qu.get()
            if msg is _STOP:
                qu.task_done()
                return
            try:
                if tracker.error is None:
                    if cost[ell]:
                        time.sleep(cost[ell])
                    with locks[ell]:
                        model.apply(ell, collaborative_step(alg, party, msg).delta)
            except BaseException as exc:  # surfaced by the main thread
                tracker.fail(exc)
            finally:
                tracker.release(msg.step)
                qu.task_done()

    def dominator(p: int):
        party = s.parties[p]
        agg = aggregators[p]
        try:
            while True:
                t = tracker.claim(1 + len(targets[p]))
                if t is None:
                    return
                i = s.order.draw(p)
                partials = []
                for ell in range(q):
                    with locks[ell]:
                        partials.append(data.partial(ell, i, model.block(ell)))
                if read_cost:
                    time.sleep(read_cost)
                inner = agg(partials)
                with locks[p]:
                    msg, own = dominated_step(alg, party, i, inner, step=t)
                    model.apply(p, own.delta)
                if cost[p]:
                    time.sleep(cost[p])
                tracker.release(t)
                for ell in targets[p]:
                    queues[ell].put(msg)
        except BaseException as exc:
            tracker.fail(exc)

    workers = [threading.Thread(target=worker, args=(ell,), daemon=True) for ell in range(q) for _ in range(c.k)]
    for w in workers:
        w.start()
    try:
        if not s.record(0, 0.0, 0):
            wall = 0.0
            main_agg = s.aggregator(key=0)
            for epoch in range(1, c.hp.epochs + 1):
                t0 = time.perf_counter()
                s.refresh_state(epoch, main_agg)
                tracker.realized_max = 0
                tracker.limit = epoch * n
                doms = [threading.Thread(target=dominator, args=(p,), daemon=True) for p in range(c.m)]
                for d in doms:
                    d.start()
                for d in doms:
                    d.join()
                for qu in queues:
                    qu.join()
                wall += time.perf_counter() - t0
                if tracker.error is not None:
                    raise tracker.error
                if s.record(epoch, wall, tracker.realized_max):
                    break
    finally:
        for ell in range(q):
            for _ in range(c.k):
                queues[ell].put(_STOP)
        for w in workers:
            w.join()
    trace = s.finish()
    trace.staleness_histogram = dict(tracker.histogram)
    return trace


def _run_sync(s: Setup) -> TrainingTrace:
    c = s.config
    data, model, alg = s.data, s.model, s.alg
    q = c.q
    cost = _costs(s)
    read_cost = max(cost)
    agg = s.aggregator()
    if s.record(0, 0.0, 0):
        return s.finish()

    def update(ell: int, own, msg):
        if cost[ell]:
            time.sleep(cost[ell])
        if ell == msg.issuer:
            model.apply(ell, own.delta)
        else:
            model.apply(ell, collaborative_step(alg, s.parties[ell], msg).delta)

    wall = 0.0
    with ThreadPoolExecutor(max_workers=q) as pool:
        for epoch in range(1, c.hp.epochs + 1):
            t0 = time.perf_counter()
            s.refresh_state(epoch, agg)
            for step in range(data.n):
                p, i = s.order.next()
                partials = [data.partial(ell, i, model.block(ell)) for ell in range(q)]
                if read_cost:
                    time.sleep(read_cost)
                msg, own = dominated_step(alg, s.parties[p], i, agg(partials), step=step)
                parties = [p] + s.targets(p)
                # barrier: the next step starts only after every party finished
                for f in [pool.submit(update, ell, own, msg) for ell in parties]:
                    f.result()
            wall += time.perf_counter() - t0
            if s.record(epoch, wall, 0):
                break
    return s.finish()
