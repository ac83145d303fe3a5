"""Seeded single-threaded interleaver for replayable asynchronous runs.

Steps are labelled in "after read" order: a dominated step gets its
timestamp ``t`` when its read of the shared inner product completes. The
staleness of a read at time ``t`` is ``t - s`` for the oldest step ``s`` whose
effects are still missing from what the reader sees.
"""

from __future__ import annotations

import enum
import heapq
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream derived from the global seed and integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 63), *keys]))


class Action(str, enum.Enum):
    DOMINATE = "dominate"
    DELIVER = "deliver"


@dataclass(frozen=True)
class Decision:
    action: Action
    party: int = -1
    position: int = 0
    forced: bool = False


@dataclass
class SchedulerState:
    """Pending theta messages per party plus staleness bookkeeping.

    ``k`` is the number of worker threads per party being emulated: any of
    the first ``k`` queued messages may be consumed next, so with ``k > 1``
    collaborative updates can apply out of order.
    """

    q: int
    k: int = 1
    seed: int = 0
    deliver_prob: float = 0.5
    adversarial: bool = False
    step: int = 0
    pending: list = field(default_factory=list)
    histogram: Counter = field(default_factory=Counter)
    realized_max: int = 0
    _outstanding: Counter = field(default_factory=Counter)
    _heap: list = field(default_factory=list)

    def __post_init__(self):
        if not self.pending:
            self.pending = [deque() for _ in range(self.q)]
        self.rng = stream(self.seed, 0x5C4E)

    # -- outstanding steps ------------------------------------------------
    def hold(self, step: int, count: int = 1) -> None:
        if count <= 0:
            return
        if self._outstanding[step] == 0:
            heapq.heappush(self._heap, step)
        self._outstanding[step] += count

    def release(self, step: int) -> None:
        self._outstanding[step] -= 1
        if self._outstanding[step] == 0:
            del self._outstanding[step]

    def oldest(self) -> int | None:
        while self._heap and self._heap[0] not in self._outstanding:
            heapq.heappop(self._heap)
        return self._heap[0] if self._heap else None

    # -- messages ---------------------------------------------------------
    def enqueue(self, party: int, msg) -> None:
        self.pending[party].append(msg)
        self.hold(msg.step)

    def take(self, party: int, position: int = 0):
        dq = self.pending[party]
        msg = dq[position]
        del dq[position]
        self.release(msg.step)
        return msg

    def has_pending(self) -> bool:
        return any(self.pending)

    def pending_count(self) -> int:
        return sum(len(d) for d in self.pending)

    # -- reads ------------------------------------------------------------
    def read_staleness(self, extra_oldest: int | None = None) -> int:
        """Staleness of a read at the current step; also records it."""
        t = self.step
        oldest = self.oldest()
        if extra_oldest is not None and (oldest is None or extra_oldest < oldest):
            oldest = extra_oldest
        s = 0 if oldest is None else max(0, t - oldest)
        self.histogram[s] += 1
        if s > self.realized_max:
            self.realized_max = s
        return s


def inject_delay(state: SchedulerState, bound: int) -> Decision:
    """Next scheduling decision for a read at time ``state.step``.

    A pending message is delivered whenever leaving it would let the next read
    be more than ``bound`` steps stale. Otherwise the choice between issuing
    the next dominated step and delivering something is random (or, in
    adversarial mode, always to delay).
    """
    if bound < 0:
        raise ValueError(f"bound must be >= 0, got {bound}")
    t = state.step
    oldest = state.oldest()
    if oldest is not None and t - oldest > bound:
        for party, dq in enumerate(state.pending):
            if dq and dq[0].step == oldest:
                return Decision(Action.DELIVER, party, 0, forced=True)
        # the oldest hold is not a queued message; the caller must clear it
        return Decision(Action.DELIVER, -1, 0, forced=True)
    if oldest is None or state.adversarial:
        return _DOMINATE
    rng = state.rng
    if rng.random() >= state.deliver_prob:
        return _DOMINATE
    nonempty = [p for p, dq in enumerate(state.pending) if dq]
    party = nonempty[int(rng.random() * len(nonempty))]
    window = min(state.k, len(state.pending[party]))
    return Decision(Action.DELIVER, party, int(rng.random() * window))


_DOMINATE = Decision(Action.DOMINATE)


class SampleOrder:
    """Sequence of (dominating party, sample index) pairs.

    Each active party draws its indices from its own stream; a separate
    stream picks which active party dominates next. Because the order is
    independent of delays, runs with different delay settings and the
    centralized baseline visit the same samples.
    """

    _CHUNK = 1024

    def __init__(self, seed: int, active: list[int], n: int):
        self.active = list(active)
        self.n = n
        self._order = stream(seed, 0x0D0)
        self._party = {p: stream(seed, 0xA11, p) for p in self.active}
        # draws are taken in chunks; per party so each stream stays independent
        self._buf = {p: [] for p in self.active}
        self._order_buf: list = []

    def next(self) -> tuple[int, int]:
        if len(self.active) == 1:
            p = self.active[0]
        else:
            if not self._order_buf:
                self._order_buf = self._order.integers(len(self.active), size=self._CHUNK).tolist()[::-1]
            p = self.active[self._order_buf.pop()]
        return p, self.draw(p)

    def draw(self, party: int) -> int:
        buf = self._buf[party]
        if not buf:
            buf.extend(self._party[party].integers(self.n, size=self._CHUNK).tolist()[::-1])
        return buf.pop()
