from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from ..core import ConfigError, HyperParams


class Mode(str, enum.Enum):
    ASYNC = "async"
    SYNC = "sync"
    CENTRALIZED = "centralized"
    FROZEN_PASSIVE = "frozen_passive"


@dataclass(frozen=True)
class Straggler:
    party: int
    factor: float = 1.4

    def __post_init__(self):
        if not 1.0 <= self.factor:
            raise ConfigError(f"straggler slowdown must be >= 1, got {self.factor}")


@dataclass(frozen=True)
class SimConfig:
    """One simulated training run.

    Costs are simulated per party operation (computing a partial inner
    product or applying a block update) as ``work_us_fixed +
    work_us_per_feature * block_size`` microseconds, multiplied by the
    straggler factor for the straggling party. They only matter in threaded
    mode, where they are slept off so wall time reflects parallelism.
    """

    q: int
    m: int
    hp: HyperParams
    k: int = 1
    mode: Mode = Mode.ASYNC
    threaded: bool = False
    straggler: Straggler | None = None
    queue_capacity: int = 256
    work_us_fixed: float = 0.0
    work_us_per_feature: float = 0.0
    mask_scale: float | None = None
    deliver_prob: float = 0.5
    adversarial_delay: bool = False
    stop_objective: float | None = None
    stop_suboptimality: float | None = None
    f_star: float | None = None
    record_models: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if not 1 <= self.m <= self.q:
            raise ConfigError(f"need 1 <= m <= q, got m={self.m}, q={self.q}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.straggler is not None and not 0 <= self.straggler.party < self.q:
            raise ConfigError(f"straggler party {self.straggler.party} out of range")
        if not 0.0 <= self.deliver_prob <= 1.0:
            raise ConfigError("deliver_prob must be in [0, 1]")
        if self.stop_suboptimality is not None and self.f_star is None:
            raise ConfigError("stop_suboptimality needs f_star")

    def op_cost_s(self, party: int, block_size: int) -> float:
        us = self.work_us_fixed + self.work_us_per_feature * block_size
        if self.straggler is not None and self.straggler.party == party:
            us *= self.straggler.factor
        return us * 1e-6

    @property
    def stop_target(self) -> float | None:
        targets = []
        if self.stop_objective is not None:
            targets.append(self.stop_objective)
        if self.stop_suboptimality is not None:
            targets.append(self.f_star + self.stop_suboptimality)
        return min(targets) if targets else None


@dataclass
class TraceRow:
    epoch: float
    wall_ms: float
    objective: float
    test_metric: float
    max_staleness: int


CSV_HEADER = ("epoch", "wall_ms", "objective", "test_metric", "max_staleness")


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)
    final_w: np.ndarray | None = None
    # per-epoch parameter copies (block order) and per-block update counters
    models: list[np.ndarray] = field(default_factory=list)
    block_updates: list[list[int]] = field(default_factory=list)
    staleness_histogram: dict[int, int] = field(default_factory=dict)
    converged: bool | None = None
    wall_to_target_ms: float | None = None

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([repr(float(r.epoch)), repr(float(r.wall_ms)), repr(float(r.objective)),
                        repr(float(r.test_metric)), int(r.max_staleness)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @staticmethod
    def rows_from_csv(text: str) -> list[TraceRow]:
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        return [TraceRow(float(e), float(t), float(o), float(m), int(s)) for e, t, o, m, s in reader]
