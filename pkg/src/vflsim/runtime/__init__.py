"""Execution modes: asynchronous federated, synchronous, centralized and frozen-passive."""

from ..data import PartitionedDataset
from .config import CSV_HEADER, Mode, SimConfig, Straggler, TraceRow, TrainingTrace
from .engine import run_deterministic
from .scheduler import Action, Decision, SampleOrder, SchedulerState, inject_delay
from .speedup import SpeedupPoint, run_speedup_suite
from .threaded import run_threaded


def run(config: SimConfig, data: PartitionedDataset, test_data: PartitionedDataset | None = None) -> TrainingTrace:
    """Train according to ``config``; threaded when ``config.threaded`` is set."""
    if config.threaded:
        return run_threaded(config, data, test_data)
    return run_deterministic(config, data, test_data)


__all__ = [
    "Action",
    "CSV_HEADER",
    "Decision",
    "Mode",
    "SampleOrder",
    "SchedulerState",
    "SimConfig",
    "SpeedupPoint",
    "Straggler",
    "TraceRow",
    "TrainingTrace",
    "inject_delay",
    "run",
    "run_deterministic",
    "run_speedup_suite",
    "run_threaded",
]
