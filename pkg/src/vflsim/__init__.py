"""Simulator for vertically partitioned federated learning with backward updates."""

from .core import (
    Algorithm,
    ConfigError,
    FeaturePartition,
    HyperParams,
    Loss,
    ModelState,
    NonConvergence,
    Regularizer,
    VFLError,
    make_partition,
)
from .data import PartitionedDataset, make_synthetic, vertical_partition_dataset
from .runtime import Mode, SimConfig, Straggler, TrainingTrace, run, run_speedup_suite

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "ConfigError",
    "FeaturePartition",
    "HyperParams",
    "Loss",
    "Mode",
    "ModelState",
    "NonConvergence",
    "PartitionedDataset",
    "Regularizer",
    "SimConfig",
    "Straggler",
    "TrainingTrace",
    "VFLError",
    "make_partition",
    "make_synthetic",
    "run",
    "run_speedup_suite",
    "vertical_partition_dataset",
]
