from __future__ import annotations

from dataclasses import dataclass, replace

from ..core import ConfigError, NonConvergence
from ..data import RawDataset, vertical_partition_dataset
from .config import SimConfig, Straggler, TrainingTrace


@dataclass
class SpeedupPoint:
    q: int
    wall_ms: float | None
    speedup: float | None
    trace: TrainingTrace | None = None


def config_for_q(template: SimConfig, q: int) -> SimConfig:
    """Copy of ``template`` resized to ``q`` parties; the last party straggles."""
    straggler = None
    if template.straggler is not None:
        straggler = Straggler(q - 1, template.straggler.factor)
    return replace(template, q=q, m=min(template.m, q), straggler=straggler)


def run_speedup_suite(
    template: SimConfig,
    party_counts: list[int],
    raw: RawDataset,
    partition_seed: int | None = None,
    strict: bool = True,
) -> list[SpeedupPoint]:
    """Wall time to the template's stop target for each party count, relative to one party.

    With ``strict`` a run that misses the target raises :class:`NonConvergence`
    carrying its trace; otherwise that entry gets empty time and speedup.
    """
    from . import run

    if not party_counts:
        raise ConfigError("party_counts is empty")
    if template.stop_target is None:
        raise ConfigError("speedup runs need a stop target (stop_objective or stop_suboptimality)")
    seed = template.hp.seed if partition_seed is None else partition_seed

    def timed(q: int) -> SpeedupPoint:
        cfg = config_for_q(template, q)
        trace = run(cfg, vertical_partition_dataset(raw, q, seed))
        if not trace.converged:
            if strict:
                raise NonConvergence(f"q={q}: stop target not reached in {cfg.hp.epochs} epochs", trace)
            return SpeedupPoint(q, None, None, trace)
        return SpeedupPoint(q, trace.wall_to_target_ms, None, trace)

    points = [timed(q) for q in party_counts]
    base = next((p for p in points if p.q == 1), None)
    if base is None:
        base = timed(1)
    for p in points:
        if p.wall_ms is not None and base.wall_ms is not None:
            p.speedup = 1.0 if p.q == 1 else base.wall_ms / p.wall_ms
    return points
