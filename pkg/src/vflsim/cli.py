"""Command-line experiment driver.

Experiments are described by a flat YAML mapping (one experiment per file);
command-line flags override file keys. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import (
    ConfigError,
    DimensionError,
    EmptyData,
    HyperParams,
    InvalidPartition,
    Loss,
    NonConvergence,
    NumericalError,
    ParseError,
    VFLError,
    make_partition,
)
from .data import (
    make_synthetic,
    minmax_normalize_features,
    minmax_normalize_labels,
    parse_csv,
    parse_libsvm,
    partition_like,
    train_test_split,
    vertical_partition_dataset,
)
from .objectives import reference_solve, theta_vec
from .runtime import Mode, SimConfig, Straggler, run, run_speedup_suite
from .secure_agg import (
    AuditReport,
    audit_transcript,
    build_tree_pair,
    collusion_pairs,
    masked_aggregate,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGENCE = 0, 1, 2, 3

# learning rates customarily searched; any positive value is accepted
GAMMA_GRID = (5e-1, 1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5)

LOSSLESS_TOL_DETERMINISTIC = 1e-6
LOSSLESS_TOL_THREADED = 5e-3

FORMATS = ("csv", "libsvm", "synthetic")


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    format: str = "synthetic"
    label_column: int | str = 0
    n_features: int | None = None
    n: int = 500
    d: int = 20
    noise: float = 0.1
    data_seed: int = 0
    test_fraction: float = 0.2
    normalize_features: bool = False
    normalize_labels: bool | None = None
    loss: str = "logistic"
    regularizer: str = "l2"
    lam: float = 1e-4
    gamma: float = 1e-1
    algorithm: str = "svrg"
    q: int = 4
    m: int = 1
    k: int = 1
    mode: str = "async"
    epochs: int = 10
    tau1: int = 0
    tau2: int = 0
    threaded: bool = False
    straggler_party: int | None = None
    straggler_factor: float = 1.4
    work_us_fixed: float = 0.0
    work_us_per_feature: float = 0.0
    deliver_prob: float = 0.5
    stop_objective: float | None = None
    stop_suboptimality: float | None = None
    f_star: float | None = None
    q_list: list = field(default_factory=lambda: [1, 2, 4])
    partition_seed: int | None = None
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in raw.items()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a key-value mapping")
        cfg = cls.from_mapping(raw)
        if cfg.dataset is not None and not Path(cfg.dataset).is_absolute():
            # dataset paths are relative to the config file
            cfg.dataset = str(Path(path).parent / cfg.dataset)
        return cfg

    def validate(self) -> "ExperimentConfig":
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.format != "synthetic":
            if not self.dataset:
                raise ConfigError(f"format {self.format} needs a dataset path")
            if not Path(self.dataset).is_file():
                raise ConfigError(f"dataset file not found: {self.dataset}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must be in [0, 1)")
        if self.stop_suboptimality is not None and self.stop_suboptimality <= 0:
            raise ConfigError("stop_suboptimality must be positive")
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}") from None
        self.hyperparams()
        return self

    def hyperparams(self) -> HyperParams:
        try:
            return HyperParams(
                gamma=self.gamma, lam=self.lam, algorithm=self.algorithm, loss=self.loss,
                regularizer=self.regularizer, epochs=self.epochs, tau1=self.tau1, tau2=self.tau2, seed=self.seed,
            )
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def classification(self) -> bool:
        return Loss(self.loss) is Loss.LOGISTIC

    def sim_config(self, f_star: float | None = None, **overrides) -> SimConfig:
        straggler = None
        if self.straggler_party is not None:
            straggler = Straggler(self.straggler_party, self.straggler_factor)
        kw = dict(
            q=self.q, m=self.m, k=self.k, hp=self.hyperparams(), mode=Mode(self.mode), threaded=self.threaded,
            straggler=straggler, work_us_fixed=self.work_us_fixed, work_us_per_feature=self.work_us_per_feature,
            deliver_prob=self.deliver_prob, stop_objective=self.stop_objective,
            stop_suboptimality=self.stop_suboptimality, f_star=f_star,
        )
        kw.update(overrides)
        return SimConfig(**kw)


_FLOAT_KEYS = {"noise", "test_fraction", "lam", "gamma", "straggler_factor", "work_us_fixed", "work_us_per_feature",
               "deliver_prob", "stop_objective", "stop_suboptimality", "f_star"}
_INT_KEYS = {"n_features", "n", "d", "data_seed", "q", "m", "k", "epochs", "tau1", "tau2", "straggler_party",
             "partition_seed", "seed"}


def _coerce(key, value):
    # YAML reads forms like 1e-8 as strings
    if value is None:
        return None
    try:
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _INT_KEYS:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be numeric, got {value!r}") from None
    return value


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------


def load_raw(cfg: ExperimentConfig):
    if cfg.format == "synthetic":
        task = "classification" if cfg.classification else "regression"
        raw = make_synthetic(cfg.n, cfg.d, seed=cfg.data_seed, task=task, noise=cfg.noise)
    elif cfg.format == "csv":
        raw = parse_csv(cfg.dataset, label_column=cfg.label_column, classification=cfg.classification)
    else:
        raw = parse_libsvm(cfg.dataset, n_features=cfg.n_features)
    if cfg.normalize_features:
        raw = minmax_normalize_features(raw)
    normalize_labels = (not cfg.classification) if cfg.normalize_labels is None else cfg.normalize_labels
    if normalize_labels:
        raw = minmax_normalize_labels(raw)
    return raw


def split_raw(cfg: ExperimentConfig, raw):
    if cfg.test_fraction > 0:
        return train_test_split(raw, cfg.test_fraction, cfg.data_seed)
    return raw, None


def load_partitioned(cfg: ExperimentConfig, q: int | None = None):
    q = cfg.q if q is None else q
    train_raw, test_raw = split_raw(cfg, load_raw(cfg))
    pseed = cfg.seed if cfg.partition_seed is None else cfg.partition_seed
    train = vertical_partition_dataset(train_raw, q, pseed)
    test = partition_like(test_raw, train.partition) if test_raw is not None else None
    return train, test


def resolve_f_star(cfg: ExperimentConfig, train) -> float | None:
    if cfg.stop_suboptimality is None:
        return None
    if cfg.f_star is not None:
        return cfg.f_star
    _, f = reference_solve(train, cfg.hyperparams())
    return f


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(cfg: ExperimentConfig) -> int:
    train, test = load_partitioned(cfg)
    trace = run(cfg.sim_config(resolve_f_star(cfg, train)), train, test)
    _emit(trace.to_csv(), cfg.out)
    last = trace.final
    print(
        f"final epoch={last.epoch:g} objective={last.objective:.10g} test_metric={last.test_metric:.6g} "
        f"wall_ms={last.wall_ms:.1f} max_staleness={last.max_staleness}",
        file=sys.stderr if cfg.out is None else sys.stdout,
    )
    if trace.converged is False:
        print("stop target not reached within the epoch cap", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


@dataclass
class Comparison:
    federated: float
    centralized: float
    frozen: float
    tolerance: float
    higher_is_better: bool

    @property
    def lossless_delta(self) -> float:
        return self.federated - self.centralized

    @property
    def ablation_delta(self) -> float:
        return self.frozen - self.federated

    @property
    def lossless(self) -> bool:
        return abs(self.lossless_delta) <= self.tolerance

    @property
    def ablation_gap(self) -> bool:
        if self.higher_is_better:
            return self.frozen < self.federated
        return self.frozen > self.federated

    def report(self) -> str:
        lines = [
            f"federated    test_metric={self.federated:.6f}",
            f"centralized  test_metric={self.centralized:.6f}",
            f"frozen       test_metric={self.frozen:.6f}",
            f"delta federated-centralized={self.lossless_delta:+.3e} tolerance={self.tolerance:g} "
            + ("LOSSLESS" if self.lossless else "NOT-LOSSLESS"),
            f"delta frozen-federated={self.ablation_delta:+.3e} " + ("ABLATION-GAP" if self.ablation_gap else "NO-GAP"),
        ]
        return "\n".join(lines) + "\n"


_SHARED_KEYS = ("format", "dataset", "label_column", "n_features", "n", "d", "noise", "data_seed", "test_fraction",
                "normalize_features", "normalize_labels", "loss", "seed", "q", "partition_seed")


def cmd_compare(cfgs: list[ExperimentConfig]) -> int:
    if len(cfgs) == 1:
        base = cfgs[0]
        fed_mode = base.mode if base.mode in (Mode.ASYNC.value, Mode.SYNC.value) else Mode.ASYNC.value
        cfgs = [
            dataclasses.replace(base, mode=fed_mode),
            dataclasses.replace(base, mode=Mode.CENTRALIZED.value),
            dataclasses.replace(base, mode=Mode.FROZEN_PASSIVE.value),
        ]
    elif len(cfgs) != 3:
        raise ConfigError("compare takes one config or three (federated, centralized, frozen)")
    for key in _SHARED_KEYS:
        values = {repr(getattr(c, key)) for c in cfgs}
        if len(values) > 1:
            raise ConfigError(f"compared configs disagree on {key!r}")
    train, test = load_partitioned(cfgs[0])
    metrics = [run(c.sim_config(), train, test).final.test_metric for c in cfgs]
    tol = LOSSLESS_TOL_THREADED if cfgs[0].threaded else LOSSLESS_TOL_DETERMINISTIC
    cmp = Comparison(*metrics, tolerance=tol, higher_is_better=cfgs[0].classification)
    _emit(cmp.report(), cfgs[0].out)
    return EXIT_OK


def speedup_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["q", "wall_ms", "speedup"])
    for p in points:
        w.writerow([p.q, "" if p.wall_ms is None else repr(p.wall_ms), "" if p.speedup is None else repr(p.speedup)])
    return buf.getvalue()


def cmd_speedup(cfg: ExperimentConfig, q_list: list[int]) -> int:
    if not q_list:
        raise ConfigError("q_list is empty")
    train_raw, _ = split_raw(cfg, load_raw(cfg))
    f_star = None
    if cfg.stop_suboptimality is not None:
        f_star = cfg.f_star
        if f_star is None:
            _, f_star = reference_solve(vertical_partition_dataset(train_raw, 1, 0), cfg.hyperparams())
    if cfg.stop_objective is None and f_star is None:
        raise ConfigError("speedup needs stop_objective or stop_suboptimality")
    template = cfg.sim_config(f_star, q=max(q_list), m=min(cfg.m, min(q_list)))
    pseed = cfg.seed if cfg.partition_seed is None else cfg.partition_seed
    points = run_speedup_suite(template, list(q_list), train_raw, partition_seed=pseed, strict=False)
    _emit(speedup_csv(points), cfg.out)
    return EXIT_OK


def audit_run(cfg: ExperimentConfig, aggregations: int = 100, collusion: bool = False, unmask_debug: bool = False) -> AuditReport:
    """Masked aggregations over the partials of a short SGD run, audited."""
    train, _ = load_partitioned(cfg)
    q = train.q
    if q < 2:
        raise ConfigError("audit needs at least two parties")
    hp = cfg.hyperparams()
    trees = build_tree_pair(q, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    y = train.pooled_labels()
    # a random start keeps partials distinct and nonzero
    w = [rng.normal(0.0, 0.1, s) for s in train.partition.sizes]
    coalitions = [list(c) for c in collusion_pairs(q)] if collusion else None
    report = AuditReport()
    for _ in range(aggregations):
        i = int(rng.integers(train.n))
        partials = [train.partial(ell, i, w[ell]) for ell in range(q)]
        inner, transcript = masked_aggregate(partials, rng, trees, unmask_debug=unmask_debug)
        report.extend(audit_transcript(transcript, partials, coalitions))
        th = float(theta_vec(hp.loss, [inner], [y[i]])[0])
        for ell in range(q):
            w[ell] = w[ell] - hp.gamma * th * np.asarray(train.blocks[ell][i]).ravel()
    return report


def cmd_audit(cfg: ExperimentConfig, collusion: bool, unmask_debug: bool) -> int:
    report = audit_run(cfg, collusion=collusion, unmask_debug=unmask_debug)
    _emit(report.to_text() + "\n", cfg.out)
    return EXIT_OK


def cmd_partition(cfg: ExperimentConfig) -> int:
    d = cfg.d if cfg.format == "synthetic" else load_raw(cfg).d
    part = make_partition(d, cfg.q, cfg.seed if cfg.partition_seed is None else cfg.partition_seed)
    lines = []
    for ell, block in enumerate(part.blocks):
        role = "active" if ell < cfg.m else "passive"
        lines.append(f"party {ell} ({role}) {len(block)} features: {' '.join(map(str, block.tolist()))}")
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vflsim", description="Vertically partitioned federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, multi=False):
        if multi:
            p.add_argument("--config", action="append", help="experiment file (repeatable)")
        else:
            p.add_argument("--config", help="experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--deterministic", action="store_true", help="single-threaded seeded execution")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    common(sub.add_parser("run", help="train and write the trace CSV"))
    common(sub.add_parser("compare", help="federated vs centralized vs frozen-passive"), multi=True)
    p = sub.add_parser("speedup", help="wall time to target for several party counts")
    common(p)
    p.add_argument("--q-list", help="comma-separated party counts")
    p = sub.add_parser("audit", help="audit masked aggregation transcripts")
    common(p)
    p.add_argument("--simulate-collusion", action="store_true")
    p.add_argument("--unmask-debug", action="store_true")
    common(sub.add_parser("partition", help="print the feature partition"))
    return parser


def _config_from(path, args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = ExperimentConfig.from_mapping({**dataclasses.asdict(cfg), key: yaml.safe_load(value)})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.deterministic:
        cfg.threaded = False
    return cfg.validate()


def _parse_q_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --q-list {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            cfgs = [_config_from(p, args) for p in (args.config or [None])]
            return cmd_compare(cfgs)
        cfg = _config_from(args.config, args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "speedup":
            q_list = _parse_q_list(args.q_list) if args.q_list else list(cfg.q_list)
            return cmd_speedup(cfg, q_list)
        if args.command == "audit":
            return cmd_audit(cfg, args.simulate_collusion, args.unmask_debug)
        return cmd_partition(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, EmptyData, DimensionError, InvalidPartition, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonConvergence, NumericalError) as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except VFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
