"""Experiment orchestration: config files, per-run round logs, aggregation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Dataset, from_multiclass, gen_synthetic, load_dataset, load_idx
from .errors import ConfigurationError, DataError
from .solvers import SOLVERS, PolicyConfig, RoundRecord, make_policy, run_policy

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("seed", "solver", "t", "chosen_arm", "reward", "cumulative_reward", "max_ucb_score", "retrained")
SUMMARY_COLUMNS = ("solver", "mean_cumulative", "std_cumulative", "rank_first_count", "percent_gain_vs_second")
DATASET_KINDS = ("idx", "binary", "synthetic")

# config key -> (PolicyConfig field, parser)
_POLICY_KEYS = {
    "alpha": ("alpha", float),
    "lambda": ("lam", float),
    "beta": ("beta", int),
    "mu": ("mu", float),
    "epochs": ("epochs", int),
    "optimizer": ("optimizer", str),
    "learning_rate": ("learning_rate", float),
    "repr_dim": ("repr_dim", int),
    "batch_size": ("batch_size", int),
    "warm_start": ("warm_start", None),
    "conv_filters": ("conv_filters", None),
}
_OTHER_KEYS = {
    "dataset.kind",
    "dataset.images",
    "dataset.labels",
    "dataset.synthetic.classes",
    "dataset.synthetic.per_class",
    "dataset.synthetic.size",
    "dataset.synthetic.noise",
    "dataset.synthetic.seed",
    "dataset.synthetic.channels",
    "solvers",
    "seeds",
    "horizon",
    "output_dir",
    "parallelism",
    "resume",
}
CONFIG_KEYS = frozenset(_POLICY_KEYS) | _OTHER_KEYS


def fmt_float(x: float) -> str:
    return f"{x:.9g}"


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def _parse_int_list(key, text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: expected comma-separated integers, got {text!r}") from None


def parse_kv(text: str, allowed=None) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Duplicate or unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _typed(key, text, parser):
    try:
        return parser(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None


def _policy_overrides(pairs: dict[str, str]) -> dict:
    kw = {}
    for key, text in pairs.items():
        if key not in _POLICY_KEYS:
            raise ConfigurationError(f"{key!r} is not a policy setting")
        name, parser = _POLICY_KEYS[key]
        if key == "warm_start":
            kw[name] = _parse_bool(key, text)
        elif key == "conv_filters":
            kw[name] = _parse_int_list(key, text)
        else:
            kw[name] = _typed(key, text, parser)
    return kw


@dataclass(frozen=True)
class SolverSpec:
    """A solver kind plus optional policy overrides, written ``kind`` or ``kind:key=value:key=value``."""

    kind: str
    overrides: tuple[tuple[str, str], ...] = ()

    @classmethod
    def parse(cls, text: str) -> SolverSpec:
        kind, *rest = text.strip().split(":")
        if kind not in SOLVERS:
            raise ConfigurationError(f"unknown solver {kind!r}; choose from {', '.join(SOLVERS)}")
        pairs = []
        for item in rest:
            if "=" not in item:
                raise ConfigurationError(f"solver override {item!r} must look like key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            pairs.append((k, v))
        _policy_overrides(dict(pairs))
        return cls(kind, tuple(pairs))

    @property
    def label(self) -> str:
        return ":".join([self.kind] + [f"{k}={v}" for k, v in self.overrides])

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9_.-]+", "_", self.label)

    def policy(self, base: PolicyConfig) -> PolicyConfig:
        return base.with_overrides(**_policy_overrides(dict(self.overrides)))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    images: Path | None = None
    labels: Path | None = None
    classes: int = 10
    per_class: int = 100
    size: int = 28
    noise: float = 0.1
    seed: int = 0
    channels: int = 1

    def load(self) -> Dataset:
        if self.kind == "idx":
            return load_idx(self.images, self.labels)
        if self.kind == "binary":
            return load_dataset(self.images)
        return gen_synthetic(self.classes, self.per_class, self.size, self.noise, self.seed, self.channels)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    solvers: tuple[SolverSpec, ...]
    seeds: tuple[int, ...]
    horizon: int
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    output_dir: Path = Path("results")
    parallelism: int = 1
    resume: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        if not self.solvers:
            raise ConfigurationError("solvers must be nonempty")
        if len({s.label for s in self.solvers}) != len(self.solvers):
            raise ConfigurationError("solver entries must be distinct")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be positive")
        if self.parallelism < 1:
            raise ConfigurationError("parallelism must be >= 1")

    @classmethod
    def from_text(cls, text: str, base_dir: Path | str = ".") -> ExperimentConfig:
        kv = parse_kv(text, CONFIG_KEYS)
        base_dir = Path(base_dir)

        def path(key):
            if key not in kv:
                return None
            p = Path(kv[key])
            return p if p.is_absolute() else base_dir / p

        for key in ("dataset.kind", "solvers", "seeds", "horizon"):
            if key not in kv:
                raise ConfigurationError(f"missing required key {key!r}")
        kind = kv["dataset.kind"]
        if kind not in DATASET_KINDS:
            raise ConfigurationError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
        need = {"idx": ("dataset.images", "dataset.labels"), "binary": ("dataset.images",), "synthetic": ()}[kind]
        for key in need:
            if key not in kv:
                raise ConfigurationError(f"dataset.kind = {kind} requires {key!r}")
        syn = {}
        for key, parser in (("classes", int), ("per_class", int), ("size", int), ("noise", float),
                            ("seed", int), ("channels", int)):
            full = f"dataset.synthetic.{key}"
            if full in kv:
                syn[key] = _typed(full, kv[full], parser)
        dataset = DatasetSpec(kind, path("dataset.images"), path("dataset.labels"), **syn)
        policy = PolicyConfig(**_policy_overrides({k: v for k, v in kv.items() if k in _POLICY_KEYS}))
        return cls(
            dataset=dataset,
            solvers=tuple(SolverSpec.parse(s) for s in kv["solvers"].split(",") if s.strip()),
            seeds=_parse_int_list("seeds", kv["seeds"]),
            horizon=_typed("horizon", kv["horizon"], int),
            policy=policy,
            output_dir=path("output_dir") or base_dir / "results",
            parallelism=_typed("parallelism", kv.get("parallelism", "1"), int),
            resume=_parse_bool("resume", kv.get("resume", "false")),
        )

    @classmethod
    def from_file(cls, path) -> ExperimentConfig:
        path = Path(path)
        return cls.from_text(path.read_text(), path.parent)

    def log_path(self, solver: SolverSpec, seed: int) -> Path:
        return self.output_dir / f"rounds_{solver.slug}_seed{seed}.csv"


# -- round logs --------------------------------------------------------------------


def format_round_log(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for r in records:
        w.writerow([r.seed, r.solver, r.t, r.chosen_arm, r.reward, r.cumulative_reward,
                    fmt_float(r.max_ucb_score), int(r.retrained)])
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


@dataclass
class RoundLog:
    path: Path
    seed: int
    solver: str
    arms: np.ndarray
    rewards: np.ndarray
    final: int


def read_round_log(path) -> RoundLog:
    """Parse one round log and check its integrity (header, t sequence, running total)."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != ROUND_COLUMNS:
        raise DataError(f"{path}: header must be {','.join(ROUND_COLUMNS)}")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no rounds")
    try:
        seeds = {int(r[0]) for r in body}
        solvers = {r[1] for r in body}
        t = np.array([int(r[2]) for r in body])
        arms = np.array([int(r[3]) for r in body])
        rewards = np.array([int(r[4]) for r in body])
        cum = np.array([int(r[5]) for r in body])
        for r in body:
            float(r[6])
            if r[7] not in ("0", "1"):
                raise ValueError(r[7])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    if len(seeds) != 1 or len(solvers) != 1:
        raise DataError(f"{path}: a log must hold exactly one (solver, seed) run")
    if not np.array_equal(t, np.arange(len(body))):
        raise DataError(f"{path}: t must run 0, 1, 2, ... without gaps")
    if not np.isin(rewards, (0, 1)).all():
        raise DataError(f"{path}: rewards must be 0 or 1")
    if not np.array_equal(cum, np.cumsum(rewards)):
        bad = int(np.argmax(cum != np.cumsum(rewards)))
        raise DataError(f"{path}: cumulative_reward inconsistent at t={bad}")
    return RoundLog(path, seeds.pop(), solvers.pop(), arms, rewards, int(cum[-1]))


# -- running ---------------------------------------------------------------------

_DATASET_CACHE: dict[DatasetSpec, Dataset] = {}


def _dataset(spec: DatasetSpec) -> Dataset:
    if spec not in _DATASET_CACHE:
        _DATASET_CACHE.clear()
        _DATASET_CACHE[spec] = spec.load()
    return _DATASET_CACHE[spec]


def run_one(config: ExperimentConfig, solver: SolverSpec, seed: int) -> Path:
    """Play one (solver, seed) run and write its round log atomically."""
    data = _dataset(config.dataset)
    env = from_multiclass(data, seed)
    state = make_policy(solver.kind, solver.policy(config.policy), env.num_arms, data.image_shape, seed, solver.label)
    records = run_policy(env, state, config.horizon)
    out = config.log_path(solver, seed)
    atomic_write(out, format_round_log(records))
    log.info("%s seed %d: cumulative reward %d", solver.label, seed, records[-1].cumulative_reward)
    return out


def _run_job(args):
    return run_one(*args)


def _completed(config, solver, seed) -> bool:
    path = config.log_path(solver, seed)
    if not path.exists():
        return False
    try:
        done = read_round_log(path)
    except DataError:
        return False
    return len(done.arms) == config.horizon and done.solver == solver.label and done.seed == seed


def prepare(config: ExperimentConfig) -> Dataset:
    """Every check that can fail before a run starts: dataset readable, horizon feasible, output writable."""
    data = _dataset(config.dataset)
    if config.horizon < data.num_classes:
        raise ConfigurationError(f"horizon {config.horizon} is below the arm count {data.num_classes}")
    if config.horizon > len(data):
        raise ConfigurationError(f"horizon {config.horizon} exceeds the {len(data)} examples available")
    config.output_dir.mkdir(parents=True, exist_ok=True)
    probe = config.output_dir / ".write-probe"
    probe.write_text("")
    probe.unlink()
    return data


def run_experiment(config: ExperimentConfig) -> RunSummary:
    prepare(config)
    jobs = [(config, s, seed) for s in config.solvers for seed in config.seeds]
    if config.resume:
        jobs = [j for j in jobs if not _completed(*j)]
    log.info("%d runs to play, parallelism %d", len(jobs), config.parallelism)
    if config.parallelism == 1 or len(jobs) <= 1:
        for job in jobs:
            _run_job(job)
    else:
        with ProcessPoolExecutor(max_workers=min(config.parallelism, len(jobs))) as pool:
            list(pool.map(_run_job, jobs))
    paths = [config.log_path(s, seed) for s in config.solvers for seed in config.seeds]
    summary = aggregate(paths)
    write_summary(summary, config.output_dir / "summary.csv")
    return summary


# -- aggregation -----------------------------------------------------------------


@dataclass
class RunSummary:
    solvers: list[str]
    seeds: list[int]
    finals: dict[str, list[int]]
    mean: dict[str, float]
    std: dict[str, float]
    rank_counts: dict[str, int]
    percent_gain: float | None
    best: str | None = None
    second: str | None = None


def _solver_order(labels):
    def key(label):
        kind = label.split(":", 1)[0]
        return (SOLVERS.index(kind) if kind in SOLVERS else len(SOLVERS), label)

    return sorted(labels, key=key)


def percent_gain(best: float, second: float) -> float:
    return 100.0 * (best - second) / second


def summarize(finals: dict[str, list[float]], seeds: list[int]) -> RunSummary:
    """Means, sample stds, first-place counts (ties credit every tied solver), best-over-second gain."""
    if not finals:
        raise DataError("nothing to summarize")
    solvers = _solver_order(finals)
    table = np.array([finals[s] for s in solvers], dtype=np.float64)
    mean = {s: float(table[i].mean()) for i, s in enumerate(solvers)}
    std = {s: float(table[i].std(ddof=1)) if table.shape[1] > 1 else math.nan for i, s in enumerate(solvers)}
    top = table.max(axis=0)
    ranks = {s: int((table[i] == top).sum()) for i, s in enumerate(solvers)}
    gain = best = second = None
    if len(solvers) > 1:
        order = sorted(solvers, key=lambda s: -mean[s])
        best, second = order[0], order[1]
        gain = percent_gain(mean[best], mean[second])
    return RunSummary(solvers, list(seeds), {s: list(finals[s]) for s in solvers}, mean, std, ranks, gain, best, second)


def _log_files(source) -> list[Path]:
    if isinstance(source, (str, Path)):
        source = Path(source)
        if not source.is_dir():
            raise FileNotFoundError(f"{source} is not a directory")
        return sorted(source.glob("rounds_*.csv"))
    return [Path(p) for p in source]


def aggregate(source) -> RunSummary:
    """Summarize a directory (or list) of round logs covering a full solver x seed grid."""
    logs = [read_round_log(p) for p in _log_files(source)]
    if not logs:
        raise DataError("no round logs found")
    cells = {}
    for lg in logs:
        if (lg.solver, lg.seed) in cells:
            raise DataError(f"duplicate run for solver {lg.solver} seed {lg.seed}")
        cells[(lg.solver, lg.seed)] = lg
    lengths = {len(lg.arms) for lg in logs}
    if len(lengths) != 1:
        raise DataError(f"round logs disagree on horizon: {sorted(lengths)}")
    solvers = _solver_order({s for s, _ in cells})
    seeds = sorted({seed for _, seed in cells})
    missing = [f"{s}/seed{seed}" for s in solvers for seed in seeds if (s, seed) not in cells]
    if missing:
        raise DataError("ragged solver x seed grid; missing " + ", ".join(missing))
    return summarize({s: [cells[(s, seed)].final for seed in seeds] for s in solvers}, seeds)


def summary_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary.solvers:
        std = "" if math.isnan(summary.std[s]) else fmt_float(summary.std[s])
        gain = fmt_float(summary.percent_gain) if s == summary.best and summary.percent_gain is not None else ""
        w.writerow([s, fmt_float(summary.mean[s]), std, summary.rank_counts[s], gain])
    return buf.getvalue()


def write_summary(summary: RunSummary, path) -> None:
    path = Path(path)
    atomic_write(path, summary_csv(summary))
    details = {
        "seeds": summary.seeds,
        "finals": summary.finals,
        "best": summary.best,
        "second": summary.second,
        "percent_gain_vs_second": summary.percent_gain,
    }
    atomic_write(path.with_suffix(".json"), json.dumps(details, indent=2, sort_keys=True) + "\n")


@dataclass
class SummaryRow:
    solver: str
    mean: float
    std: float | None
    rank_first: int
    gain: float | None


def read_summary(path) -> list[SummaryRow]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != SUMMARY_COLUMNS:
        raise DataError(f"{path}: header must be {','.join(SUMMARY_COLUMNS)}")
    out = []
    try:
        for r in rows[1:]:
            out.append(SummaryRow(r[0], float(r[1]), float(r[2]) if r[2] else None, int(r[3]),
                                  float(r[4]) if r[4] else None))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed summary row ({exc})") from None
    return out


def report(rows: list[SummaryRow]) -> str:
    """Mean (std), first-place counts and best-over-second gain as aligned text tables."""
    if not rows:
        raise DataError("summary is empty")
    width = max(len("solver"), *(len(r.solver) for r in rows))
    lines = ["Mean cumulative reward", f"{'solver':<{width}}  mean (std)"]
    for r in rows:
        std = "n/a" if r.std is None else f"{r.std:.2f}"
        lines.append(f"{r.solver:<{width}}  {r.mean:.1f} (±{std})")
    lines += ["", "Times ranked first", f"{'solver':<{width}}  count"]
    lines += [f"{r.solver:<{width}}  {r.rank_first}" for r in rows]
    gains = [r for r in rows if r.gain is not None]
    lines += ["", "Percent gain of best over second best"]
    lines.append(f"{gains[0].solver}: {gains[0].gain:.2f}%" if gains else "n/a (single solver)")
    return "\n".join(lines) + "\n"


# -- synthetic generation ------------------------------------------------------------

SYNTHETIC_KEYS = frozenset({"classes", "per_class", "size", "noise", "seed", "channels"})


def synthetic_from_text(text: str) -> Dataset:
    kv = parse_kv(text, SYNTHETIC_KEYS)
    for key in ("classes", "per_class", "size", "noise"):
        if key not in kv:
            raise ConfigurationError(f"missing required key {key!r}")
    return gen_synthetic(
        _typed("classes", kv["classes"], int),
        _typed("per_class", kv["per_class"], int),
        _typed("size", kv["size"], int),
        _typed("noise", kv["noise"], float),
        _typed("seed", kv.get("seed", "0"), int),
        _typed("channels", kv.get("channels", "1"), int),
    )
