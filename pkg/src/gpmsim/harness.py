"""Experiment plumbing: single runs, strategy sweeps, crash sweeps and report files.

Everything here is deterministic in (config, trace, seed).  Exports are
written with sorted keys and no timestamps so repeated runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .agpm import GpuType, LocalityMetrics
from .config import ConfigError, SimConfig, load_config
from .engine import BUCKETS, SimResult, simulate
from .persist import AtomicityChecker, UnrecoverableLog, crash_images, recover
from .strategy import Strategy, StrategyKind, TypeVerdict, classify_type
from .trace import Trace, read_trace, strip_persistency

log = logging.getLogger("gpmsim.harness")

SCHEMA_VERSION = 1
BASE = "base"

# RunStats CSV columns, in file order; bump SCHEMA_VERSION when this changes
STATS_COLUMNS = (
    "schema_version",
    "strategy",
    "total_cycles",
    "base_cycles",
    "normalized_time",
    "bytes_s2m",
    "bytes_m2s",
    "l1d_hits",
    "l1d_misses",
    "l2_hits",
    "l2_misses",
    *BUCKETS,
    "mem_instrs",
    "all_count",
    "log_count",
    "temporal_stores",
    "nt_stores",
    "fences",
    "fences_elided",
    "cwppr_mean",
    "periods",
    "seed",
    "error",
)

# options under RunConfig.agpm that map onto AgpmConfig fields
AGPM_OPTIONS = ("metric_formula", "warmup_logs", "sets", "counter_bits", "saturate", "initial_threshold",
                "min_threshold", "thrash_ratio")


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    config: SimConfig | str | Path | None = None
    strategy: str = "temporal"
    trace: Trace | str | Path | None = None
    seed: int = 0
    agpm: dict[str, Any] = field(default_factory=dict)
    bucl_threshold: int | None = None
    normalize: bool = True
    outputs: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        """Reject missing files and conflicting options before anything runs."""
        if self.trace is None:
            raise ConfigError("no trace given")
        for label, ref in (("trace", self.trace), ("config", self.config)):
            if isinstance(ref, (str, Path)) and not Path(ref).is_file():
                raise ConfigError(f"{label} file not found: {ref}")
        unknown = sorted(set(self.agpm) - set(AGPM_OPTIONS))
        if unknown:
            raise ConfigError(f"unknown agpm option(s): {', '.join(unknown)}")
        if self.strategy != BASE:
            StrategyKind.parse(self.strategy)
        if self.bucl_threshold is not None and self.bucl_threshold < 1:
            raise ConfigError("bucl_threshold must be >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def sim_config(self) -> SimConfig:
        cfg = self.config if isinstance(self.config, SimConfig) else load_config(self.config)
        if self.agpm:
            cfg = replace(cfg, agpm=replace(cfg.agpm, **self.agpm))
        if self.bucl_threshold is not None:
            cfg = replace(cfg, bucl_threshold=self.bucl_threshold)
        cfg.validate()
        return cfg

    def load_trace(self) -> Trace:
        return self.trace if isinstance(self.trace, Trace) else read_trace(self.trace)

    @property
    def trace_name(self) -> str:
        if isinstance(self.trace, Trace):
            return ",".join(k.name for k in self.trace.kernels)
        return Path(self.trace).name


# ---------------------------------------------------------------- results


@dataclass
class PeriodStats:
    kernel: int
    index: int
    threshold: int
    logs: int
    cwppr: float | None
    reasons: dict[str, int]
    paths: dict[str, int]


@dataclass
class RunStats:
    strategy: str
    total_cycles: int
    base_cycles: int | None
    normalized_time: float | None
    bytes_s2m: int
    bytes_m2s: int
    l1d_hits: int
    l1d_misses: int
    l2_hits: int
    l2_misses: int
    coalescing: dict[str, int]
    mem_instrs: int
    all_count: int
    log_count: int
    store_paths: dict[str, int]
    periods: list[PeriodStats] = field(default_factory=list)
    cwppr_mean: float | None = None
    fences: int = 0
    fences_elided: int = 0
    seed: int = 0

    @classmethod
    def from_result(cls, res: SimResult, base_cycles: int | None, seed: int = 0) -> RunStats:
        hits = res.hierarchy.hit_counts()
        periods = [
            PeriodStats(k, p.index, p.threshold, p.logs, p.cwppr, dict(sorted(p.reasons.items())),
                        dict(sorted(p.paths.items())))
            for k, recs in enumerate(res.periods)
            for p in recs
        ]
        return cls(
            strategy=res.strategy,
            total_cycles=res.cycles,
            base_cycles=base_cycles,
            normalized_time=normalized(res.cycles, base_cycles) if base_cycles is not None else None,
            bytes_s2m=res.hierarchy.bytes_s2m,
            bytes_m2s=res.hierarchy.bytes_m2s,
            l1d_hits=hits["l1d_hits"],
            l1d_misses=hits["l1d_misses"],
            l2_hits=hits["l2_hits"],
            l2_misses=hits["l2_misses"],
            coalescing={b: res.coalescing[b] for b in BUCKETS},
            mem_instrs=res.mem_instrs,
            all_count=res.all_count,
            log_count=res.log_count,
            store_paths=dict(sorted(res.store_paths.items())),
            periods=periods,
            cwppr_mean=res.cwppr_mean,
            fences=res.fences,
            fences_elided=res.fences_elided,
            seed=seed,
        )

    def row(self) -> dict[str, Any]:
        out = {
            "schema_version": SCHEMA_VERSION,
            "strategy": self.strategy,
            "total_cycles": self.total_cycles,
            "base_cycles": self.base_cycles,
            "normalized_time": self.normalized_time,
            "bytes_s2m": self.bytes_s2m,
            "bytes_m2s": self.bytes_m2s,
            "l1d_hits": self.l1d_hits,
            "l1d_misses": self.l1d_misses,
            "l2_hits": self.l2_hits,
            "l2_misses": self.l2_misses,
            "mem_instrs": self.mem_instrs,
            "all_count": self.all_count,
            "log_count": self.log_count,
            "temporal_stores": self.store_paths.get("Temporal", 0),
            "nt_stores": self.store_paths.get("NonTemporal", 0),
            "fences": self.fences,
            "fences_elided": self.fences_elided,
            "cwppr_mean": self.cwppr_mean,
            "periods": len(self.periods),
            "seed": self.seed,
            "error": "",
        }
        out.update(self.coalescing)
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunStats:
        d = dict(d)
        d["periods"] = [PeriodStats(**p) for p in d.get("periods", [])]
        return cls(**d)


def normalized(cycles: int, base_cycles: int) -> float:
    """Strategy time over base time; an empty base (0 cycles) only matches itself."""
    if base_cycles == 0:
        return 1.0 if cycles == 0 else float("inf")
    return cycles / base_cycles


@dataclass
class Report:
    trace: str
    strategies: list[str]
    stats: dict[str, RunStats]
    errors: dict[str, str]
    ranking: list[str]
    deltas: dict[str, float]
    verdict: TypeVerdict | None

    def to_dict(self) -> dict[str, Any]:
        verdict = None
        if self.verdict is not None:
            verdict = asdict(self.verdict)
            verdict["gpu_type"] = self.verdict.gpu_type.value
        return {
            "trace": self.trace,
            "strategies": list(self.strategies),
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
            "errors": dict(self.errors),
            "ranking": list(self.ranking),
            "deltas": dict(self.deltas),
            "verdict": verdict,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Report:
        v = d.get("verdict")
        verdict = None
        if v is not None:
            verdict = TypeVerdict(v["perf_t"], v["perf_nt"], v["diff"], GpuType(v["gpu_type"]))
        return cls(
            trace=d["trace"],
            strategies=list(d["strategies"]),
            stats={k: RunStats.from_dict(s) for k, s in d["stats"].items()},
            errors=dict(d["errors"]),
            ranking=list(d["ranking"]),
            deltas=dict(d["deltas"]),
            verdict=verdict,
        )


@dataclass
class CrashPoint:
    point: int
    ok: bool
    violations: list[dict] = field(default_factory=list)


@dataclass
class CrashReport:
    strategy: str
    records: int
    transactions: int
    seed: int
    points: list[CrashPoint]

    @property
    def passed(self) -> int:
        return sum(p.ok for p in self.points)

    @property
    def failed(self) -> int:
        return len(self.points) - self.passed

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["passed"] = self.passed
        d["failed"] = self.failed
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CrashReport:
        pts = [CrashPoint(**p) for p in d["points"]]
        return cls(d["strategy"], d["records"], d["transactions"], d["seed"], pts)


# ---------------------------------------------------------------- operations


def _strategy(name: str, cfg: SimConfig) -> Strategy:
    return Strategy(StrategyKind.parse(name), cfg.bucl_threshold)


def _base_cycles(trace: Trace, cfg: SimConfig, seed: int) -> int:
    return simulate(strip_persistency(trace), cfg, Strategy(StrategyKind.STATIC_TEMPORAL), seed=seed).cycles


def _run_loaded(trace: Trace, cfg: SimConfig, strategy: str, seed: int, base: int | None) -> RunStats:
    if strategy == BASE:
        res = simulate(strip_persistency(trace), cfg, Strategy(StrategyKind.STATIC_TEMPORAL), seed=seed)
        res.strategy = BASE
        return RunStats.from_result(res, res.cycles if base is not None else None, seed)
    res = simulate(trace, cfg, _strategy(strategy, cfg), seed=seed)
    return RunStats.from_result(res, base, seed)


def run(config: RunConfig) -> RunStats:
    """Simulate one strategy; with ``normalize`` also the stripped base run."""
    config.check()
    cfg = config.sim_config()
    trace = config.load_trace()
    base = None
    if config.normalize and config.strategy != BASE:
        base = _base_cycles(trace, cfg, config.seed)
    elif config.normalize:
        base = 0  # placeholder; the base run normalizes against itself
    log.info("run %s on %s (seed %d)", config.strategy, config.trace_name, config.seed)
    return _run_loaded(trace, cfg, config.strategy, config.seed, base)


def compare(config: RunConfig, strategies: Sequence[str]) -> Report:
    """Run each strategy over the same trace; one failure does not stop the rest."""
    names = [s.strip() for s in strategies if s.strip()]
    if len(names) < 2:
        raise HarnessError("need ≥2 strategies to compare")
    config.check()
    cfg = config.sim_config()
    trace = config.load_trace()
    base = _base_cycles(trace, cfg, config.seed) if config.normalize else None
    stats: dict[str, RunStats] = {}
    errors: dict[str, str] = {}
    for name in names:
        try:
            stats[name] = _run_loaded(trace, cfg, name, config.seed, base if name != BASE else 0)
        except Exception as exc:  # reported per strategy
            log.warning("strategy %s failed: %s", name, exc)
            errors[name] = f"{type(exc).__name__}: {exc}"

    def score(name: str) -> float:
        s = stats[name]
        return s.normalized_time if s.normalized_time is not None else float(s.total_cycles)

    ranking = sorted(stats, key=lambda n: (score(n), n))
    deltas = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if a in stats and b in stats:
                deltas[f"{a}-{b}"] = score(a) - score(b)
    verdict = None
    kinds = {}
    for name in stats:
        if name != BASE:
            kinds.setdefault(StrategyKind.parse(name), name)
    t, nt = kinds.get(StrategyKind.STATIC_TEMPORAL), kinds.get(StrategyKind.STATIC_NON_TEMPORAL)
    if t is not None and nt is not None and score(t) > 0 and score(nt) > 0:
        verdict = classify_type(score(t), score(nt))
    return Report(config.trace_name, names, stats, errors, ranking, deltas, verdict)


def sample_points(n_records: int, n_points: int, seed: int) -> list[int]:
    """``n_points`` distinct uniform crash indices in [0, n_records] plus both endpoints, ascending.

    When the trace has fewer than ``n_points`` + 1 indices every index is used.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    population = range(n_records + 1)
    if n_points >= len(population):
        return list(population)
    pts = set(random.Random(seed).sample(population, n_points))
    pts.update((0, n_records))
    return sorted(pts)


def crash_test(config: RunConfig, n_points: int = 1000, seed: int = 0, *, data_first: bool = False) -> CrashReport:
    """Crash the run at sampled persist indices and check all-or-nothing recovery.

    ``data_first`` swaps in the test-only mutant that persists data ahead of
    its log; it exists to show the checker catches real ordering bugs.
    """
    config.check()
    if config.strategy == BASE:
        raise ConfigError("the base run has no persistency to test")
    cfg = config.sim_config()
    trace = config.load_trace()
    res = simulate(trace, cfg, _strategy(config.strategy, cfg), seed=config.seed, data_first=data_first)
    pt = res.persist
    checker = AtomicityChecker(pt.pre, res.layouts)
    points = []
    for p, image in crash_images(pt, sample_points(len(pt), n_points, seed)):
        try:
            rep = checker.check(recover(image, res.layouts))
            points.append(CrashPoint(p, rep.ok, rep.violations))
        except UnrecoverableLog as exc:
            points.append(CrashPoint(p, False, [{"unrecoverable": str(exc)}]))
    report = CrashReport(res.strategy, len(pt), len(res.layouts), seed, points)
    log.info("crash-test %s: %d/%d points pass", res.strategy, report.passed, len(points))
    return report


def characterize(trace: Trace, cfg: SimConfig | None = None, seed: int = 0) -> list[LocalityMetrics]:
    """Whole-kernel locality metrics (no period flushes), one row per kernel."""
    res = simulate(trace, cfg or SimConfig(), "temporal", seed=seed, track_locality=True, periods=False)
    return [m for m in res.metrics if m is not None]


# ---------------------------------------------------------------- export


def _csv_text(rows: Iterable[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r.get(k) is None else r.get(k) for k in STATS_COLUMNS})
    return buf.getvalue()


def _json_doc(obj) -> dict[str, Any]:
    if isinstance(obj, RunStats):
        return {"schema": "gpmsim.run_stats", "version": SCHEMA_VERSION, "stats": obj.to_dict()}
    if isinstance(obj, Report):
        return {"schema": "gpmsim.report", "version": SCHEMA_VERSION, "report": obj.to_dict()}
    if isinstance(obj, CrashReport):
        return {"schema": "gpmsim.crash_report", "version": SCHEMA_VERSION, "crash": obj.to_dict()}
    raise TypeError(f"cannot export {type(obj).__name__}")


def render(obj, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(_json_doc(obj), sort_keys=True, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    if isinstance(obj, RunStats):
        return _csv_text([obj.row()])
    if isinstance(obj, Report):
        rows = [obj.stats[n].row() if n in obj.stats else
                {"schema_version": SCHEMA_VERSION, "strategy": n, "error": obj.errors.get(n, "")}
                for n in obj.strategies]
        return _csv_text(rows)
    raise TypeError(f"no CSV layout for {type(obj).__name__}")


def export(obj, fmt: str, path: str | Path) -> Path:
    path = Path(path)
    text = render(obj, fmt)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc
    return path


def load_json(path: str | Path):
    """Read back anything written by ``export(..., "json", ...)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise HarnessError(f"cannot read {path}: {exc}") from exc
    if doc.get("version") != SCHEMA_VERSION:
        raise HarnessError(f"{path}: unsupported schema version {doc.get('version')!r}")
    kind = doc.get("schema")
    if kind == "gpmsim.run_stats":
        return RunStats.from_dict(doc["stats"])
    if kind == "gpmsim.report":
        return Report.from_dict(doc["report"])
    if kind == "gpmsim.crash_report":
        return CrashReport.from_dict(doc["crash"])
    raise HarnessError(f"{path}: unknown schema {kind!r}")
