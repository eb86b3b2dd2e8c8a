"""GPU persistent-memory hierarchy simulator with adaptive log-path selection."""

from .agpm import GpuType, LocalityMetrics, PathDecision, Reason, classify_reason, reason_to_path, size_report
from .config import SimConfig, load_config
from .engine import SimResult, simulate
from .harness import CrashReport, Report, RunConfig, RunStats, compare, crash_test, export, run
from .persist import check_atomicity, crash_at, recover, run_transaction
from .strategy import Strategy, StrategyKind, classify_type
from .synth import gen_synthetic
from .trace import Trace, parse_trace, read_trace, serialize, validate

__version__ = "0.1.0"

__all__ = [
    "CrashReport",
    "GpuType",
    "LocalityMetrics",
    "PathDecision",
    "Reason",
    "Report",
    "RunConfig",
    "RunStats",
    "SimConfig",
    "SimResult",
    "Strategy",
    "StrategyKind",
    "Trace",
    "check_atomicity",
    "classify_reason",
    "classify_type",
    "compare",
    "crash_at",
    "crash_test",
    "export",
    "gen_synthetic",
    "load_config",
    "parse_trace",
    "read_trace",
    "reason_to_path",
    "recover",
    "run",
    "run_transaction",
    "serialize",
    "simulate",
    "size_report",
    "validate",
]
