"""Path-selection strategies and the static-path type verdict."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

from .agpm import GpuType, PathDecision
from .trace import Op, Role, Target

T = PathDecision.TEMPORAL
NT = PathDecision.NON_TEMPORAL


class StrategyKind(str, enum.Enum):
    STATIC_TEMPORAL = "temporal"
    STATIC_NON_TEMPORAL = "nt"
    PM_SPEC = "pmspec"
    BUCL = "bucl"
    THEMIS = "themis"
    AGPM = "agpm"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        key = name.strip().lower()
        for kind in cls:
            if key in (kind.value, kind.label.lower()):
                return kind
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(k.value for k in cls)}")


_LABELS = {
    StrategyKind.STATIC_TEMPORAL: "StaticTemporal",
    StrategyKind.STATIC_NON_TEMPORAL: "StaticNonTemporal",
    StrategyKind.PM_SPEC: "PmSpec",
    StrategyKind.BUCL: "Bucl",
    StrategyKind.THEMIS: "ThemisSimplified",
    StrategyKind.AGPM: "Agpm",
}

ALL_STRATEGIES = tuple(StrategyKind)


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    bucl_threshold: int = 8

    def __post_init__(self):
        if self.bucl_threshold < 1:
            raise ValueError("Bucl threshold must be >= 1")

    @property
    def elides_fences(self) -> bool:
        return self.kind is StrategyKind.THEMIS

    @property
    def name(self) -> str:
        if self.kind is StrategyKind.BUCL:
            return f"Bucl({self.bucl_threshold})"
        return self.kind.label


@dataclass
class RequestContext:
    op: Op
    role: Role
    degree: int = 1
    target: Target = Target.PM
    mshr_full: bool = False
    # AGPM hook: returns the selector's decision for this log update
    agpm: Callable[[], PathDecision] | None = None


def decide(strategy: Strategy | StrategyKind, ctx: RequestContext) -> PathDecision:
    if isinstance(strategy, StrategyKind):
        strategy = Strategy(strategy)
    kind = strategy.kind
    if ctx.target is not Target.PM or ctx.op is Op.LOAD:
        return T
    if kind is StrategyKind.STATIC_TEMPORAL:
        return T
    if kind in (StrategyKind.STATIC_NON_TEMPORAL, StrategyKind.THEMIS):
        return NT if ctx.role is Role.LOG else T
    if kind is StrategyKind.PM_SPEC:
        return NT
    if kind is StrategyKind.BUCL:
        return NT if ctx.degree > strategy.bucl_threshold or ctx.mshr_full else T
    if kind is StrategyKind.AGPM:
        if ctx.role is not Role.LOG:
            return T
        if ctx.agpm is None:
            raise ValueError("Agpm decisions need a path selector")
        return ctx.agpm()
    raise ValueError(f"unknown strategy kind {kind!r}")


@dataclass(frozen=True)
class TypeVerdict:
    perf_t: float
    perf_nt: float
    diff: float
    gpu_type: GpuType


def classify_type(perf_t: float, perf_nt: float, margin: float = 0.05) -> TypeVerdict:
    """Lower normalized time is better; within ``margin`` points neither path wins.

    The margin test allows 1e-9 of float slack so 1.00 vs 1.05 counts as a tie.
    """
    if perf_t <= 0 or perf_nt <= 0:
        raise ValueError("normalized times must be positive")
    diff = abs(perf_t - perf_nt)
    if diff <= margin + 1e-9:
        kind = GpuType.III
    elif perf_t < perf_nt:
        kind = GpuType.I
    else:
        kind = GpuType.II
    return TypeVerdict(perf_t, perf_nt, diff, kind)
