"""Adaptive log-path selection.

Two counter buffers (one fed by L1D-level hits, one by L2-level hits) keep
per-byte and per-block reference counts for recently touched PM blocks.
Each set holds one entry per role: ``all`` tracks every PM request, ``log``
only log updates.  Entries displaced by a set conflict move to a reservation
buffer in device memory and come back on the next touch, so the counts are
never lost within a period.

Metric sums are maintained incrementally; :func:`compute_metrics` can
recompute them from scratch and the two must agree.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields

from .config import AgpmConfig
from .trace import mask_offsets

ALL = 0
LOG = 1


class Reason(str, enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"
    E = "e"
    F = "f"
    G = "g"
    H = "h"


class GpuType(str, enum.Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"


class PathDecision(str, enum.Enum):
    TEMPORAL = "Temporal"
    NON_TEMPORAL = "NonTemporal"


REASON_PATH = {
    Reason.A: PathDecision.TEMPORAL,
    Reason.C: PathDecision.TEMPORAL,
    Reason.D: PathDecision.TEMPORAL,
    Reason.G: PathDecision.TEMPORAL,
    Reason.B: PathDecision.NON_TEMPORAL,
    Reason.E: PathDecision.NON_TEMPORAL,
    Reason.F: PathDecision.NON_TEMPORAL,
    Reason.H: PathDecision.NON_TEMPORAL,
}

REASON_TYPE = {
    Reason.A: GpuType.I,
    Reason.C: GpuType.I,
    Reason.D: GpuType.I,
    Reason.G: GpuType.I,
    Reason.B: GpuType.II,
    Reason.H: GpuType.II,
    Reason.E: GpuType.III,
    Reason.F: GpuType.III,  # II or III in practice; reported as III
}


def reason_to_path(r: Reason) -> PathDecision:
    return REASON_PATH[Reason(r)]


def reason_to_type(r: Reason) -> GpuType:
    return REASON_TYPE[Reason(r)]


@dataclass(frozen=True)
class LocalityMetrics:
    l1d_t_all: int = 0
    l1d_t_log: int = 0
    l1d_s_all: int = 0
    l1d_s_log: int = 0
    l2_t_all: int = 0
    l2_t_log: int = 0
    l2_s_all: int = 0
    l2_s_log: int = 0
    all: int = 0
    log: int = 0

    FIELDS = ()  # filled below

    def l1d(self) -> tuple[int, int, int, int]:
        return (self.l1d_t_all, self.l1d_t_log, self.l1d_s_all, self.l1d_s_log)

    def l2(self) -> tuple[int, int, int, int]:
        return (self.l2_t_all, self.l2_t_log, self.l2_s_all, self.l2_s_log)

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


LocalityMetrics.FIELDS = tuple(f.name for f in fields(LocalityMetrics))


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.inf if num else 0.0


def classify_reason(m: LocalityMetrics, uses_shared_memory: bool, thrash_ratio: float = 0.25) -> Reason:
    """First matching predicate in the order h, e, f, c, a, g, b, d; f if none match."""
    l1 = m.l1d()
    l2 = m.l2()
    if uses_shared_memory:
        return Reason.H
    if m.log <= 100:
        return Reason.E
    if not any(l1) and not any(l2):
        return Reason.F
    if not any(l1) and all(l2):
        return Reason.C
    if m.l1d_t_all and m.l1d_s_all and not m.l1d_t_log and not m.l1d_s_log:
        return Reason.A
    if not m.l1d_t_all and m.l1d_s_all and not m.l1d_t_log and m.l1d_s_log:
        return Reason.G
    if all(l1):
        worst = max(_ratio(m.l1d_t_log, m.l1d_t_all), _ratio(m.l1d_s_log, m.l1d_s_all))
        return Reason.B if worst > thrash_ratio else Reason.D
    return Reason.F


# ---------------------------------------------------------------- counters


def _rehit(c: int) -> int:
    return c - 1 if c > 1 else 0


def _literal(c: int) -> int:
    return c if c > 1 else 0


_FORMULAS = {"rehit": _rehit, "literal": _literal}


class AgpmEntry:
    __slots__ = ("tag", "counters", "block_counter", "mark", "t_sum", "b_sum")

    def __init__(self, tag: int, block_bytes: int = 128):
        self.tag = tag
        self.counters = [0] * block_bytes
        self.block_counter = 0
        # bit 0: last path was temporal; bits 1..4 reserved
        self.mark = 0
        self.t_sum = 0
        self.b_sum = 0


class ReservationBuffer:
    """Entries displaced from the buffer, keyed by (role, block)."""

    def __init__(self) -> None:
        self.entries: dict[tuple[int, int], AgpmEntry] = {}
        self.spills = 0
        self.refills = 0

    def put(self, role: int, entry: AgpmEntry) -> None:
        self.entries[(role, entry.tag)] = entry
        self.spills += 1

    def take(self, role: int, block: int) -> AgpmEntry | None:
        e = self.entries.pop((role, block), None)
        if e is not None:
            self.refills += 1
        return e

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class AgpmBuffer:
    """Set-indexed sketch with one ``all`` way and one ``log`` way per set."""

    def __init__(self, level: int, cfg: AgpmConfig | None = None):
        self.level = level
        self.cfg = cfg or AgpmConfig()
        self.sets = self.cfg.sets
        self.block_bytes = self.cfg.block_bytes
        self.cap = self.cfg.counter_max
        self.score = _FORMULAS[self.cfg.metric_formula]
        self.ways: list[list[AgpmEntry | None]] = [[None] * self.sets, [None] * self.sets]
        self.reserve = ReservationBuffer()
        # running (temporal, block) metric sums per role over resident + reserved entries
        self.t_total = [0, 0]
        self.b_total = [0, 0]

    def set_index(self, block: int) -> int:
        return (block // self.block_bytes) % self.sets

    def entry(self, role: int, block: int, create: bool = False) -> AgpmEntry | None:
        idx = self.set_index(block)
        resident = self.ways[role][idx]
        if resident is not None and resident.tag == block:
            return resident
        found = self.reserve.take(role, block)
        if found is None and not create:
            return None
        if found is None:
            found = AgpmEntry(block, self.block_bytes)
        if resident is not None:
            self.reserve.put(role, resident)
        self.ways[role][idx] = found
        return found

    def peek(self, role: int, block: int) -> AgpmEntry | None:
        resident = self.ways[role][self.set_index(block)]
        if resident is not None and resident.tag == block:
            return resident
        return self.reserve.entries.get((role, block))

    def _bump(self, role: int, e: AgpmEntry, offsets, hit: bool) -> None:
        cap = self.cap
        score = self.score
        counters = e.counters
        dt = 0
        for off in offsets:
            c = counters[off]
            if hit and c == 0:
                continue
            if cap is not None and c >= cap:
                continue
            counters[off] = c + 1
            dt += score(c + 1) - score(c)
        bc = e.block_counter
        if cap is None or bc < cap:
            e.block_counter = bc + 1
            db = score(bc + 1) - score(bc)
            e.b_sum += db
            self.b_total[role] += db
        e.t_sum += dt
        self.t_total[role] += dt

    def record_new_pm_request(self, block: int, offsets, is_log: bool) -> None:
        """Install (or refill) entries and count the first reference."""
        roles = (ALL, LOG) if is_log else (ALL,)
        for role in roles:
            e = self.entry(role, block, create=True)
            self._bump(role, e, offsets, hit=False)

    def notify_hit(self, block: int, offsets, is_pm: bool, is_log: bool) -> None:
        roles = (ALL, LOG) if is_log else (ALL,)
        for role in roles:
            e = self.entry(role, block, create=False)
            if e is None:
                if is_pm:
                    self._bump(role, self.entry(role, block, create=True), offsets, hit=False)
                continue
            self._bump(role, e, offsets, hit=True)

    def observe(self, block: int, offsets, hit: bool, is_pm: bool, is_log: bool) -> None:
        """Route one cache-level event: hits go to notify_hit, PM misses to record_new_pm_request."""
        if hit:
            self.notify_hit(block, offsets, is_pm, is_log)
            return
        if not is_pm:
            return
        roles = (ALL, LOG) if is_log else (ALL,)
        for role in roles:
            if self.peek(role, block) is None:
                self._bump(role, self.entry(role, block, create=True), offsets, hit=False)

    def totals(self, role: int) -> tuple[int, int]:
        """(temporal, spatial) metric for a role."""
        t = self.t_total[role]
        return t, t + self.b_total[role]

    def entries(self, role: int):
        for e in self.ways[role]:
            if e is not None:
                yield e
        for (r, _), e in self.reserve.entries.items():
            if r == role:
                yield e

    def clear(self) -> None:
        self.ways = [[None] * self.sets, [None] * self.sets]
        self.reserve.clear()
        self.t_total = [0, 0]
        self.b_total = [0, 0]


def compute_metrics(l1: AgpmBuffer, l2: AgpmBuffer, all_count: int, log_count: int) -> LocalityMetrics:
    """Recompute every metric from the counters (resident and reserved entries)."""
    vals = {}
    for name, buf in (("l1d", l1), ("l2", l2)):
        score = buf.score
        for role, suffix in ((ALL, "all"), (LOG, "log")):
            t = b = 0
            for e in buf.entries(role):
                t += sum(score(c) for c in e.counters if c)
                b += score(e.block_counter)
            vals[f"{name}_t_{suffix}"] = t
            vals[f"{name}_s_{suffix}"] = t + b
    return LocalityMetrics(**vals, all=all_count, log=log_count)


# ---------------------------------------------------------------- periods


def update_threshold(threshold: int, cwppr_prev: float | None, cwppr_sampling: float | None,
                     minimum: int = 100) -> int:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if cwppr_prev is None or cwppr_sampling is None:
        return threshold
    factor = 1.1 if cwppr_sampling > cwppr_prev else 0.9
    return max(minimum, int(math.floor(threshold * factor + 0.5)))


def cwppr_sample(waits: list[int] | tuple[int, ...], previous: float | None = None) -> float | None:
    if not waits:
        return previous
    return sum(waits) / len(waits)


@dataclass
class PeriodRecord:
    index: int
    threshold: int
    logs: int
    cwppr: float | None
    reasons: dict[str, int]
    paths: dict[str, int]


@dataclass
class PeriodState:
    threshold: int = 10000
    log_count_this_period: int = 0
    cwppr_prev: float | None = None
    cwppr_current: float | None = None
    period_index: int = 0
    wait_total: int = 0
    wait_count: int = 0
    reasons: dict[str, int] = field(default_factory=dict)
    paths: dict[str, int] = field(default_factory=dict)


def size_report(cfg: AgpmConfig | None = None, buffers: int = 2) -> dict[str, float]:
    cfg = cfg or AgpmConfig()
    bits = cfg.tag_bits + (cfg.block_bytes + 2) * cfg.counter_bits
    entries = cfg.sets * 2
    per_buffer = entries * math.ceil(bits / 8)
    return {
        "bits_per_entry": bits,
        "entries_per_buffer": entries,
        "bytes_per_buffer": per_buffer,
        "kb_per_buffer": per_buffer / 1024,
        "total_bytes": per_buffer * buffers,
        "total_kb": per_buffer * buffers / 1024,
    }


class PathSelector:
    """Per-kernel AGPM state: both buffers, running totals and the period controller."""

    def __init__(self, cfg: AgpmConfig | None = None, *, uses_shared_memory: bool = False,
                 expected_logs: int | None = None):
        self.cfg = cfg or AgpmConfig()
        self.l1 = AgpmBuffer(1, self.cfg)
        self.l2 = AgpmBuffer(2, self.cfg)
        self.uses_shared_memory = uses_shared_memory
        start = self.cfg.initial_threshold
        if expected_logs:
            start = min(start, expected_logs)
        self.state = PeriodState(threshold=max(self.cfg.min_threshold, start))
        self.all_count = 0
        self.log_count = 0
        self.marks: dict[int, bool] = {}
        self.history: list[PeriodRecord] = []

    # locality feed ---------------------------------------------------

    def sink(self, level: int, block: int, mask: int, hit: bool, is_pm: bool, is_log: bool) -> None:
        buf = self.l1 if level == 1 else self.l2
        buf.observe(block, mask_offsets(mask), hit, is_pm, is_log)

    def count_request(self, is_log: bool) -> None:
        self.all_count += 1
        if is_log:
            self.log_count += 1

    def on_pm_complete(self, issued: int, done: int) -> None:
        self.state.wait_total += done - issued
        self.state.wait_count += 1

    # decisions -------------------------------------------------------

    def metrics(self) -> LocalityMetrics:
        l1t, l1s = self.l1.totals(ALL)
        l1tl, l1sl = self.l1.totals(LOG)
        l2t, l2s = self.l2.totals(ALL)
        l2tl, l2sl = self.l2.totals(LOG)
        return LocalityMetrics(l1t, l1tl, l1s, l1sl, l2t, l2tl, l2s, l2sl, self.all_count, self.log_count)

    def in_warmup(self) -> bool:
        return self.state.period_index == 0 and self.log_count <= self.cfg.warmup_logs

    def select_path(self, block: int) -> tuple[PathDecision, bool]:
        """Decide the path for one log segment update.

        Call after :meth:`count_request` for the update.  Returns the decision
        and whether the block switched from non-temporal to temporal, in which
        case the caller flushes it right after the store.
        """
        st = self.state
        if self.in_warmup():
            reason = None
            path = PathDecision.NON_TEMPORAL
        else:
            reason = classify_reason(self.metrics(), self.uses_shared_memory, self.cfg.thrash_ratio)
            path = REASON_PATH[reason]
        key = reason.value if reason is not None else "warmup"
        st.reasons[key] = st.reasons.get(key, 0) + 1
        st.paths[path.value] = st.paths.get(path.value, 0) + 1
        temporal = path is PathDecision.TEMPORAL
        prev = self.marks.get(block)
        self.marks[block] = temporal
        for buf in (self.l1, self.l2):
            e = buf.peek(LOG, block)
            if e is not None:
                e.mark = (e.mark & ~1) | int(temporal)
        return path, (prev is False and temporal)

    def log_done(self) -> bool:
        """Count a finished log update; end the period when the threshold is reached."""
        st = self.state
        st.log_count_this_period += 1
        if st.log_count_this_period >= st.threshold:
            self.end_period()
            return True
        return False

    def end_period(self) -> None:
        st = self.state
        sample = st.wait_total / st.wait_count if st.wait_count else st.cwppr_prev
        st.cwppr_current = sample
        self.history.append(PeriodRecord(st.period_index, st.threshold, st.log_count_this_period,
                                         sample, dict(st.reasons), dict(st.paths)))
        new_threshold = update_threshold(st.threshold, st.cwppr_prev, sample, self.cfg.min_threshold)
        self.l1.clear()
        self.l2.clear()
        self.state = PeriodState(threshold=new_threshold, cwppr_prev=sample, period_index=st.period_index + 1)

    def finish_kernel(self) -> None:
        st = self.state
        if st.log_count_this_period or st.wait_count or not self.history:
            self.end_period()
        self.l1.clear()
        self.l2.clear()
        self.marks.clear()
