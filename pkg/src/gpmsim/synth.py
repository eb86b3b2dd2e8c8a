"""Synthetic trace families, one per locality reason.

Every family shares one transaction skeleton per warp: optional loads,
log stores covering one undo record per data element, then coalesced data
stores.  What differs is where the loads and log stores land, which is
what the locality counters see:

    a  PM inputs re-read from L1D; log blocks never cached in L1D
    b  log blocks read, then overwritten, in every transaction
    c  no L1D reuse at all; log regions rewritten across transactions (L2 reuse)
    d  heavy input re-reads plus a trickle of log re-hits in L1D
    e  at most ``log_updates`` log segment stores, the rest is DRAM work
    f  every address touched once
    g  single-word header loads next to log bytes (spatial-only L1D reuse)
    h  shared-memory kernel with short, fence-heavy transactions

Log stores come in two shapes.  "wide" writes the record stream as full
128 B segments.  "narrow" has each thread write 4 B words of a record
slot ``stride`` bytes apart, so one segment collects bytes from several
store instructions; the temporal path merges those into one write-back
while the non-temporal path sends one WPQ entry per store.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, replace

from .trace import (
    LOG_RECORD_OVERHEAD,
    EventKind,
    KernelMeta,
    MemInstr,
    Op,
    Role,
    Target,
    Trace,
    TraceEvent,
)


class UnrealizableFamily(ValueError):
    def __init__(self, family: str, why: str):
        super().__init__(f"unrealizable family {family}: {why}")


FAMILIES = ("a", "b", "c", "d", "e", "f", "g", "h")
TYPE_FAMILY = {"I": "a", "II": "b", "III": "f"}

WARP = 32
WORD = 4
SEG = 128
# data element = one 4 B word per thread, so each record is 16 + 4 bytes
RECORD = LOG_RECORD_OVERHEAD + WORD
WORDS_PER_RECORD = RECORD // WORD

DATA_BASE = 0x1_0000_0000
LOG_BASE = 0x1_4000_0000
INPUT_BASE = 0x1_8000_0000
DRAM_BASE = 0x0000_1000


@dataclass(frozen=True)
class SynthParams:
    ctas: int = 40
    warps: int = 1
    log_updates: int = 12000
    data_updates: int = 1  # data store instructions per warp per transaction
    reuse_distance: int = 1  # transactions between rewrites of a log region (0 = never)
    stride: int = 24  # bytes between a thread's record slots for narrow logs
    loads: int = 4  # input re-reads per transaction (a, d)
    dram_loads: int = 4  # DRAM loads per streaming iteration
    work: int = 0  # streaming iterations (loads, then a dependent DRAM store) per warp per transaction
    fences: int = 0  # extra FEN/SYN pairs inside the log phase

    def check(self) -> None:
        for name in ("ctas", "warps", "log_updates", "data_updates", "stride", "dram_loads", "work"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ctas < 1 or self.warps < 1:
            raise ValueError("ctas and warps must be positive")


DEFAULTS: dict[str, SynthParams] = {
    "a": SynthParams(ctas=40, warps=2, log_updates=4800, stride=24, loads=4, work=8),
    "b": SynthParams(ctas=4, warps=2, log_updates=2000, stride=4, reuse_distance=1, loads=0, work=2),
    "c": SynthParams(ctas=20, warps=1, log_updates=8000, stride=20, reuse_distance=1, loads=0, work=4),
    "d": SynthParams(ctas=40, warps=2, log_updates=4800, stride=24, reuse_distance=1, loads=4, work=8),
    "e": SynthParams(ctas=40, warps=2, log_updates=50, stride=4, loads=0, work=16),
    "f": SynthParams(ctas=40, warps=1, log_updates=600, stride=4, reuse_distance=0, loads=0, work=16),
    "g": SynthParams(ctas=40, warps=2, log_updates=4800, stride=24, reuse_distance=0, loads=0, work=8),
    "h": SynthParams(ctas=4, warps=1, log_updates=1500, stride=4, loads=0, fences=2, work=2),
}


class _Builder:
    def __init__(self, kernel_id: int = 0):
        self.kid = kernel_id
        self.events: list[TraceEvent] = []

    def mem(self, cta, warp, op, role, target, accesses, tx=None):
        instr = MemInstr(op, role, warp, tuple(accesses), target)
        self.events.append(TraceEvent(EventKind.MEM, self.kid, cta, tx, instr))

    def mark(self, kind, cta, tx=None):
        self.events.append(TraceEvent(kind, self.kid, cta, tx))


def _log_instrs(kind: str, region: int, n_data: int, stride: int) -> list[list[tuple[int, int]]]:
    """Log store instructions for ``n_data`` data instructions of one warp."""
    out = []
    if kind == "wide":
        stream = n_data * WARP * RECORD
        for seg in range(math.ceil(stream / SEG)):
            lo = seg * SEG
            n = min(SEG, stream - lo)
            out.append([(region + lo + WORD * t, WORD) for t in range(n // WORD)])
        return out
    span = WARP * stride
    for d in range(n_data):
        base = region + d * span
        for w in range(WORDS_PER_RECORD):
            out.append([(base + stride * t + WORD * w, WORD) for t in range(WARP)])
    return out


def _log_span(kind: str, n_data: int, stride: int) -> int:
    if kind == "wide":
        return math.ceil(n_data * WARP * RECORD / SEG) * SEG
    return n_data * WARP * stride


def _segments_per_log_tx(kind: str, n_data: int, stride: int) -> int:
    instrs = _log_instrs(kind, 0, n_data, stride)
    return sum(len({a // SEG for a, _ in ins}) for ins in instrs)


def gen_synthetic(family: str, params: SynthParams | dict | None = None, seed: int = 0, **overrides) -> Trace:
    fam = str(family).strip()
    fam = TYPE_FAMILY.get(fam.upper(), fam.lower()) if fam.upper() in TYPE_FAMILY else fam.lower()
    if fam not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    base = DEFAULTS[fam]
    if isinstance(params, dict):
        base = replace(base, **params)
    elif params is not None:
        base = params
    p = replace(base, **overrides) if overrides else base
    p.check()
    if p.log_updates == 0:
        raise UnrealizableFamily(fam, "needs at least one log update")
    if fam == "e" and p.log_updates > 100:
        raise UnrealizableFamily(fam, "reason e needs at most 100 log updates")
    if fam in ("b", "c", "d") and p.reuse_distance < 1:
        raise UnrealizableFamily(fam, "log-region reuse is what creates its locality (reuse_distance >= 1)")
    if fam in ("a", "d") and p.loads < 1:
        raise UnrealizableFamily(fam, "needs input re-reads (loads >= 1)")
    if fam != "e" and p.data_updates < 1:
        raise UnrealizableFamily(fam, "needs data updates")
    if fam in ("a", "c", "d", "g") and p.stride < RECORD:
        raise UnrealizableFamily(fam, f"narrow logs need stride >= {RECORD}")
    rng = random.Random(f"{fam}:{seed}")
    if fam == "e":
        return _gen_e(p, rng)
    return _gen_tx_family(fam, p, rng)


def _gen_tx_family(fam: str, p: SynthParams, rng: random.Random) -> Trace:
    kind = "narrow" if fam in ("a", "c", "d", "g") else "wide"
    stride = p.stride if kind == "narrow" else RECORD
    segs = _segments_per_log_tx(kind, p.data_updates, stride)
    per_tx = segs * p.warps
    txs = max(1, round(p.log_updates / (per_tx * p.ctas)))
    span = _log_span(kind, p.data_updates, stride)
    # f and g must never revisit a log region, whatever reuse_distance says
    slots = p.reuse_distance if p.reuse_distance >= 1 and fam not in ("f", "g") else txs
    warp_log_span = span * slots
    cta_log_span = warp_log_span * p.warps
    data_span = p.data_updates * SEG
    b = _Builder()
    shared = fam == "h"
    # the seed permutes which PM regions each CTA owns
    place = list(range(p.ctas))
    rng.shuffle(place)
    for cta in range(p.ctas):
        log_cta = LOG_BASE + place[cta] * cta_log_span
        in_cta = INPUT_BASE + place[cta] * p.warps * SEG
        if p.work:
            # a seeded prologue of streaming work staggers the CTAs' fences
            lead = rng.randrange(p.work + 1)
            for w in range(p.warps):
                _stream(b, place[cta], w, txs, p, cta, lead, txs)
        for tx in range(txs):
            b.mark(EventKind.TX_BEGIN, cta, tx)
            slot = tx % slots
            log_regions = [log_cta + w * warp_log_span + slot * span for w in range(p.warps)]
            for w in range(p.warps):
                if fam in ("a", "d"):
                    src = in_cta + w * SEG
                    for _ in range(p.loads):
                        b.mem(cta, w, Op.LOAD, Role.PLAIN, Target.PM, [(src + WORD * t, WORD) for t in range(WARP)])
                if fam == "d":
                    # one log word is read back before being overwritten again
                    b.mem(cta, w, Op.LOAD, Role.PLAIN, Target.PM, [(log_regions[w], WORD)])
                if fam == "b":
                    for seg in range(span // SEG):
                        lo = log_regions[w] + seg * SEG
                        b.mem(cta, w, Op.LOAD, Role.PLAIN, Target.PM, [(lo + WORD * t, WORD) for t in range(WARP)])
                if p.work:
                    _stream(b, place[cta], w, tx, p, cta, None, txs)
            for w in range(p.warps):
                instrs = _log_instrs(kind, log_regions[w], p.data_updates, stride)
                for i, acc in enumerate(instrs):
                    if fam == "g" and i < 2:
                        # header word in the unused tail of slot 0 shares a sector with the log
                        b.mem(cta, w, Op.LOAD, Role.PLAIN, Target.PM, [(log_regions[w] + RECORD, WORD)])
                    b.mem(cta, w, Op.STORE, Role.LOG, Target.PM, acc, tx)
                    if p.fences and i < p.fences:
                        b.mark(EventKind.FENCE, cta)
                        b.mark(EventKind.SYNC_THREADS, cta)
            if p.fences:
                b.mark(EventKind.FENCE, cta)
            for w in range(p.warps):
                dbase = DATA_BASE + ((place[cta] * txs + tx) * p.warps + w) * data_span
                for d in range(p.data_updates):
                    lo = dbase + d * SEG
                    b.mem(cta, w, Op.STORE, Role.DATA, Target.PM, [(lo + WORD * t, WORD) for t in range(WARP)], tx)
            b.mark(EventKind.TX_COMMIT, cta, tx)
    return _finish(b, fam, p, shared, expected=per_tx * p.ctas * txs)


def _stream(b: _Builder, region: int, w: int, tx: int, p: SynthParams, cta: int, iters: int | None = None,
            txs: int = 0) -> None:
    """Streaming iterations: ``dram_loads`` fresh DRAM loads, then one store that uses them."""
    n = p.work if iters is None else iters
    per = p.dram_loads + 1
    # each region reserves room for txs + 1 slices (the prologue uses index txs)
    slices = max(1025, txs + 1)
    base = DRAM_BASE + (((region * slices + tx) * p.warps + w) * p.work * per) * SEG
    for it in range(n):
        lo = base + it * per * SEG
        for i in range(per):
            op = Op.LOAD if i < p.dram_loads else Op.STORE
            b.mem(cta, w, op, Role.PLAIN, Target.DRAM, [(lo + i * SEG + WORD * t, WORD) for t in range(WARP)])


def _gen_e(p: SynthParams, rng: random.Random) -> Trace:
    """DRAM-heavy kernel; CTA 0 carries the whole (small) transactional part."""
    b = _Builder()
    n_log = p.log_updates
    n_data = min(p.data_updates * 4, n_log // 5) if n_log >= 5 else 0
    place = list(range(p.ctas))
    rng.shuffle(place)
    for cta in range(p.ctas):
        for w in range(p.warps):
            _stream(b, place[cta], w, 0, p, cta)
        if cta != 0:
            continue
        b.mark(EventKind.TX_BEGIN, cta, 0)
        for seg in range(n_log):
            lo = LOG_BASE + seg * SEG
            b.mem(cta, 0, Op.STORE, Role.LOG, Target.PM, [(lo + WORD * t, WORD) for t in range(WARP)], 0)
        for d in range(n_data):
            lo = DATA_BASE + d * SEG
            b.mem(cta, 0, Op.STORE, Role.DATA, Target.PM, [(lo + WORD * t, WORD) for t in range(WARP)], 0)
        b.mark(EventKind.TX_COMMIT, cta, 0)
    return _finish(b, "e", p, False, expected=n_log)


def _finish(b: _Builder, fam: str, p: SynthParams, shared: bool, expected: int) -> Trace:
    meta = KernelMeta(0, f"synthetic-{fam}", shared, p.ctas, WARP, expected)
    events = [TraceEvent(EventKind.KERNEL_BEGIN, 0), *b.events, TraceEvent(EventKind.KERNEL_END, 0)]
    return Trace((meta,), tuple(events))


def describe(family: str) -> dict:
    return asdict(DEFAULTS[family])
