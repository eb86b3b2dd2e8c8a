"""Trace-driven simulation loop.

Kernels run one after another.  Within a kernel, CTAs are dealt to SMs
round-robin and become resident while the SM has warp and CTA slots.
Each CTA's event list is cut into phases at CTA-wide points (transaction
begin/commit, fences, barriers, and the implicit inTx point before the
first data update of a transaction).  Warps interleave through a global
ready-time heap; a phase ends when every warp of the CTA has drained it.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .agpm import LocalityMetrics, PathDecision, PathSelector, PeriodRecord, REASON_PATH, classify_reason
from .config import SimConfig
from .hierarchy import Hierarchy, LocalityView, Server
from .persist import (
    FLAG_COMPLETE,
    FLAG_INTX,
    PersistRecord,
    PersistTrace,
    Phase,
    PMImage,
    Source,
    TxLayout,
    TxState,
    encode_records,
)
from .strategy import RequestContext, Strategy, StrategyKind, decide
from .trace import (
    mask_offsets,
    EventKind,
    Op,
    Role,
    Target,
    Trace,
    TraceError,
    coalesce,
    tx_footprints,
    validate,
)

BUCKETS = ("[1,2]", "(2,8]", "(8,16]", "(16,32]")


def degree_bucket(n: int) -> str:
    if n <= 2:
        return BUCKETS[0]
    if n <= 8:
        return BUCKETS[1]
    if n <= 16:
        return BUCKETS[2]
    return BUCKETS[3]


def initial_byte(seed: int, addr: int) -> int:
    """Deterministic pre-run PM contents."""
    x = (addr * 0x9E3779B97F4A7C15 + (seed + 1) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 31
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (x >> 56) & 0xFF


def initial_bytes(seed: int, addrs: np.ndarray) -> np.ndarray:
    """Vectorised ``initial_byte``."""
    a = np.asarray(addrs, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = a * np.uint64(0x9E3779B97F4A7C15) + np.uint64(((seed + 1) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF)
        x ^= x >> np.uint64(31)
        x = x * np.uint64(0x94D049BB133111EB)
    return (x >> np.uint64(56)).astype(np.uint8)


def next_value(old: int, addr: int, version: int) -> int:
    """New byte for a data/plain store; never equal to ``old``."""
    return (old + 1 + (addr * 2654435761 + version * 40503) % 255) % 256


class SimulationError(RuntimeError):
    pass


@dataclass
class EngineOptions:
    seed: int = 0
    check: bool = True
    # force the locality tracker on for non-AGPM strategies (metrics only)
    track_locality: bool = False
    # disable AGPM period flushes (metrics then cover whole kernels)
    periods: bool = True
    record_stream: bool = False
    # test-only mutant: data updates go first, non-temporal, ahead of their log
    data_first: bool = False


@dataclass
class SimResult:
    strategy: str
    cycles: int
    kernel_cycles: list[int]
    persist: PersistTrace
    layouts: list[TxLayout]
    tx_states: list[TxState]
    hierarchy: Hierarchy
    coalescing: dict[str, int]
    mem_instrs: int
    all_count: int
    log_count: int
    store_paths: dict[str, int]
    periods: list[list[PeriodRecord]]
    metrics: list[LocalityMetrics | None]
    cwppr_mean: float | None
    stream: list[tuple] | None = None
    fences: int = 0
    fences_elided: int = 0
    cta_finish: dict = field(default_factory=dict)


@dataclass
class _Phase:
    warps: dict[int, list[int]]  # warp id -> event indices
    join: tuple  # (kind, tx_id)


@dataclass
class _CtaRun:
    cta: int
    sm: int
    phases: list[_Phase]
    warp_ids: list[int]
    phase: int = 0
    pos: dict[int, int] = field(default_factory=dict)
    arrived: dict[int, int] = field(default_factory=dict)
    tx: "_TxCtx | None" = None
    finish: int = 0
    # completion of each warp's outstanding loads; stores and barriers wait on it
    load_ready: dict[int, int] = field(default_factory=dict)


@dataclass
class _TxCtx:
    state: TxState
    layout: TxLayout
    log_values: dict[int, int]
    version: int


class Engine:
    def __init__(self, cfg: SimConfig, strategy: Strategy | StrategyKind, options: EngineOptions | None = None):
        cfg.validate()
        if isinstance(strategy, StrategyKind):
            strategy = Strategy(strategy, cfg.bucl_threshold)
        self.cfg = cfg
        self.strategy = strategy
        self.opts = options or EngineOptions()

    # ---------------------------------------------------------------- setup

    def _phases(self, events, idxs: list[int], data_first: bool, footprints) -> tuple[list[_Phase], list[int]]:
        warp_ids = sorted({events[i].instr.warp_id for i in idxs if events[i].kind is EventKind.MEM}) or [0]
        if data_first:
            idxs = _reorder_data_first(events, idxs)
        phases: list[_Phase] = []
        cur: dict[int, list[int]] = defaultdict(list)
        in_tx = None
        seen_data = False

        def cut(join):
            nonlocal cur
            phases.append(_Phase(dict(cur), join))
            cur = defaultdict(list)

        for i in idxs:
            ev = events[i]
            k = ev.kind
            if k is EventKind.TX_BEGIN:
                cut(("TXB", ev.tx_id))
                in_tx, seen_data = ev.tx_id, False
            elif k is EventKind.TX_COMMIT:
                if not seen_data:
                    cut(("LOG_FENCE", ev.tx_id))
                    cut(("INTX", ev.tx_id))
                cut(("DATA_FENCE", ev.tx_id))
                cut(("TXC", ev.tx_id))
                in_tx = None
            elif k is EventKind.FENCE:
                cut(("FEN", in_tx))
            elif k is EventKind.SYNC_THREADS:
                cut(("SYN", in_tx))
            elif k is EventKind.MEM:
                if ev.instr.role is Role.DATA and in_tx is not None and not seen_data and not data_first:
                    # the flag write is its own (empty) phase so it issues once the fence is done
                    cut(("LOG_FENCE", in_tx))
                    cut(("INTX", in_tx))
                    seen_data = True
                cur[ev.instr.warp_id].append(i)
        cut(("END", None))
        return phases, warp_ids

    # ---------------------------------------------------------------- run

    def run(self, trace: Trace) -> SimResult:
        if self.opts.check:
            bad = validate(trace)
            if bad:
                raise TraceError("; ".join(str(v) for v in bad[:5]))
        cfg = self.cfg
        h = self.hier = Hierarchy(cfg.hierarchy)
        hc = cfg.hierarchy
        self.ports = [Server() for _ in range(hc.sm_count)]
        self.footprints = {fp.key: fp for fp in tx_footprints(trace)}
        self.events = trace.events
        self.mem: dict[int, int] = {}
        self.layouts: list[TxLayout] = []
        self.tx_states: list[TxState] = []
        self.flag_next = 0
        self.version = 0
        self.coalescing = dict.fromkeys(BUCKETS, 0)
        self.mem_instrs = 0
        self.all_count = 0
        self.log_count = 0
        self.store_paths = {PathDecision.TEMPORAL.value: 0, PathDecision.NON_TEMPORAL.value: 0}
        self.stream = [] if self.opts.record_stream else None
        self.fences = 0
        self.fences_elided = 0
        self.cta_finish: dict[tuple[int, int], int] = {}
        self._coalesce_cache: dict[int, tuple] = {}
        self._tx_order: dict[tuple[int, int], int] = {}
        waits = [0, 0]

        tracking = self.strategy.kind is StrategyKind.AGPM or self.opts.track_locality
        self.selector: PathSelector | None = None
        self.view = LocalityView(hc, self._sink) if tracking else None

        def on_complete(issued: int, done: int) -> None:
            waits[0] += done - issued
            waits[1] += 1
            if self.selector is not None:
                self.selector.on_pm_complete(issued, done)

        h.on_pm_complete = on_complete

        by_kernel: dict[int, list[int]] = defaultdict(list)
        for i, ev in enumerate(trace.events):
            if ev.kind in (EventKind.KERNEL_BEGIN, EventKind.KERNEL_END):
                continue
            by_kernel[ev.kernel_id].append(i)

        now = 0
        kernel_cycles = []
        periods = []
        metrics = []
        for meta in trace.kernels:
            start = now
            self.meta = meta
            if tracking:
                agpm_cfg = cfg.agpm
                if not self.opts.periods:
                    agpm_cfg = replace(agpm_cfg, initial_threshold=1 << 62, min_threshold=1 << 62)
                    expected = None
                else:
                    expected = meta.expected_logs
                self.selector = PathSelector(agpm_cfg, uses_shared_memory=meta.uses_shared_memory,
                                             expected_logs=expected)
            now = self._run_kernel(meta, by_kernel.get(meta.kernel_id, []), now)
            kernel_cycles.append(now - start)
            if self.selector is not None:
                metrics.append(self.selector.metrics())
                self.selector.finish_kernel()
                periods.append(self.selector.history)
                self.selector = None
            else:
                metrics.append(None)
                periods.append([])

        persist = self._persist_trace()
        return SimResult(
            strategy=self.strategy.name,
            cycles=now,
            kernel_cycles=kernel_cycles,
            persist=persist,
            layouts=self.layouts,
            tx_states=self.tx_states,
            hierarchy=h,
            coalescing=self.coalescing,
            mem_instrs=self.mem_instrs,
            all_count=self.all_count,
            log_count=self.log_count,
            store_paths=self.store_paths,
            periods=periods,
            metrics=metrics,
            cwppr_mean=waits[0] / waits[1] if waits[1] else None,
            stream=self.stream,
            fences=self.fences,
            fences_elided=self.fences_elided,
            cta_finish=self.cta_finish,
        )

    def _sink(self, level, block, mask, hit, is_pm, is_log):
        if self.selector is not None:
            self.selector.sink(level, block, mask, hit, is_pm, is_log)

    # ---------------------------------------------------------------- kernel

    def _run_kernel(self, meta, idxs: list[int], start: int) -> int:
        hc = self.cfg.hierarchy
        t = hc.timing
        events = self.events
        per_cta: dict[int, list[int]] = defaultdict(list)
        for i in idxs:
            per_cta[events[i].cta_id].append(i)
        runs: dict[int, _CtaRun] = {}
        queues: list[list[int]] = [[] for _ in range(hc.sm_count)]
        for cta in range(meta.cta_count):
            phases, warps = self._phases(events, per_cta.get(cta, []), self.opts.data_first, self.footprints)
            sm = cta % hc.sm_count
            runs[cta] = _CtaRun(cta, sm, phases, warps)
            queues[sm].append(cta)
        for q in queues:
            q.reverse()
        used_warps = [0] * hc.sm_count
        used_ctas = [0] * hc.sm_count
        heap: list[tuple[int, int, int, int]] = []
        seq = 0
        end = start

        def launch(sm: int, at: int) -> None:
            nonlocal seq
            q = queues[sm]
            while q:
                run = runs[q[-1]]
                nw = len(run.warp_ids)
                if used_ctas[sm] and (used_ctas[sm] >= t.ctas_per_sm or used_warps[sm] + nw > t.warps_per_sm):
                    break
                q.pop()
                used_ctas[sm] += 1
                used_warps[sm] += nw
                seq = self._start_phase(run, at, heap, seq)

        for sm in range(hc.sm_count):
            launch(sm, start)

        while heap:
            now, cta, _, warp = heapq.heappop(heap)
            run = runs[cta]
            ph = run.phases[run.phase]
            lst = ph.warps.get(warp, ())
            p = run.pos[warp]
            if p < len(lst):
                ev = events[lst[p]]
                if ev.instr.op is Op.STORE:
                    wait = run.load_ready.get(warp, 0)
                else:
                    # stall on a full MSHR file rather than booking servers in the future
                    need = min(len(self._segments(lst[p], ev.instr)[0]), self.cfg.hierarchy.l1d.mshrs)
                    wait = self.hier.mshr_free_at(run.sm, now, need)
                if wait > now:
                    # keep servers booked in time order: resume when the loads are back
                    heapq.heappush(heap, (wait, cta, seq, warp))
                    seq += 1
                    continue
                ready = self._exec(run, ev, lst[p], now)
                run.pos[warp] = p + 1
                heapq.heappush(heap, (ready, cta, seq, warp))
                seq += 1
                continue
            wait = run.load_ready.get(warp, 0)
            if wait > now:
                heapq.heappush(heap, (wait, cta, seq, warp))
                seq += 1
                continue
            run.arrived[warp] = now
            if len(run.arrived) < len(run.warp_ids):
                continue
            at = max(run.arrived.values())
            done = self._join(run, ph.join, at)
            run.phase += 1
            if run.phase < len(run.phases):
                seq = self._start_phase(run, done, heap, seq)
                continue
            run.finish = done
            self.cta_finish[(meta.kernel_id, run.cta)] = done
            end = max(end, done)
            used_ctas[run.sm] -= 1
            used_warps[run.sm] -= len(run.warp_ids)
            launch(run.sm, done)
        for run in runs.values():
            if run.phase < len(run.phases):
                raise SimulationError(f"cta {run.cta} did not finish")
        return end

    def _start_phase(self, run: _CtaRun, at: int, heap, seq: int) -> int:
        run.pos = {w: 0 for w in run.warp_ids}
        run.arrived = {}
        for w in run.warp_ids:
            heapq.heappush(heap, (at, run.cta, seq, w))
            seq += 1
        return seq

    # ---------------------------------------------------------------- joins

    def _fence(self, run: _CtaRun, at: int) -> int:
        elide = self.strategy.elides_fences
        done = self.hier.sfence(run.sm, run.cta, at, elide=elide)
        self.fences += 1
        if elide and done == at:
            self.fences_elided += 1
        return done

    def _join(self, run: _CtaRun, join: tuple, at: int) -> int:
        kind, tx_id = join
        t = self.cfg.hierarchy.timing
        if kind == "END":
            return at
        if kind == "SYN":
            return at + t.barrier_cycles
        if kind == "FEN":
            return self._fence(run, at)
        if kind == "TXB":
            self._begin_tx(run, tx_id)
            return at + t.barrier_cycles
        ctx = run.tx
        if ctx is None or ctx.state.tx_id != tx_id:
            raise SimulationError(f"join {kind} for tx {tx_id} without an open transaction")
        if kind == "LOG_FENCE":
            return self._fence(run, at + t.barrier_cycles)
        if kind == "INTX":
            at = self._flag(run, ctx, FLAG_INTX, "intx", at)
            ctx.state.advance(Phase.INTX, at)
            return at
        if kind == "DATA_FENCE":
            ctx.state.advance(Phase.COMPLETING, at)
            return self._fence(run, at + t.barrier_cycles)
        if kind == "TXC":
            at = self._flag(run, ctx, FLAG_COMPLETE, "complete", at)
            ctx.state.advance(Phase.COMPLETE, at)
            run.tx = None
            return at
        raise SimulationError(f"unknown join {kind}")

    def _flag_path(self) -> PathDecision:
        kind = self.strategy.kind
        if kind is StrategyKind.AGPM:
            sel = self.selector
            if sel.in_warmup():
                return PathDecision.NON_TEMPORAL
            return REASON_PATH[classify_reason(sel.metrics(), sel.uses_shared_memory, sel.cfg.thrash_ratio)]
        return decide(self.strategy, RequestContext(Op.STORE, Role.LOG, 1))

    def _flag(self, run: _CtaRun, ctx: _TxCtx, value: int, kind: str, at: int) -> int:
        h = self.hier
        addr = ctx.layout.flag_addr
        block = addr - addr % self.cfg.hierarchy.segment_bytes
        mask = 1 << (addr - block)
        vals = {addr - block: value}
        tag = ctx.layout.key + (kind,)
        issue = self.ports[run.sm].reserve(at, self.cfg.hierarchy.timing.issue_cycles)
        if self._flag_path() is PathDecision.NON_TEMPORAL:
            h.store_nontemporal(run.sm, block, mask, vals, issue, cta=run.cta, tag=tag)
        else:
            h.store_temporal(run.sm, block, mask, vals, issue, cta=run.cta, persist=True, tag=tag)
        # the flag is always fenced, whatever the strategy
        self.fences += 1
        return h.sfence(run.sm, run.cta, issue + 1)

    def _begin_tx(self, run: _CtaRun, tx_id: int) -> None:
        key = (self.meta.kernel_id, run.cta, tx_id)
        fp = self.footprints[key]
        pm = self.cfg.hierarchy.pm
        # one flag per block, so flags of different CTAs never share a line or a channel queue
        seg = self.cfg.hierarchy.segment_bytes
        flag_addr = pm.flag_base + self.flag_next * seg
        if flag_addr + seg > pm.pm_base + pm.pm_size:
            raise SimulationError("flag region exhausted")
        self.flag_next += 1
        self.version += 1
        order = self._tx_order.get(key[:2], 0)
        self._tx_order[key[:2]] = order + 1
        stream = encode_records(fp.elements, self._value)
        log_values = {}
        for i, a in enumerate(fp.log_bytes):
            log_values[a] = stream[i] if i < len(stream) else 0
        layout = TxLayout(key[0], key[1], key[2], order, flag_addr, tuple(fp.log_bytes), tuple(fp.elements))
        state = TxState(tx_id, run.cta, key[0], flag_addr)
        state.log_entries = [(a, bytes(self._value(b) for b in range(a, a + n))) for a, n in fp.elements]
        self.layouts.append(layout)
        self.tx_states.append(state)
        run.tx = _TxCtx(state, layout, log_values, self.version)

    def _value(self, addr: int) -> int:
        v = self.mem.get(addr)
        if v is None:
            v = initial_byte(self.opts.seed, addr)
        return v

    # ---------------------------------------------------------------- memory

    def _segments(self, index: int, instr) -> tuple:
        cached = self._coalesce_cache.get(index)
        if cached is None:
            co = coalesce(instr, self.cfg.hierarchy.segment_bytes)
            cached = (co.transactions, co.degree)
            self._coalesce_cache[index] = cached
        return cached

    def _exec(self, run: _CtaRun, ev, index: int, now: int) -> int:
        instr = ev.instr
        hc = self.cfg.hierarchy
        h = self.hier
        segs, degree = self._segments(index, instr)
        self.mem_instrs += 1
        self.coalescing[degree_bucket(degree)] += 1
        is_pm = instr.target is Target.PM
        is_log = instr.role is Role.LOG
        store = instr.op is Op.STORE
        port = self.ports[run.sm]
        issue_c = hc.timing.issue_cycles
        sel = self.selector
        strategy = self.strategy
        ctx = run.tx if ev.tx_id is not None else None
        if instr.role is not Role.PLAIN and ctx is None:
            raise SimulationError(f"event {index}: {instr.role.value} update outside a transaction")
        warp = instr.warp_id
        ready = now
        for block, mask in segs:
            t0 = port.reserve(now, issue_c)
            self.all_count += 1
            if is_log:
                self.log_count += 1
            if sel is not None:
                sel.count_request(is_log)
            if not store:
                if self.view is not None:
                    self._observe(run.sm, False, block, mask, is_pm, False, t0)
                res = h.load(run.sm, block, mask, t0, instr.target)
                if res.completion > run.load_ready.get(warp, 0):
                    run.load_ready[warp] = res.completion
                ready = max(ready, t0 + issue_c)
                continue
            path = PathDecision.TEMPORAL
            flip = False
            if is_pm:
                if strategy.kind is StrategyKind.AGPM and is_log:
                    path, flip = sel.select_path(block)
                elif self.opts.data_first and instr.role is Role.DATA:
                    path = PathDecision.NON_TEMPORAL
                else:
                    rc = RequestContext(Op.STORE, instr.role, degree, instr.target,
                                        h.mshr_full(run.sm, t0) if strategy.kind is StrategyKind.BUCL else False)
                    path = decide(strategy, rc)
                self.store_paths[path.value] += 1
            if self.view is not None:
                self._observe(run.sm, True, block, mask, is_pm, is_log, t0)
            values, tag = self._store_values(ctx, instr, block, mask, is_pm)
            if path is PathDecision.NON_TEMPORAL:
                h.store_nontemporal(run.sm, block, mask, values, t0, target=instr.target, cta=run.cta, tag=tag)
            else:
                persist = is_pm and instr.role is not Role.PLAIN
                h.store_temporal(run.sm, block, mask, values, t0, target=instr.target, cta=run.cta,
                                 persist=persist, tag=tag)
                if flip:
                    h.clwb(run.sm, block, t0 + issue_c, run.cta)
            if sel is not None and is_log and strategy.kind is StrategyKind.AGPM:
                sel.log_done()
            ready = max(ready, t0 + issue_c)
        return ready

    def _observe(self, sm, store, block, mask, is_pm, is_log, at):
        if self.stream is not None:
            self.stream.append((sm, store, block, mask, is_pm, is_log))
        sel = self.selector
        before = sel.l1.reserve.refills + sel.l2.reserve.refills if sel is not None else 0
        self.view.observe(sm, store, block, mask, is_pm, is_log)
        if sel is not None and sel.l1.reserve.refills + sel.l2.reserve.refills > before:
            # reservation buffers live in device memory: a refill costs one read slot
            h = self.hier
            ch = h.channel_of(block)
            h.read_port[ch].reserve(at, max(1, int(h.line / h.bpc)))

    def _store_values(self, ctx: _TxCtx | None, instr, block: int, mask: int, is_pm: bool):
        if not is_pm:
            return {}, None
        values = {}
        role = instr.role
        if role is Role.LOG:
            lv = ctx.log_values
            for off in mask_offsets(mask):
                a = block + off
                values[off] = lv.get(a, 0)
            return values, ctx.layout.key + ("log",)
        version = ctx.version if ctx is not None else self.version
        post = ctx.layout.post if role is Role.DATA else None
        for off in mask_offsets(mask):
            a = block + off
            old = self._value(a)
            new = next_value(old, a, version)
            self.mem[a] = new
            values[off] = new
            if post is not None:
                ctx.layout.pre.setdefault(a, old)
                post[a] = new
        tag = ctx.layout.key + ("data",) if role is Role.DATA else None
        return values, tag

    # ---------------------------------------------------------------- persist

    def _persist_trace(self) -> PersistTrace:
        h = self.hier
        pm = self.cfg.hierarchy.pm
        parts = [np.fromiter((e.block + off for e in h.persist_log for off, _ in e.values), dtype=np.int64)]
        for lay in self.layouts:
            parts.append(np.asarray(lay.log_stream, dtype=np.int64))
            parts.append(np.fromiter(lay.post, dtype=np.int64, count=len(lay.post)))
        parts.append(np.fromiter((lay.flag_addr for lay in self.layouts), dtype=np.int64))
        addrs = np.unique(np.concatenate(parts))
        data = initial_bytes(self.opts.seed, addrs)
        data[addrs >= pm.flag_base] = 0
        pre = PMImage.from_arrays(addrs, data)
        records = []
        for e in h.persist_log:
            src = Source.DATA
            for tag in e.tags:
                if tag is not None:
                    src = {"log": Source.LOG, "data": Source.DATA}.get(tag[3], Source.FLAG)
                    break
            records.append(PersistRecord(e.time, e.seq, e.block, e.mask, e.values, src, e.tags))
        return PersistTrace(records, pre, self.layouts)



def _reorder_data_first(events, idxs: list[int]) -> list[int]:
    """Within each transaction, hoist data updates ahead of everything else."""
    out: list[int] = []
    tx_body: list[int] | None = None
    for i in idxs:
        ev = events[i]
        if ev.kind is EventKind.TX_BEGIN:
            out.append(i)
            tx_body = []
        elif ev.kind is EventKind.TX_COMMIT:
            data = [j for j in tx_body if events[j].kind is EventKind.MEM and events[j].instr.role is Role.DATA]
            rest = [j for j in tx_body if j not in set(data)]
            out.extend(data + rest)
            out.append(i)
            tx_body = None
        elif tx_body is not None:
            tx_body.append(i)
        else:
            out.append(i)
    return out


def simulate(trace: Trace, cfg: SimConfig | None = None, strategy: Strategy | StrategyKind | str = "temporal",
             **options) -> SimResult:
    cfg = cfg or SimConfig()
    if isinstance(strategy, str):
        strategy = Strategy(StrategyKind.parse(strategy), cfg.bucl_threshold)
    return Engine(cfg, strategy, EngineOptions(**options)).run(trace)
