"""GPU memory hierarchy with a persistent-memory controller.

The timing model is queueing based: every shared resource (SM links,
L2 partition ports, memory channels, WPQ drain slots) is a server with a
``free_at`` horizon, and a request's completion is the sum of fixed
latencies plus whatever queueing it meets on the way.  Requests are
serviced in the order the engine presents them, which is (approximately)
global time order.

Persistence follows ADR: a write is durable the moment the PM
controller's write-pending queue accepts it.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .cache import CacheLine, SectorCache, sector_mask
from .config import HierarchyConfig
from .trace import Target, mask_offsets


class AddressError(ValueError):
    pass


class HitLevel(enum.Enum):
    L1D = "L1D"
    L2 = "L2"
    MEMORY = "Memory"


_DEPTH = {HitLevel.L1D: 0, HitLevel.L2: 1, HitLevel.MEMORY: 2}


@dataclass
class AccessResult:
    hit_level: HitLevel
    latency_cycles: int
    bytes_s2m: int = 0
    bytes_m2s: int = 0
    durable_at: int | None = None
    completion: int = 0


@dataclass(frozen=True)
class WpqEntry:
    time: int  # acceptance == durability
    seq: int
    block: int
    mask: int
    values: tuple[tuple[int, int], ...]  # (offset, byte) for each masked byte
    channel: int
    drain_done: int
    tags: tuple = ()  # provenance per byte, aligned with values


class Server:
    __slots__ = ("free_at",)

    def __init__(self) -> None:
        self.free_at = 0

    def reserve(self, arrival: int, service: int) -> int:
        """Occupy the server for ``service`` cycles; return the start time."""
        start = arrival if arrival > self.free_at else self.free_at
        self.free_at = start + service
        return start


class WritePendingQueue:
    """Bounded FIFO inside the persistent domain, drained by ``banks`` NVM write slots."""

    def __init__(self, capacity: int, banks: int, write_cycles: int):
        self.capacity = capacity
        self.write_cycles = write_cycles
        self.occupancy: deque[int] = deque()  # drain completion times of queued entries
        self.slots: deque[int] = deque([0] * banks, maxlen=banks)

    def accept(self, arrival: int) -> tuple[int, int]:
        """Return (acceptance time, drain completion time)."""
        q = self.occupancy
        while q and q[0] <= arrival:
            q.popleft()
        accepted = arrival
        if len(q) >= self.capacity:
            accepted = max(arrival, q.popleft())
        start = max(accepted, self.slots[0])
        done = start + self.write_cycles
        self.slots.append(done)
        q.append(done)
        return accepted, done


class Hierarchy:
    def __init__(self, cfg: HierarchyConfig, *, record_evictions: bool = False, record_transfers: bool = False):
        cfg.validate()
        self.cfg = cfg
        t = cfg.timing
        line = cfg.l1d.line_bytes
        self.line = line
        self.partitions = cfg.l2.partitions
        self.channels = cfg.memory.channels
        self.l1d = [
            SectorCache(cfg.l1d.size_kib * 1024, line, cfg.l1d.assoc, cfg.sector_bytes,
                        name=f"l1d{sm}", record_evictions=record_evictions)
            for sm in range(cfg.sm_count)
        ]
        self.l2 = [
            SectorCache(cfg.l2.partition_kib * 1024, line, cfg.l2.assoc, cfg.sector_bytes,
                        index_stride=self.partitions, name=f"l2p{p}", record_evictions=record_evictions)
            for p in range(self.partitions)
        ]
        self.s2m_link = [Server() for _ in range(cfg.sm_count)]
        self.m2s_link = [Server() for _ in range(cfg.sm_count)]
        self.l2_port = [Server() for _ in range(self.partitions)]
        self.read_port = [Server() for _ in range(self.channels)]
        self.dram_write_port = [Server() for _ in range(self.channels)]
        self.wpq = [
            WritePendingQueue(cfg.pm.wpq_capacity, cfg.pm.write_banks, cfg.ns_to_cycles(cfg.memory.nvm_write_ns))
            for _ in range(self.channels)
        ]
        self.mshr: list[list[int]] = [[] for _ in range(cfg.sm_count)]

        self.l2_access = max(1, t.l2_hit_cycles - 2 * t.icnt_cycles)
        self.nvm_read = cfg.ns_to_cycles(cfg.memory.nvm_read_ns)
        self.dram_read = cfg.ns_to_cycles(cfg.memory.dram_read_ns)
        self.dram_write = cfg.ns_to_cycles(cfg.memory.dram_write_ns)
        self.bpc = cfg.bytes_per_channel_cycle
        # earliest a freshly issued persist can reach the WPQ
        self.min_persist_latency = cfg.flit_cycles(1) + t.icnt_cycles + t.mc_cycles

        self.persist_log: list[WpqEntry] = []
        self.wpq_bytes_in = 0
        self.wpq_last: dict[int, int] = {}  # block -> latest acceptance time
        self.bytes_s2m = 0
        self.bytes_m2s = 0
        self.transfers: list[tuple[str, int]] | None = [] if record_transfers else None
        self.dram_writebacks = 0

        # per-CTA persistence bookkeeping for sfence
        self.pending_clwb: dict[object, dict[int, None]] = {}
        self.outstanding: dict[object, int] = {}
        # called with (issue_time, completion_time) for every completed PM request
        self.on_pm_complete: Callable[[int, int], None] | None = None
        self.hit_listeners: list[Callable[[HitLevel, int, int, bool], None]] = []

    # ------------------------------------------------------------ addressing

    def partition_of(self, block: int) -> int:
        return (block // self.line) % self.partitions

    def channel_of(self, block: int) -> int:
        return self.partition_of(block) * self.channels // self.partitions

    def check_address(self, addr: int, target: Target) -> None:
        pm = self.cfg.pm
        if target is Target.PM:
            lo, hi = pm.pm_base, pm.pm_base + pm.pm_size
        else:
            lo, hi = pm.dram_base, pm.dram_base + pm.dram_size
        if not lo <= addr < hi:
            raise AddressError(f"address {addr:#x} outside the configured {target.value} range")

    # ------------------------------------------------------------ transport

    def _flits(self, nbytes: int) -> int:
        fb = self.cfg.interconnect.flit_bytes
        return max(1, -(-nbytes // fb))

    def _s2m(self, sm: int, now: int, nbytes: int) -> tuple[int, int]:
        flits = self._flits(nbytes)
        moved = flits * self.cfg.interconnect.flit_bytes
        self.bytes_s2m += moved
        if self.transfers is not None:
            self.transfers.append(("s2m", nbytes))
        dur = self.cfg.flit_cycles(flits)
        start = self.s2m_link[sm].reserve(now, dur)
        return start + dur + self.cfg.timing.icnt_cycles, moved

    def _m2s(self, sm: int, now: int, nbytes: int) -> tuple[int, int]:
        flits = self._flits(nbytes)
        moved = flits * self.cfg.interconnect.flit_bytes
        self.bytes_m2s += moved
        if self.transfers is not None:
            self.transfers.append(("m2s", nbytes))
        dur = self.cfg.flit_cycles(flits)
        start = self.m2s_link[sm].reserve(now, dur)
        return start + dur + self.cfg.timing.icnt_cycles, moved

    def _l2_enter(self, block: int, arrival: int) -> int:
        p = self.partition_of(block)
        start = self.l2_port[p].reserve(arrival, self.cfg.timing.l2_port_cycles)
        return start + self.l2_access

    def _is_pm(self, block: int) -> bool:
        pm = self.cfg.pm
        return pm.pm_base <= block < pm.pm_base + pm.pm_size

    # ------------------------------------------------------------ persistence

    def _to_wpq(self, block: int, mask: int, values: dict[int, int], arrival: int,
                pending=(), tags: dict[int, object] | None = None) -> int:
        """Insert one entry; every store whose bytes ride along becomes durable with it.

        Entries for one block are accepted in issue order (the controller
        keeps same-address writes FIFO), so a fast nt-store can never be
        overtaken in durability order by an older write-back of its block.
        """
        ch = self.channel_of(block)
        arrival = max(arrival, self.wpq_last.get(block, 0))
        accepted, done = self.wpq[ch].accept(arrival)
        self.wpq_last[block] = accepted
        offs = list(mask_offsets(mask))
        vals = tuple((off, values.get(off, 0)) for off in offs)
        tag_row = tuple(tags.get(off) for off in offs) if tags else ()
        self.persist_log.append(WpqEntry(accepted, len(self.persist_log), block, mask, vals, ch, done, tag_row))
        self.wpq_bytes_in += len(vals)
        for issued, cta in pending:
            self._mark_outstanding(cta, accepted)
            if self.on_pm_complete is not None:
                self.on_pm_complete(issued, accepted)
        return accepted

    @staticmethod
    def _clean(line: CacheLine) -> None:
        line.dirty = 0
        line.values = {}
        line.pending = []
        line.tags = {}

    def _write_back(self, victim: CacheLine, at: int) -> None:
        if not victim.dirty:
            return
        at = max(at, victim.write_time)
        if self._is_pm(victim.tag):
            self._to_wpq(victim.tag, victim.dirty, victim.values, at + self.cfg.timing.mc_cycles,
                         victim.pending, victim.tags)
        else:
            ch = self.channel_of(victim.tag)
            self.dram_write_port[ch].reserve(at, max(1, int(self.line / self.bpc)))
            self.dram_writebacks += 1
        self._clean(victim)

    # ------------------------------------------------------------ requests

    def _mshr_wait(self, sm: int, now: int) -> int:
        heap = self.mshr[sm]
        while heap and heap[0] <= now:
            heapq.heappop(heap)
        if len(heap) >= self.cfg.l1d.mshrs:
            now = heapq.heappop(heap)
        return now

    def mshr_free_at(self, sm: int, now: int, need: int = 1) -> int:
        """Earliest time at which ``need`` L1D MSHRs are free on ``sm``."""
        heap = self.mshr[sm]
        while heap and heap[0] <= now:
            heapq.heappop(heap)
        over = len(heap) + need - self.cfg.l1d.mshrs
        if over <= 0:
            return now
        return heapq.nsmallest(over, heap)[-1]

    def mshr_full(self, sm: int, now: int) -> bool:
        heap = self.mshr[sm]
        while heap and heap[0] <= now:
            heapq.heappop(heap)
        return len(heap) >= self.cfg.l1d.mshrs

    def _notify(self, level: HitLevel, block: int, mask: int, is_pm: bool) -> None:
        for fn in self.hit_listeners:
            fn(level, block, mask, is_pm)

    def load(self, sm: int, block: int, mask: int, now: int, target: Target = Target.PM) -> AccessResult:
        self.check_address(block, target)
        t = self.cfg.timing
        is_pm = target is Target.PM
        _, hit = self.l1d[sm].lookup(block, mask)
        if hit:
            self._notify(HitLevel.L1D, block, mask, is_pm)
            done = now + t.l1_hit_cycles
            if is_pm and self.on_pm_complete is not None:
                self.on_pm_complete(now, done)
            return AccessResult(HitLevel.L1D, t.l1_hit_cycles, completion=done)
        start = self._mshr_wait(sm, now)
        arrival, up = self._s2m(sm, start, 0)
        ready = self._l2_enter(block, arrival)
        l2 = self.l2[self.partition_of(block)]
        line, l2hit = l2.lookup(block, mask)
        fetch = sector_mask(mask, self.line, self.cfg.sector_bytes)
        level = HitLevel.L2
        if l2hit:
            self._notify(HitLevel.L2, block, mask, is_pm)
        else:
            level = HitLevel.MEMORY
            missing = fetch & ~(line.valid if line is not None else 0)
            nbytes = bin(missing).count("1")
            ch = self.channel_of(block)
            mem_lat = self.nvm_read if is_pm else self.dram_read
            rs = self.read_port[ch].reserve(ready + t.mc_cycles, max(1, int(nbytes / self.bpc)))
            ready = rs + mem_lat + t.mc_cycles
            line, victim = l2.fill(block, fetch)
            if victim is not None:
                self._write_back(victim, ready)
        done, down = self._m2s(sm, ready, bin(fetch).count("1"))
        self.l1d[sm].fill(block, fetch)
        heapq.heappush(self.mshr[sm], done)
        if is_pm and self.on_pm_complete is not None:
            self.on_pm_complete(now, done)
        return AccessResult(level, done - now, up, down, completion=done)

    def access_temporal(self, sm: int, block: int, mask: int, now: int, *, store: bool = False,
                        values: dict[int, int] | None = None, target: Target = Target.PM,
                        cta: object = None, persist: bool = False) -> AccessResult:
        if not store:
            return self.load(sm, block, mask, now, target)
        return self.store_temporal(sm, block, mask, values or {}, now, target=target, cta=cta, persist=persist)

    def store_temporal(self, sm: int, block: int, mask: int, values: dict[int, int], now: int, *,
                       target: Target = Target.PM, cta: object = None, persist: bool = False,
                       tag: object = None) -> AccessResult:
        """WEWN at L1D (evict on hit, never allocate), WBWA at L2.

        With ``persist`` the block is queued for write-back at the CTA's next
        fence; the store itself is not durable yet.
        """
        self.check_address(block, target)
        is_pm = target is Target.PM
        l1 = self.l1d[sm]
        if l1.probe(block) is not None:
            l1.hits += 1
            self._notify(HitLevel.L1D, block, mask, is_pm)
            l1.invalidate(block)
        else:
            l1.misses += 1
        arrival, up = self._s2m(sm, now, bin(mask).count("1"))
        ready = self._l2_enter(block, arrival)
        l2 = self.l2[self.partition_of(block)]
        if l2.probe(block) is not None:
            l2.hits += 1
            self._notify(HitLevel.L2, block, mask, is_pm)
        else:
            l2.misses += 1
        line, victim = l2.allocate(block)
        if victim is not None:
            self._write_back(victim, ready)
        line.valid |= mask
        line.dirty |= mask
        line.values.update(values)
        if is_pm:
            for off in mask_offsets(mask):
                line.tags[off] = tag
        line.write_time = max(line.write_time, ready)
        if is_pm and persist:
            line.pending.append((now, cta))
            self.pending_clwb.setdefault(cta, {})[block] = None
        return AccessResult(HitLevel.L2, ready - now, up, 0, None, ready)

    def clwb(self, sm: int, block: int, now: int, cta: object = None) -> AccessResult:
        """Write back the dirty bytes of ``block``; the line stays resident and clean."""
        line = self.l2[self.partition_of(block)].probe(block)
        if line is None or not line.dirty:
            return AccessResult(HitLevel.L2, 0, completion=now)
        arrival, up = self._s2m(sm, now, 0)
        ready = max(self._l2_enter(block, arrival), line.write_time)
        durable = self._to_wpq(block, line.dirty, line.values, ready + self.cfg.timing.mc_cycles,
                               line.pending, line.tags)
        self._clean(line)
        self._mark_outstanding(cta, durable)
        return AccessResult(HitLevel.L2, durable - now, up, 0, durable, durable)

    def store_nontemporal(self, sm: int, block: int, mask: int, values: dict[int, int], now: int, *,
                          target: Target = Target.PM, cta: object = None, tag: object = None) -> AccessResult:
        """Bypass both caches straight into the WPQ.

        Bytes of the block still dirty in L2 ride along with the store and the
        L2 copy is cleaned, so a later write-back can never overwrite newer
        data and a queued clwb for the block becomes a no-op.
        """
        if target is not Target.PM:
            raise AddressError("non-temporal path is PM-only in this model")
        self.check_address(block, target)
        arrival, up = self._s2m(sm, now, bin(mask).count("1"))
        pending = [(now, cta)]
        tags = {off: tag for off in mask_offsets(mask)}
        line = self.l2[self.partition_of(block)].probe(block)
        if line is not None and line.dirty:
            merged = dict(line.values)
            merged.update(values)
            values = merged
            old_tags = dict(line.tags)
            old_tags.update(tags)
            tags = old_tags
            mask |= line.dirty
            pending.extend(line.pending)
            arrival = max(arrival, line.write_time)
            self._clean(line)
        if self.cfg.pm.nt_invalidate:
            self.l1d[sm].invalidate(block)
            self.l2[self.partition_of(block)].invalidate(block)
        durable = self._to_wpq(block, mask, values, arrival + self.cfg.timing.mc_cycles, pending, tags)
        return AccessResult(HitLevel.MEMORY, durable - now, up, 0, durable, durable)

    def _mark_outstanding(self, cta: object, durable: int) -> None:
        if durable > self.outstanding.get(cta, -1):
            self.outstanding[cta] = durable

    def flush_pending(self, sm: int, cta: object, now: int) -> None:
        for block in self.pending_clwb.pop(cta, {}):
            self.clwb(sm, block, now, cta)

    def sfence(self, sm: int, cta: object, now: int, *, elide: bool = False) -> int:
        """Persist barrier scoped to one CTA; returns its completion time.

        Queued clwbs are issued first.  With ``elide`` the barrier is skipped
        when every outstanding persist is already accepted before any later
        persist from this CTA could possibly reach the WPQ.
        """
        self.flush_pending(sm, cta, now)
        latest = self.outstanding.pop(cta, None)
        if elide and (latest is None or latest < now + self.min_persist_latency):
            return now
        done = now + self.cfg.timing.fence_cycles
        if latest is not None and latest > done:
            done = latest
        return done

    # ------------------------------------------------------------ queries

    def hit_counts(self) -> dict[str, int]:
        return {
            "l1d_hits": sum(c.hits for c in self.l1d),
            "l1d_misses": sum(c.misses for c in self.l1d),
            "l2_hits": sum(c.hits for c in self.l2),
            "l2_misses": sum(c.misses for c in self.l2),
        }

    def dirty_pm_bytes(self) -> int:
        return sum(bin(line.dirty).count("1") for c in self.l2 for line in c.dirty_lines() if self._is_pm(line.tag))



def latency_depth(level: HitLevel) -> int:
    return _DEPTH[level]


class LocalityView:
    """Shadow tag arrays that see every request as if it took the temporal path.

    AGPM counters are fed from here rather than from the real caches so the
    measured locality does not depend on which path the selector picked.
    ``sink`` receives ``(level, block, mask, hit, is_pm, is_log)`` where
    level is 1 (L1-side buffer) or 2 (L2-side buffer).
    """

    def __init__(self, cfg: HierarchyConfig, sink: Callable[[int, int, int, bool, bool, bool], None]):
        line = cfg.l1d.line_bytes
        self.line = line
        self.partitions = cfg.l2.partitions
        self.l1d = [SectorCache(cfg.l1d.size_kib * 1024, line, cfg.l1d.assoc, cfg.sector_bytes)
                    for _ in range(cfg.sm_count)]
        self.l2 = [SectorCache(cfg.l2.partition_kib * 1024, line, cfg.l2.assoc, cfg.sector_bytes,
                               index_stride=self.partitions) for _ in range(self.partitions)]
        self.sink = sink

    def observe(self, sm: int, store: bool, block: int, mask: int, is_pm: bool, is_log: bool) -> None:
        l1 = self.l1d[sm]
        l2 = self.l2[(block // self.line) % self.partitions]
        if store:
            self.sink(1, block, mask, l1.probe(block) is not None, is_pm, is_log)
            l1.invalidate(block)
            self.sink(2, block, mask, l2.probe(block) is not None, is_pm, is_log)
            line, _ = l2.allocate(block)
            line.valid |= mask
            return
        _, hit = l1.lookup(block, mask, count=False)
        self.sink(1, block, mask, hit, is_pm, is_log)
        if hit:
            return
        l1.fill(block, mask)
        _, hit2 = l2.lookup(block, mask, count=False)
        self.sink(2, block, mask, hit2, is_pm, is_log)
        if not hit2:
            l2.fill(block, mask)
