"""Undo-log transactions, the durable write order, and the crash oracle.

Every transaction owns one flag byte in PM (0 none, 1 inTx, 2 complete)
and a log stream formed by concatenating the bytes of its log stores in
trace order.  The stream holds one record per distinct data element::

    addr (8 B, little endian) | length (4 B) | old bytes | crc32 (4 B)

followed by don't-care padding.  Recovery rolls back every transaction
whose flag reads inTx and leaves the rest alone.
"""

from __future__ import annotations

import enum
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

FLAG_NONE = 0
FLAG_INTX = 1
FLAG_COMPLETE = 2

_HEADER = struct.Struct("<QI")


class UnrecoverableLog(RuntimeError):
    def __init__(self, key: tuple[int, int, int], record: int, detail: str = ""):
        self.key = key
        self.record = record
        super().__init__(f"unrecoverable log: tx {key} record {record} {detail}".rstrip())


class ProtocolViolation(RuntimeError):
    def __init__(self, index: int, detail: str):
        self.index = index
        super().__init__(f"protocol violation at event {index}: {detail}")


class Source(str, enum.Enum):
    LOG = "Log"
    DATA = "Data"
    FLAG = "Flag"


class Phase(str, enum.Enum):
    LOGGING = "LoggingPhase"
    INTX = "InTx"
    COMPLETING = "Completing"
    COMPLETE = "Complete"


_ORDER = {Phase.LOGGING: 0, Phase.INTX: 1, Phase.COMPLETING: 2, Phase.COMPLETE: 3}


@dataclass
class TxState:
    tx_id: int
    cta_id: int
    kernel_id: int
    flag_addr: int
    phase: Phase = Phase.LOGGING
    log_entries: list[tuple[int, bytes]] = field(default_factory=list)
    phase_times: dict[str, int] = field(default_factory=dict)

    def advance(self, phase: Phase, at: int) -> None:
        if _ORDER[phase] < _ORDER[self.phase]:
            raise ProtocolViolation(-1, f"tx {self.tx_id} phase {self.phase.value} -> {phase.value}")
        self.phase = phase
        self.phase_times[phase.value] = at


# ---------------------------------------------------------------- records


def encode_records(elements: Sequence[tuple[int, int]], old: Callable[[int], int]) -> bytes:
    out = bytearray()
    for addr, size in elements:
        body = _HEADER.pack(addr, size) + bytes(old(a) for a in range(addr, addr + size))
        out += body + struct.pack("<I", zlib.crc32(body))
    return bytes(out)


def decode_records(stream: bytes, count: int, key=(0, 0, 0)) -> list[tuple[int, bytes]]:
    out = []
    pos = 0
    for i in range(count):
        if pos + _HEADER.size > len(stream):
            raise UnrecoverableLog(key, i, "truncated")
        addr, size = _HEADER.unpack_from(stream, pos)
        end = pos + _HEADER.size + size
        if size > 16 or end + 4 > len(stream):
            raise UnrecoverableLog(key, i, "bad length")
        body = stream[pos:end]
        (crc,) = struct.unpack_from("<I", stream, end)
        if zlib.crc32(body) != crc:
            raise UnrecoverableLog(key, i, "checksum mismatch")
        out.append((addr, bytes(body[_HEADER.size:])))
        pos = end + 4
    return out


# ---------------------------------------------------------------- image


class PMImage:
    """Byte values over a fixed set of tracked PM addresses."""

    __slots__ = ("slots", "data", "addrs")

    def __init__(self, slots: dict[int, int], data: np.ndarray, addrs: np.ndarray | None = None):
        self.slots = slots
        self.data = data
        if addrs is None:
            addrs = np.fromiter(slots, dtype=np.int64, count=len(slots))
        self.addrs = addrs

    @classmethod
    def build(cls, addrs: Iterable[int], initial: Callable[[int], int]) -> "PMImage":
        ordered = sorted(set(addrs))
        data = np.fromiter((initial(a) for a in ordered), dtype=np.uint8, count=len(ordered))
        return cls.from_arrays(np.asarray(ordered, dtype=np.int64), data)

    @classmethod
    def from_arrays(cls, addrs: np.ndarray, data: np.ndarray) -> "PMImage":
        """``addrs`` must be sorted and unique."""
        slots = dict(zip(addrs.tolist(), range(len(addrs))))
        return cls(slots, np.asarray(data, dtype=np.uint8), addrs)

    def copy(self) -> "PMImage":
        return PMImage(self.slots, self.data.copy(), self.addrs)

    def slot_array(self, addrs: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.addrs, addrs)
        if len(idx) and (idx.max() >= len(self.addrs) or not np.array_equal(self.addrs[idx], addrs)):
            raise KeyError("address outside the tracked image")
        return idx

    def __getitem__(self, addr: int) -> int:
        return int(self.data[self.slots[addr]])

    def __setitem__(self, addr: int, value: int) -> None:
        self.data[self.slots[addr]] = value

    def read(self, addrs: Iterable[int]) -> bytes:
        idx = np.fromiter(map(self.slots.__getitem__, addrs), dtype=np.int64)
        return self.data[idx].tobytes()

    def write(self, addr: int, values: bytes) -> None:
        n = len(values)
        if not n:
            return
        i = self.slots[addr]
        # addresses are sorted and unique, so a fully tracked run is contiguous
        if i + n <= len(self.addrs) and self.addrs[i + n - 1] == addr + n - 1:
            self.data[i:i + n] = np.frombuffer(values, dtype=np.uint8)
            return
        for k, v in enumerate(values):
            self.data[self.slots[addr + k]] = v

    def __eq__(self, other) -> bool:
        return isinstance(other, PMImage) and self.slots == other.slots and np.array_equal(self.data, other.data)

    def __len__(self) -> int:
        return len(self.slots)

    def as_dict(self) -> dict[int, int]:
        return {a: int(self.data[i]) for a, i in self.slots.items()}


@dataclass(frozen=True)
class PersistRecord:
    time: int
    seq: int
    block: int
    mask: int
    values: tuple[tuple[int, int], ...]
    source: Source
    tags: tuple = ()

    def items(self):
        for off, v in self.values:
            yield self.block + off, v


@dataclass
class TxLayout:
    """Where one transaction's flag and log live, plus its data effect."""

    kernel_id: int
    cta_id: int
    tx_id: int
    order: int  # position among the CTA's transactions
    flag_addr: int
    log_stream: tuple[int, ...]  # PM byte addresses of the log stream, in stream order
    elements: tuple[tuple[int, int], ...]
    pre: dict[int, int] = field(default_factory=dict)
    post: dict[int, int] = field(default_factory=dict)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.kernel_id, self.cta_id, self.tx_id)

    @property
    def n_records(self) -> int:
        return len(self.elements)


class PersistTrace:
    """Durable writes in acceptance order, with the pre-run image they apply to."""

    def __init__(self, records: Iterable[PersistRecord], pre: PMImage, layouts: Sequence[TxLayout] = ()):
        self.records = sorted(records, key=lambda r: (r.time, r.seq))
        self.pre = pre
        self.layouts = list(layouts)
        counts = [len(r.values) for r in self.records]
        flat_a = np.fromiter((r.block + off for r in self.records for off, _ in r.values), dtype=np.int64,
                             count=sum(counts))
        flat_v = np.fromiter((v for r in self.records for _, v in r.values), dtype=np.uint8, count=len(flat_a))
        flat_i = pre.slot_array(flat_a)
        cuts = np.cumsum(counts)[:-1] if counts else []
        self._slot_arrays = list(zip(np.split(flat_i, cuts), np.split(flat_v, cuts))) if counts else []

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> PersistRecord:
        return self.records[i]

    def apply(self, image: PMImage, start: int, stop: int) -> None:
        for idx, vals in self._slot_arrays[start:stop]:
            image.data[idx] = vals

    def final(self) -> PMImage:
        return crash_at(self, len(self))

    def indices(self, source: Source, addrs: set[int] | None = None) -> list[int]:
        out = []
        for i, r in enumerate(self.records):
            if r.source is source and (addrs is None or any(a in addrs for a, _ in r.items())):
                out.append(i)
        return out


def crash_at(pt: PersistTrace, point: int) -> PMImage:
    """Image holding exactly the first ``point`` durable writes."""
    if not 0 <= point <= len(pt):
        raise IndexError(f"crash point {point} outside 0..{len(pt)}")
    image = pt.pre.copy()
    pt.apply(image, 0, point)
    return image


def crash_images(pt: PersistTrace, points: Iterable[int]) -> Iterator[tuple[int, PMImage]]:
    """Incremental crash_at over ascending points; yields private copies."""
    image = pt.pre.copy()
    done = 0
    for p in sorted(set(points)):
        if not 0 <= p <= len(pt):
            raise IndexError(f"crash point {p} outside 0..{len(pt)}")
        pt.apply(image, done, p)
        done = p
        yield p, image.copy()


def recover(image: PMImage, layouts: Sequence[TxLayout]) -> PMImage:
    """Roll back every transaction caught inTx; idempotent."""
    out = image.copy()
    for lay in layouts:
        if out[lay.flag_addr] != FLAG_INTX:
            continue
        stream = out.read(lay.log_stream)
        records = decode_records(stream, lay.n_records, lay.key)
        for addr, old in reversed(records):
            out.write(addr, old)
        out[lay.flag_addr] = FLAG_NONE
    return out


@dataclass
class AtomicityReport:
    ok: bool
    violations: list[dict] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class _CtaPlan:
    kernel_id: int
    cta_id: int
    txs: list[TxLayout]
    foot: list[int]
    idx: np.ndarray  # image slots of the footprint
    updates: list[tuple[np.ndarray, np.ndarray]]  # per tx: footprint positions, new bytes


class AtomicityChecker:
    """Each CTA's data must equal ``pre`` plus the effects of some prefix of its transactions.

    Kernels are checked in order; the state a kernel starts from is the
    state accepted for the kernels before it. The footprint bookkeeping
    depends only on ``pre`` and the layouts, so it is built once and reused
    across crash images.
    """

    def __init__(self, pre: PMImage, layouts: Sequence[TxLayout]):
        self.pre = pre
        by_kernel: dict[int, dict[int, list[TxLayout]]] = defaultdict(lambda: defaultdict(list))
        kernel_order: list[int] = []
        for lay in layouts:
            if lay.kernel_id not in by_kernel:
                kernel_order.append(lay.kernel_id)
            by_kernel[lay.kernel_id][lay.cta_id].append(lay)
        self.plans: list[_CtaPlan] = []
        for kid in kernel_order:
            for cta, txs in sorted(by_kernel[kid].items()):
                txs = sorted(txs, key=lambda t: t.order)
                foot = sorted({a for t in txs for a in t.post})
                if not foot:
                    continue
                pos = {a: i for i, a in enumerate(foot)}
                idx = np.fromiter((pre.slots[a] for a in foot), dtype=np.int64, count=len(foot))
                updates = []
                for t in txs:
                    p = np.fromiter((pos[a] for a in t.post), dtype=np.int64, count=len(t.post))
                    v = np.fromiter(t.post.values(), dtype=np.uint8, count=len(t.post))
                    updates.append((p, v))
                self.plans.append(_CtaPlan(kid, cta, txs, foot, idx, updates))

    def check(self, recovered: PMImage) -> AtomicityReport:
        state = self.pre.data.copy()
        actual = recovered.data
        violations = []
        for plan in self.plans:
            idx, updates = plan.idx, plan.updates
            cur = state[idx]
            got = actual[idx]
            if np.array_equal(cur, got):
                continue  # empty prefix; state already matches
            miss = int(np.count_nonzero(cur != got))
            best_k, best_miss = 0, miss
            for k, (p, v) in enumerate(updates, start=1):
                miss -= int(np.count_nonzero(cur[p] != got[p]))
                cur[p] = v
                miss += int(np.count_nonzero(cur[p] != got[p]))
                if miss < best_miss or (miss == 0 and best_miss == 0):
                    best_k, best_miss = k, miss
            if best_miss == 0:
                # adopt the matched prefix; equals the recovered bytes on this footprint
                state[idx] = got
                continue
            violations.append(self._violation(plan, state[idx], got, best_k, best_miss))
            state[idx] = got
        return AtomicityReport(not violations, violations)

    @staticmethod
    def _violation(plan: _CtaPlan, start: np.ndarray, got: np.ndarray, best_k: int, best_miss: int) -> dict:
        txs = plan.txs
        torn = txs[min(best_k, len(txs) - 1)]
        before = start.copy()
        for p, v in plan.updates[:best_k]:
            before[p] = v
        pos = {a: i for i, a in enumerate(plan.foot)}
        entries = []
        for a in sorted(torn.post):
            i = pos[a]
            entries.append({
                "addr": a,
                "expected_before": int(before[i]),
                "expected_after": int(torn.post[a]),
                "actual": int(got[i]),
            })
        return {
            "kernel": plan.kernel_id,
            "cta": plan.cta_id,
            "tx": torn.tx_id,
            "committed_prefix": best_k,
            "mismatched_bytes": best_miss,
            "addresses": entries,
        }


def check_atomicity(pre: PMImage, recovered: PMImage, layouts: Sequence[TxLayout]) -> AtomicityReport:
    """One-shot form of ``AtomicityChecker``; sweeps should build the checker once."""
    return AtomicityChecker(pre, layouts).check(recovered)


# ---------------------------------------------------------------- single transaction


def run_transaction(events: Sequence, strategy="temporal", config=None, *, seed: int = 0,
                    shared_memory: bool = False) -> tuple[TxState, PersistTrace]:
    """Simulate one CTA transaction (TXB .. TXC, fences/barriers allowed) on a fresh hierarchy.

    ``config`` is a SimConfig (defaults apply when None).  Raises
    ProtocolViolation, naming the event index, when the events break the
    undo-log order.
    """
    from .engine import simulate
    from .trace import EventKind, KernelMeta, Trace, TraceEvent, validate

    events = list(events)
    if not events or events[0].kind is not EventKind.TX_BEGIN or events[-1].kind is not EventKind.TX_COMMIT:
        raise ProtocolViolation(0, "expected one transaction, TXB first and TXC last")
    kid, cta = events[0].kernel_id, events[0].cta_id
    for i, ev in enumerate(events):
        if ev.kernel_id != kid or ev.cta_id != cta:
            raise ProtocolViolation(i, "events span more than one CTA")
    trace = Trace(
        (KernelMeta(kid, "tx", shared_memory, cta + 1),),
        (TraceEvent(EventKind.KERNEL_BEGIN, kid), *events, TraceEvent(EventKind.KERNEL_END, kid)),
    )
    bad = validate(trace)
    if bad:
        v = bad[0]
        raise ProtocolViolation(max(0, v.index - 1), f"{v.rule} {v.detail}".strip())
    result = simulate(trace, config, strategy, seed=seed)
    return result.tx_states[0], result.persist


# ---------------------------------------------------------------- ordering checks


def ordering_violations(pt: PersistTrace) -> list[str]:
    """Log-before-data and flag ordering, asserted on the persist order.

    Uses the per-byte provenance tags ``(kernel, cta, tx, kind)`` carried by
    each record, kind being one of log, data, intx, complete.
    """
    seen: dict[tuple[int, int, int], dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for i, r in enumerate(pt.records):
        for tag in set(r.tags):
            if tag is not None:
                seen[tag[:3]][tag[3]].append(i)
    errs = []
    for key, kinds in sorted(seen.items()):
        logs, data = kinds.get("log", []), kinds.get("data", [])
        intx, done = kinds.get("intx", []), kinds.get("complete", [])
        if logs and data and max(logs) >= min(data):
            errs.append(f"tx {key}: log persist {max(logs)} not before data persist {min(data)}")
        if logs and intx and max(logs) >= min(intx):
            errs.append(f"tx {key}: log persist {max(logs)} not before flag=inTx {min(intx)}")
        if data and (not intx or min(intx) >= min(data)):
            errs.append(f"tx {key}: data persisted before flag=inTx")
        if data and done and max(data) >= min(done):
            errs.append(f"tx {key}: data persist {max(data)} not before flag=complete {min(done)}")
        if intx and done and max(intx) >= min(done):
            errs.append(f"tx {key}: flag=complete precedes flag=inTx")
    return errs
