"""Workload trace model, text format, validation and warp coalescing.

Trace files are line oriented::

    TRCv1
    K 0 BEGIN shared=0 ctas=1
    TXB 0 0 0
    MEM 0 0 0 ST log pm tx=0 0x110000000:8,0x110000008:8
    FEN 0 0
    SYN 0 0
    MEM 0 0 0 ST data pm tx=0 0x100000000:4
    TXC 0 0 0
    K 0 END

``K ... BEGIN`` also accepts optional ``warp=<n>``, ``name=<str>`` and
``logs=<n>`` (expected log-update count, used to size the first AGPM
period of small kernels).
"""

from __future__ import annotations

import enum
import io
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

HEADER = "TRCv1"

# serialized undo record = target address (8) + length (4) + old bytes + crc32 (4)
LOG_RECORD_OVERHEAD = 16


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class EventKind(enum.Enum):
    KERNEL_BEGIN = "KernelBegin"
    KERNEL_END = "KernelEnd"
    TX_BEGIN = "TxBegin"
    TX_COMMIT = "TxCommit"
    FENCE = "Fence"
    SYNC_THREADS = "SyncThreads"
    MEM = "MemInstr"


class Op(enum.Enum):
    LOAD = "LD"
    STORE = "ST"


class Role(enum.Enum):
    LOG = "log"
    DATA = "data"
    PLAIN = "plain"


class Target(enum.Enum):
    PM = "pm"
    DRAM = "dram"


@dataclass(frozen=True)
class KernelMeta:
    kernel_id: int
    name: str = ""
    uses_shared_memory: bool = False
    cta_count: int = 1
    warp_size: int = 32
    expected_logs: int | None = None


@dataclass(frozen=True)
class MemInstr:
    op: Op
    role: Role
    warp_id: int
    thread_addrs: tuple[tuple[int, int], ...]
    target: Target = Target.PM

    @property
    def is_persistent_store(self) -> bool:
        return self.op is Op.STORE and self.target is Target.PM


@dataclass(frozen=True)
class TraceEvent:
    kind: EventKind
    kernel_id: int
    cta_id: int | None = None
    tx_id: int | None = None
    instr: MemInstr | None = None


@dataclass(frozen=True)
class Trace:
    kernels: tuple[KernelMeta, ...]
    events: tuple[TraceEvent, ...]

    def kernel(self, kernel_id: int) -> KernelMeta:
        for k in self.kernels:
            if k.kernel_id == kernel_id:
                return k
        raise KeyError(kernel_id)

    @property
    def mem_count(self) -> int:
        return sum(1 for e in self.events if e.kind is EventKind.MEM)


@dataclass(frozen=True)
class CoalescedInstr:
    source: MemInstr
    transactions: tuple[tuple[int, int], ...]  # (segment address, byte mask)

    @property
    def degree(self) -> int:
        return len(self.transactions)


def coalesce(instr: MemInstr, segment_bytes: int = 128) -> CoalescedInstr:
    """Group a warp's thread accesses into aligned segment transactions.

    Masks are ints with bit ``i`` set when byte ``segment + i`` is
    requested. Accesses straddling a segment boundary are split.
    """
    masks: dict[int, int] = {}
    for addr, size in instr.thread_addrs:
        end = addr + size
        while addr < end:
            seg = addr - addr % segment_bytes
            stop = min(end, seg + segment_bytes)
            bits = ((1 << (stop - addr)) - 1) << (addr - seg)
            masks[seg] = masks.get(seg, 0) | bits
            addr = stop
    return CoalescedInstr(instr, tuple(sorted(masks.items())))


def iter_bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


@lru_cache(maxsize=1 << 16)
def mask_offsets(mask: int) -> tuple[int, ...]:
    """Set bit positions of a byte mask, ascending (memoised: masks repeat a lot)."""
    return tuple(iter_bits(mask))


# ---------------------------------------------------------------- parsing


def _parse_int(tok: str, line: int, col: int, what: str, base: int = 10) -> int:
    try:
        value = int(tok, base)
    except ValueError:
        raise TraceError(f"bad {what} {tok!r}", line, col) from None
    if value < 0:
        raise TraceError(f"negative {what} {tok!r}", line, col)
    return value


def _parse_accesses(tok: str, line: int, col: int) -> tuple[tuple[int, int], ...]:
    out = []
    for part in tok.split(","):
        if ":" not in part:
            raise TraceError(f"expected <addr>:<size>, got {part!r}", line, col)
        a, s = part.split(":", 1)
        addr = _parse_int(a, line, col, "address", 16)
        size = _parse_int(s, line, col, "access size")
        if size not in (1, 2, 4, 8, 16):
            raise TraceError(f"access size {size} is not a power of two in 1..16", line, col)
        out.append((addr, size))
        col += len(part) + 1
    return tuple(out)


def _options(tokens: list[str], cols: list[int], line: int) -> dict[str, tuple[str, int]]:
    opts = {}
    for tok, col in zip(tokens, cols):
        if "=" not in tok:
            raise TraceError(f"expected key=value, got {tok!r}", line, col)
        k, v = tok.split("=", 1)
        opts[k] = (v, col)
    return opts


def _tokenize(raw: str) -> tuple[list[str], list[int]]:
    tokens, cols = [], []
    i = 0
    while i < len(raw):
        if raw[i].isspace():
            i += 1
            continue
        j = i
        while j < len(raw) and not raw[j].isspace():
            j += 1
        tokens.append(raw[i:j])
        cols.append(i + 1)
        i = j
    return tokens, cols


def parse_trace(stream: str | bytes | TextIO) -> Trace:
    """Parse and structurally check a trace.

    Raises :class:`TraceError` with line/column for malformed lines,
    unbalanced TXB/TXC pairs and memory events outside a kernel.
    Protocol-level rules are left to :func:`validate`.
    """
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    kernels: dict[int, KernelMeta] = {}
    events: list[TraceEvent] = []
    open_kernel: int | None = None
    open_tx: dict[tuple[int, int], tuple[int, int]] = {}  # (kid, cta) -> (tx, line)
    seen_header = False

    for lineno, raw in enumerate(stream, start=1):
        text = raw.split("#", 1)[0].rstrip("\n")
        tokens, cols = _tokenize(text)
        if not tokens:
            continue
        if not seen_header:
            if tokens != [HEADER]:
                raise TraceError(f"missing {HEADER} header", lineno, cols[0])
            seen_header = True
            continue
        head = tokens[0]

        def need(n: int) -> None:
            if len(tokens) < n:
                raise TraceError(f"{head} expects at least {n - 1} fields", lineno, len(text) + 1)

        if head == "K":
            need(3)
            kid = _parse_int(tokens[1], lineno, cols[1], "kernel id")
            verb = tokens[2]
            if verb == "BEGIN":
                if open_kernel is not None:
                    raise TraceError(f"kernel {kid} begins inside kernel {open_kernel}", lineno, cols[0])
                if kid in kernels:
                    raise TraceError(f"duplicate kernel id {kid}", lineno, cols[1])
                opts = _options(tokens[3:], cols[3:], lineno)
                unknown = set(opts) - {"shared", "ctas", "warp", "name", "logs"}
                if unknown:
                    key = sorted(unknown)[0]
                    raise TraceError(f"unknown kernel option {key!r}", lineno, opts[key][1])
                for req in ("shared", "ctas"):
                    if req not in opts:
                        raise TraceError(f"kernel BEGIN missing {req}=", lineno, len(text) + 1)
                shared_v, shared_c = opts["shared"]
                if shared_v not in ("0", "1"):
                    raise TraceError("shared= must be 0 or 1", lineno, shared_c)
                ctas = _parse_int(opts["ctas"][0], lineno, opts["ctas"][1], "cta count")
                warp = 32
                if "warp" in opts:
                    warp = _parse_int(opts["warp"][0], lineno, opts["warp"][1], "warp size")
                if ctas < 1 or warp < 1:
                    raise TraceError("ctas and warp must be positive", lineno, cols[3])
                logs = None
                if "logs" in opts:
                    logs = _parse_int(opts["logs"][0], lineno, opts["logs"][1], "log hint")
                kernels[kid] = KernelMeta(
                    kid, opts.get("name", ("", 0))[0], shared_v == "1", ctas, warp, logs
                )
                open_kernel = kid
                events.append(TraceEvent(EventKind.KERNEL_BEGIN, kid))
            elif verb == "END":
                if open_kernel != kid:
                    raise TraceError(f"END for kernel {kid} which is not open", lineno, cols[1])
                for (k, cta), (tx, txline) in sorted(open_tx.items()):
                    if k == kid:
                        raise TraceError(
                            f"unterminated transaction {tx} of cta {cta} (opened at line {txline})",
                            lineno,
                            cols[0],
                        )
                open_kernel = None
                events.append(TraceEvent(EventKind.KERNEL_END, kid))
            else:
                raise TraceError(f"expected BEGIN or END, got {verb!r}", lineno, cols[2])
            continue

        if head not in ("TXB", "TXC", "FEN", "SYN", "MEM"):
            raise TraceError(f"unknown record {head!r}", lineno, cols[0])
        need(3)
        kid = _parse_int(tokens[1], lineno, cols[1], "kernel id")
        cta = _parse_int(tokens[2], lineno, cols[2], "cta id")
        if open_kernel is None:
            raise TraceError(f"{head} outside any kernel", lineno, cols[0])
        if kid != open_kernel:
            raise TraceError(f"{head} names kernel {kid} but kernel {open_kernel} is open", lineno, cols[1])
        if cta >= kernels[kid].cta_count:
            raise TraceError(f"cta {cta} out of range for kernel {kid}", lineno, cols[2])

        if head in ("TXB", "TXC"):
            need(4)
            if len(tokens) > 4:
                raise TraceError("trailing fields", lineno, cols[4])
            tx = _parse_int(tokens[3], lineno, cols[3], "tx id")
            key = (kid, cta)
            if head == "TXB":
                if key in open_tx:
                    raise TraceError(
                        f"transaction {tx} begins while {open_tx[key][0]} is open in cta {cta}",
                        lineno,
                        cols[0],
                    )
                open_tx[key] = (tx, lineno)
                events.append(TraceEvent(EventKind.TX_BEGIN, kid, cta, tx))
            else:
                if open_tx.get(key, (None,))[0] != tx:
                    raise TraceError(f"commit of transaction {tx} which is not open", lineno, cols[3])
                del open_tx[key]
                events.append(TraceEvent(EventKind.TX_COMMIT, kid, cta, tx))
        elif head in ("FEN", "SYN"):
            if len(tokens) > 3:
                raise TraceError("trailing fields", lineno, cols[3])
            kind = EventKind.FENCE if head == "FEN" else EventKind.SYNC_THREADS
            events.append(TraceEvent(kind, kid, cta, open_tx.get((kid, cta), (None,))[0]))
        else:
            need(8)
            warp = _parse_int(tokens[3], lineno, cols[3], "warp id")
            try:
                op = Op(tokens[4])
            except ValueError:
                raise TraceError(f"bad op {tokens[4]!r}", lineno, cols[4]) from None
            try:
                role = Role(tokens[5])
            except ValueError:
                raise TraceError(f"bad role {tokens[5]!r}", lineno, cols[5]) from None
            try:
                target = Target(tokens[6])
            except ValueError:
                raise TraceError(f"bad target {tokens[6]!r}", lineno, cols[6]) from None
            rest, rest_cols = tokens[7:], cols[7:]
            tx = None
            if rest[0].startswith("tx="):
                tx = _parse_int(rest[0][3:], lineno, rest_cols[0] + 3, "tx id")
                rest, rest_cols = rest[1:], rest_cols[1:]
                current = open_tx.get((kid, cta), (None,))[0]
                if current != tx:
                    raise TraceError(
                        f"memory event tagged tx={tx} outside that transaction", lineno, rest_cols[0] - 3
                    )
            if len(rest) != 1:
                raise TraceError("expected one access list", lineno, rest_cols[0] if rest_cols else len(text) + 1)
            accesses = _parse_accesses(rest[0], lineno, rest_cols[0])
            instr = MemInstr(op, role, warp, accesses, target)
            events.append(TraceEvent(EventKind.MEM, kid, cta, tx, instr))

    if not seen_header:
        raise TraceError(f"missing {HEADER} header", 1, 1)
    if open_kernel is not None:
        raise TraceError(f"kernel {open_kernel} never ends")
    return Trace(tuple(kernels.values()), tuple(events))


def read_trace(path) -> Trace:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


# ---------------------------------------------------------------- writing


def _format_event(ev: TraceEvent, kernels: dict[int, KernelMeta]) -> str:
    k = ev.kind
    if k is EventKind.KERNEL_BEGIN:
        meta = kernels[ev.kernel_id]
        parts = [f"K {meta.kernel_id} BEGIN shared={int(meta.uses_shared_memory)} ctas={meta.cta_count}"]
        if meta.warp_size != 32:
            parts.append(f"warp={meta.warp_size}")
        if meta.name:
            parts.append(f"name={meta.name}")
        if meta.expected_logs is not None:
            parts.append(f"logs={meta.expected_logs}")
        return " ".join(parts)
    if k is EventKind.KERNEL_END:
        return f"K {ev.kernel_id} END"
    if k is EventKind.TX_BEGIN:
        return f"TXB {ev.kernel_id} {ev.cta_id} {ev.tx_id}"
    if k is EventKind.TX_COMMIT:
        return f"TXC {ev.kernel_id} {ev.cta_id} {ev.tx_id}"
    if k is EventKind.FENCE:
        return f"FEN {ev.kernel_id} {ev.cta_id}"
    if k is EventKind.SYNC_THREADS:
        return f"SYN {ev.kernel_id} {ev.cta_id}"
    m = ev.instr
    tx = f" tx={ev.tx_id}" if ev.tx_id is not None else ""
    acc = ",".join(f"{a:#x}:{s}" for a, s in m.thread_addrs)
    return (
        f"MEM {ev.kernel_id} {ev.cta_id} {m.warp_id} {m.op.value} {m.role.value} "
        f"{m.target.value}{tx} {acc}"
    )


def serialize(trace: Trace) -> str:
    kernels = {k.kernel_id: k for k in trace.kernels}
    lines = [HEADER]
    lines.extend(_format_event(e, kernels) for e in trace.events)
    return "\n".join(lines) + "\n"


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(trace))


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    index: int
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"event {self.index}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class TxFootprint:
    """Static view of one transaction: what it logs and where the log goes."""

    kernel_id: int
    cta_id: int
    tx_id: int
    begin_index: int
    commit_index: int | None = None
    # distinct (addr, size) data elements in first-write order
    elements: list[tuple[int, int]] = field(default_factory=list)
    element_first_write: list[int] = field(default_factory=list)
    # log stream: byte addresses in write order, with the event that writes each
    log_bytes: list[int] = field(default_factory=list)
    log_byte_event: list[int] = field(default_factory=list)
    data_events: list[int] = field(default_factory=list)
    log_events: list[int] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.kernel_id, self.cta_id, self.tx_id)

    @property
    def record_bytes(self) -> int:
        return sum(LOG_RECORD_OVERHEAD + size for _, size in self.elements)

    def record_spans(self) -> list[tuple[int, int]]:
        spans, off = [], 0
        for _, size in self.elements:
            n = LOG_RECORD_OVERHEAD + size
            spans.append((off, off + n))
            off += n
        return spans


def _cached(trace: Trace, name: str, build):
    # traces are immutable, so derived views are memoised on the instance
    cache = trace.__dict__.get("_derived")
    if cache is None:
        cache = {}
        object.__setattr__(trace, "_derived", cache)
    if name not in cache:
        cache[name] = build(trace)
    return cache[name]


def tx_footprints(trace: Trace) -> list[TxFootprint]:
    """Per-transaction footprints in TX_BEGIN order (shared; treat as read-only)."""
    return _cached(trace, "footprints", _tx_footprints)


def _tx_footprints(trace: Trace) -> list[TxFootprint]:
    out: list[TxFootprint] = []
    open_tx: dict[tuple[int, int], TxFootprint] = {}
    for i, ev in enumerate(trace.events):
        if ev.kind is EventKind.TX_BEGIN:
            fp = TxFootprint(ev.kernel_id, ev.cta_id, ev.tx_id, i)
            open_tx[(ev.kernel_id, ev.cta_id)] = fp
            out.append(fp)
        elif ev.kind is EventKind.TX_COMMIT:
            fp = open_tx.pop((ev.kernel_id, ev.cta_id), None)
            if fp is not None:
                fp.commit_index = i
        elif ev.kind is EventKind.MEM and ev.tx_id is not None:
            fp = open_tx.get((ev.kernel_id, ev.cta_id))
            if fp is None or fp.tx_id != ev.tx_id:
                continue
            m = ev.instr
            if m.role is Role.LOG:
                fp.log_events.append(i)
                for addr, size in m.thread_addrs:
                    fp.log_bytes.extend(range(addr, addr + size))
                fp.log_byte_event.extend([i] * (len(fp.log_bytes) - len(fp.log_byte_event)))
            elif m.role is Role.DATA:
                fp.data_events.append(i)
                seen = set(fp.elements)
                for acc in m.thread_addrs:
                    if acc not in seen:
                        seen.add(acc)
                        fp.elements.append(acc)
                        fp.element_first_write.append(i)
    return out


def validate(trace: Trace) -> list[Violation]:
    """Return every protocol/type violation; empty iff the trace is well formed."""
    return list(_cached(trace, "violations", _validate))


def _validate(trace: Trace) -> list[Violation]:
    v: list[Violation] = []
    kernels = {}
    for idx, ev in enumerate(trace.events):
        if ev.kind is EventKind.KERNEL_BEGIN:
            if ev.kernel_id in kernels:
                v.append(Violation(idx, "duplicate kernel id", str(ev.kernel_id)))
            kernels[ev.kernel_id] = idx
    metas = {k.kernel_id: k for k in trace.kernels}

    open_kernel = None
    open_tx: dict[tuple[int, int], int] = {}
    for idx, ev in enumerate(trace.events):
        k = ev.kind
        if k is EventKind.KERNEL_BEGIN:
            open_kernel = ev.kernel_id
            continue
        if k is EventKind.KERNEL_END:
            for (kid, cta), tx in sorted(open_tx.items()):
                if kid == ev.kernel_id:
                    v.append(Violation(idx, "unterminated transaction", f"cta {cta} tx {tx}"))
            open_tx = {key: tx for key, tx in open_tx.items() if key[0] != ev.kernel_id}
            open_kernel = None
            continue
        if open_kernel is None or ev.kernel_id != open_kernel:
            v.append(Violation(idx, "event outside kernel"))
            continue
        meta = metas.get(ev.kernel_id)
        if meta is not None and ev.cta_id is not None and ev.cta_id >= meta.cta_count:
            v.append(Violation(idx, "cta out of range", str(ev.cta_id)))
        key = (ev.kernel_id, ev.cta_id)
        if k is EventKind.TX_BEGIN:
            if key in open_tx:
                v.append(Violation(idx, "nested transaction", f"tx {ev.tx_id} inside {open_tx[key]}"))
            open_tx[key] = ev.tx_id
        elif k is EventKind.TX_COMMIT:
            if open_tx.get(key) != ev.tx_id:
                v.append(Violation(idx, "commit without begin", f"tx {ev.tx_id}"))
            else:
                del open_tx[key]
        elif k is EventKind.MEM:
            m = ev.instr
            if ev.tx_id is not None and open_tx.get(key) != ev.tx_id:
                v.append(Violation(idx, "memory event outside its transaction", f"tx {ev.tx_id}"))
            if m.role is not Role.PLAIN:
                if m.target is not Target.PM:
                    v.append(Violation(idx, f"{m.role.value} must target PM"))
                if m.op is not Op.STORE:
                    v.append(Violation(idx, f"{m.role.value} update must be a store"))
                if ev.tx_id is None:
                    v.append(Violation(idx, f"{m.role.value} update outside a transaction"))
            if not m.thread_addrs:
                v.append(Violation(idx, "memory instruction without active threads"))
            if meta is not None and len(m.thread_addrs) > meta.warp_size:
                v.append(Violation(idx, "more accesses than warp threads"))
            for _, size in m.thread_addrs:
                if size not in (1, 2, 4, 8, 16):
                    v.append(Violation(idx, "access size not a power of two in 1..16", str(size)))
    if open_kernel is not None:
        v.append(Violation(len(trace.events), "kernel never ends", str(open_kernel)))

    v.extend(_protocol_violations(trace))
    v.sort(key=lambda x: (x.index, x.rule))
    return v


def _expand(spans: list[tuple[int, int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """(addr, size, tag) spans -> per-byte address and tag arrays."""
    if not spans:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.asarray(spans, dtype=np.int64)
    sizes = arr[:, 1]
    starts = np.repeat(arr[:, 0], sizes)
    offs = np.arange(int(sizes.sum()), dtype=np.int64) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    return starts + offs, np.repeat(arr[:, 2], sizes)


def _protocol_violations(trace: Trace) -> list[Violation]:
    v: list[Violation] = []
    log_spans: list[tuple[int, int, int]] = []
    data_spans: list[tuple[int, int, int]] = []
    events = trace.events
    for fp in tx_footprints(trace):
        # all logs precede all data inside a transaction (flag=inTx sits between them)
        if fp.data_events and fp.log_events and fp.log_events[-1] > fp.data_events[0]:
            v.append(Violation(fp.log_events[-1], "log after data", f"tx {fp.tx_id} cta {fp.cta_id}"))
        if len(set(fp.log_bytes)) != len(fp.log_bytes):
            seen = set()
            for b, ev in zip(fp.log_bytes, fp.log_byte_event):
                if b in seen:
                    v.append(Violation(ev, "log bytes rewritten within tx", hex(b)))
                    break
                seen.add(b)
        spans = fp.record_spans()
        if fp.elements and len(fp.log_bytes) < fp.record_bytes:
            v.append(
                Violation(
                    fp.begin_index,
                    "log too small",
                    f"tx {fp.tx_id} needs {fp.record_bytes} log bytes, has {len(fp.log_bytes)}",
                )
            )
        for (addr, size), first, (_, end) in zip(fp.elements, fp.element_first_write, spans):
            if end > len(fp.log_bytes) or fp.log_byte_event[end - 1] > first:
                v.append(Violation(first, "data precedes log", f"{addr:#x}:{size} in tx {fp.tx_id}"))
        for ev in fp.log_events:
            log_spans.extend((a, s, ev) for a, s in events[ev].instr.thread_addrs)
        for ev in fp.data_events:
            data_spans.extend((a, s, ev) for a, s in events[ev].instr.thread_addrs)
    log_b, log_ev = _expand(log_spans)
    data_b, data_ev = _expand(data_spans)
    overlap = np.intersect1d(log_b, data_b)
    if len(overlap):
        b = int(overlap[0])
        first_log = int(log_ev[log_b == b].min())
        first_data = int(data_ev[data_b == b].min())
        v.append(Violation(max(first_log, first_data), "log/data overlap", hex(b)))

    # transactional PM bytes must not be written by another CTA of the same kernel
    rows: list[tuple[int, int, int]] = []
    meta: list[tuple[int, int, int]] = []  # per row: kernel, cta, is_data
    for idx, ev in enumerate(events):
        if ev.kind is not EventKind.MEM or not ev.instr.is_persistent_store:
            continue
        is_data = int(ev.instr.role is Role.DATA)
        for addr, size in ev.instr.thread_addrs:
            rows.append((addr, size, idx))
            meta.append((ev.kernel_id, ev.cta_id, is_data))
    if rows:
        byte, idxs = _expand(rows)
        sizes = np.asarray([r[1] for r in rows], dtype=np.int64)
        m = np.repeat(np.asarray(meta, dtype=np.int64), sizes, axis=0)
        kid, cta, is_data = m[:, 0], m[:, 1], m[:, 2]
        order = np.lexsort((cta, byte, kid))
        kid, byte, cta, is_data, idxs = kid[order], byte[order], cta[order], is_data[order], idxs[order]
        new_key = np.ones(len(byte), dtype=bool)
        new_key[1:] = (kid[1:] != kid[:-1]) | (byte[1:] != byte[:-1])
        group = np.cumsum(new_key) - 1
        # a key is contested when its rows disagree on the writing CTA
        first_cta = cta[new_key][group]
        contested = np.zeros(group[-1] + 1, dtype=bool)
        np.logical_or.at(contested, group, cta != first_cta)
        hits = contested[group] & (is_data == 1)
        if hits.any():
            cand = np.flatnonzero(hits)
            best = cand[np.lexsort((byte[cand], idxs[cand]))[0]]
            v.append(Violation(int(idxs[best]), "cross-CTA write conflict", hex(int(byte[best]))))
    return v


_STRUCTURAL = {
    "unterminated transaction",
    "nested transaction",
    "commit without begin",
    "memory event outside its transaction",
    "event outside kernel",
}


def check_structure(trace: Trace) -> None:
    """Raise on structural violations (the ones a parser must reject)."""
    for viol in validate(trace):
        if viol.rule in _STRUCTURAL:
            raise TraceError(str(viol))


def strip_persistency(trace: Trace) -> Trace:
    """The no-persistency baseline: drop logs, fences and tx markers; data becomes plain."""
    events = []
    for ev in trace.events:
        if ev.kind in (EventKind.TX_BEGIN, EventKind.TX_COMMIT, EventKind.FENCE):
            continue
        if ev.kind is EventKind.MEM:
            m = ev.instr
            if m.role is Role.LOG:
                continue
            if m.role is Role.DATA:
                m = MemInstr(m.op, Role.PLAIN, m.warp_id, m.thread_addrs, m.target)
            ev = TraceEvent(ev.kind, ev.kernel_id, ev.cta_id, None, m)
        elif ev.kind is EventKind.SYNC_THREADS:
            ev = TraceEvent(ev.kind, ev.kernel_id, ev.cta_id)
        events.append(ev)
    return Trace(trace.kernels, tuple(events))


def concat(traces: Iterable[Trace]) -> Trace:
    """Append traces, renumbering kernel ids so they stay unique."""
    kernels, events = [], []
    next_id = 0
    for t in traces:
        remap = {}
        for k in t.kernels:
            remap[k.kernel_id] = next_id
            kernels.append(
                KernelMeta(next_id, k.name, k.uses_shared_memory, k.cta_count, k.warp_size, k.expected_logs)
            )
            next_id += 1
        for e in t.events:
            events.append(TraceEvent(e.kind, remap[e.kernel_id], e.cta_id, e.tx_id, e.instr))
    return Trace(tuple(kernels), tuple(events))
