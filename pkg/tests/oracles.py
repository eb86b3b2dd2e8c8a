"""Independent reference models used by the tests.

Nothing here imports the simulator's cache or counter code; each model is
the most literal implementation of its rule that could be written, so a
match is evidence rather than a tautology.
"""

from __future__ import annotations

from collections import defaultdict


def widen_to_sectors(mask: int, line: int = 128, sector: int = 32) -> int:
    out = 0
    full = (1 << sector) - 1
    for lo in range(0, line, sector):
        if mask >> lo & full:
            out |= full << lo
    return out


class RefLRU:
    """Plain list-per-set LRU; list front is least recently used."""

    def __init__(self, size_bytes: int, line: int, assoc: int, sector: int = 32, index_stride: int = 1):
        self.line = line
        self.assoc = assoc
        self.sector = sector
        self.nsets = size_bytes // line // assoc
        self.stride = index_stride
        self.sets: dict[int, list[list[int]]] = defaultdict(list)  # [tag, valid]
        self.evictions: list[tuple[int, int]] = []

    def _set(self, block: int) -> int:
        return block // self.line // self.stride % self.nsets

    def _find(self, block: int):
        ways = self.sets[self._set(block)]
        for i, w in enumerate(ways):
            if w[0] == block:
                return ways, i
        return ways, None

    def present(self, block: int) -> bool:
        return self._find(block)[1] is not None

    def lookup(self, block: int, mask: int) -> bool:
        ways, i = self._find(block)
        if i is None:
            return False
        w = ways.pop(i)
        ways.append(w)
        return w[1] & mask == mask

    def allocate(self, block: int) -> list[int]:
        ways, i = self._find(block)
        if i is not None:
            w = ways.pop(i)
            ways.append(w)
            return w
        if len(ways) == self.assoc:
            victim = ways.pop(0)
            self.evictions.append((self._set(block), victim[0]))
        w = [block, 0]
        ways.append(w)
        return w

    def fill(self, block: int, mask: int) -> None:
        w = self.allocate(block)
        w[1] |= widen_to_sectors(mask, self.line, self.sector)

    def invalidate(self, block: int) -> None:
        ways, i = self._find(block)
        if i is not None:
            ways.pop(i)


def locality_oracle(stream, hcfg, formula: str = "rehit") -> dict[str, int]:
    """Replay raw requests with exact, unbounded per-byte and per-block counters.

    ``stream`` holds ``(sm, is_store, block, mask, is_pm, is_log)`` tuples as
    recorded by the engine.  Stores probe L1D (no allocate, evict on hit)
    and write-allocate in L2; loads look up L1D then L2, filling sectors.
    Counting rule per (level, role): a PM reference to an untracked block
    starts tracking it and counts every referenced byte plus the block; a
    hit on a tracked block counts the block and only bytes already seen;
    non-PM requests only touch blocks that are already tracked (on hits).
    """
    line = hcfg.l1d.line_bytes
    parts = hcfg.l2.partitions
    l1 = [RefLRU(hcfg.l1d.size_kib * 1024, line, hcfg.l1d.assoc, hcfg.sector_bytes) for _ in range(hcfg.sm_count)]
    l2 = [RefLRU(hcfg.l2.partition_kib * 1024, line, hcfg.l2.assoc, hcfg.sector_bytes, parts)
          for _ in range(parts)]
    bytes_seen: dict[tuple[int, str], dict[int, dict[int, int]]] = defaultdict(dict)
    blocks_seen: dict[tuple[int, str], dict[int, int]] = defaultdict(dict)

    def note(level, block, mask, hit, is_pm, is_log):
        offs = []
        m = mask
        while m:
            low = m & -m
            offs.append(low.bit_length() - 1)
            m ^= low
        for role in (("all", "log") if is_log else ("all",)):
            key = (level, role)
            tracked = block in blocks_seen[key]
            if not tracked:
                if not is_pm:
                    continue
                bytes_seen[key][block] = {o: 1 for o in offs}
                blocks_seen[key][block] = 1
                continue
            if not hit:
                continue
            counts = bytes_seen[key][block]
            for o in offs:
                if counts.get(o, 0) > 0:
                    counts[o] += 1
            blocks_seen[key][block] += 1

    for sm, store, block, mask, is_pm, is_log in stream:
        c1 = l1[sm]
        c2 = l2[block // line % parts]
        if store:
            note(1, block, mask, c1.present(block), is_pm, is_log)
            c1.invalidate(block)
            note(2, block, mask, c2.present(block), is_pm, is_log)
            c2.allocate(block)[1] |= mask
            continue
        hit = c1.lookup(block, mask)
        note(1, block, mask, hit, is_pm, is_log)
        if hit:
            continue
        c1.fill(block, mask)
        hit2 = c2.lookup(block, mask)
        note(2, block, mask, hit2, is_pm, is_log)
        if not hit2:
            c2.fill(block, mask)

    score = (lambda c: max(c - 1, 0)) if formula == "rehit" else (lambda c: c if c > 1 else 0)
    out = {}
    for level, name in ((1, "l1d"), (2, "l2")):
        for role in ("all", "log"):
            t = sum(score(c) for counts in bytes_seen[(level, role)].values() for c in counts.values())
            b = sum(score(c) for c in blocks_seen[(level, role)].values())
            out[f"{name}_t_{role}"] = t
            out[f"{name}_s_{role}"] = t + b
    out["all"] = len(stream)
    out["log"] = sum(1 for s in stream if s[5])
    return out


def sequential_memory(writes) -> dict[int, int]:
    """Last-writer-wins byte map for ``(addr, value)`` pairs in program order."""
    mem = {}
    for addr, value in writes:
        mem[addr] = value
    return mem
