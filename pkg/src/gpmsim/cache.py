"""Set-associative, sector-filled LRU cache used for L1D and L2 partitions."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field


def sector_mask(mask: int, line_bytes: int = 128, sector_bytes: int = 32) -> int:
    """Widen a byte mask to whole demand-fetch sectors."""
    full = (1 << sector_bytes) - 1
    out = 0
    for base in range(0, line_bytes, sector_bytes):
        if (mask >> base) & full:
            out |= full << base
    return out


@dataclass
class CacheLine:
    tag: int
    valid: int = 0
    dirty: int = 0
    values: dict[int, int] = field(default_factory=dict)  # offset -> byte, dirty bytes only
    lru_stamp: int = 0
    pending: list[tuple[int, object]] = field(default_factory=list)  # (issue time, cta)
    tags: dict[int, object] = field(default_factory=dict)  # offset -> provenance of the dirty byte
    write_time: int = 0


class SectorCache:
    """Tag store with byte-granular valid/dirty masks and true LRU per set.

    ``index_stride`` lets L2 partitions skip the address bits already used
    to pick the partition, so each partition spreads blocks over all sets.
    """

    def __init__(
        self,
        size_bytes: int,
        line_bytes: int = 128,
        assoc: int = 4,
        sector_bytes: int = 32,
        index_stride: int = 1,
        name: str = "",
        record_evictions: bool = False,
    ):
        lines = size_bytes // line_bytes
        if lines % assoc:
            raise ValueError(f"{name}: {lines} lines not divisible by assoc {assoc}")
        self.name = name
        self.line_bytes = line_bytes
        self.sector_bytes = sector_bytes
        self.assoc = assoc
        self.num_sets = lines // assoc
        self.index_stride = index_stride
        self.sets: list[OrderedDict[int, CacheLine]] = [OrderedDict() for _ in range(self.num_sets)]
        self.clock = 0
        self.record_evictions = record_evictions
        self.evictions: list[tuple[int, int]] = []
        self.hits = 0
        self.misses = 0

    def set_index(self, block: int) -> int:
        return (block // self.line_bytes // self.index_stride) % self.num_sets

    def probe(self, block: int) -> CacheLine | None:
        return self.sets[self.set_index(block)].get(block)

    def touch(self, line: CacheLine) -> None:
        self.clock += 1
        line.lru_stamp = self.clock
        self.sets[self.set_index(line.tag)].move_to_end(line.tag)

    def lookup(self, block: int, mask: int, *, count: bool = True) -> tuple[CacheLine | None, bool]:
        """Return (line, hit). A hit needs every requested byte valid."""
        line = self.probe(block)
        hit = line is not None and (line.valid & mask) == mask
        if count:
            if hit:
                self.hits += 1
            else:
                self.misses += 1
        if line is not None:
            self.touch(line)
        return line, hit

    def allocate(self, block: int) -> tuple[CacheLine, CacheLine | None]:
        """Return the resident line for ``block``, evicting the LRU way if needed."""
        idx = self.set_index(block)
        ways = self.sets[idx]
        line = ways.get(block)
        victim = None
        if line is None:
            if len(ways) >= self.assoc:
                _, victim = ways.popitem(last=False)
                if self.record_evictions:
                    self.evictions.append((idx, victim.tag))
            line = CacheLine(block)
            ways[block] = line
        self.touch(line)
        return line, victim

    def fill(self, block: int, mask: int) -> tuple[CacheLine, CacheLine | None]:
        line, victim = self.allocate(block)
        line.valid |= sector_mask(mask, self.line_bytes, self.sector_bytes)
        return line, victim

    def invalidate(self, block: int) -> CacheLine | None:
        return self.sets[self.set_index(block)].pop(block, None)

    def dirty_lines(self):
        for ways in self.sets:
            for line in ways.values():
                if line.dirty:
                    yield line

    def __contains__(self, block: int) -> bool:
        return self.probe(block) is not None
