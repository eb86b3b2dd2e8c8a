from __future__ import annotations

import random

import pytest

from gpmsim.cache import SectorCache, sector_mask
from gpmsim.config import HierarchyConfig
from gpmsim.hierarchy import AddressError, Hierarchy, HitLevel, WritePendingQueue
from gpmsim.trace import Target

from oracles import RefLRU, sequential_memory, widen_to_sectors

A = 0x1_0000_0000
B = A + 0x1000
FULL = (1 << 128) - 1


def hier(**pm):
    cfg = HierarchyConfig()
    for k, v in pm.items():
        setattr(cfg.pm, k, v)
    return Hierarchy(cfg, record_evictions=True)


def vals(mask, value):
    return {off: value for off in range(128) if mask >> off & 1}


# ---------------------------------------------------------------- cache


def test_sector_mask_widens():
    assert sector_mask(0b1) == (1 << 32) - 1
    assert sector_mask(1 << 40) == ((1 << 32) - 1) << 32
    assert sector_mask(0) == 0
    for m in (1, 1 << 127, 0xF0F0 << 60):
        assert sector_mask(m) == widen_to_sectors(m)


def test_partial_valid_line_misses():
    c = SectorCache(1024, assoc=2)
    c.fill(A, 0b1)
    assert c.lookup(A, 0b1)[1]
    assert not c.lookup(A, 1 << 64)[1]


@pytest.mark.parametrize("size, assoc, stride", [(1024, 2, 1), (2048, 4, 1), (1536, 6, 1), (4096, 4, 4)])
def test_eviction_order_matches_reference(size, assoc, stride):
    rng = random.Random(size + assoc)
    dut = SectorCache(size, 128, assoc, index_stride=stride, record_evictions=True)
    ref = RefLRU(size, 128, assoc, index_stride=stride)
    for _ in range(3000):
        block = A + rng.randrange(64) * 128
        mask = 1 << rng.randrange(128)
        op = rng.random()
        if op < 0.5:
            hit = dut.lookup(block, mask)[1]
            assert hit == ref.lookup(block, mask)
            if not hit:
                dut.fill(block, mask)
                ref.fill(block, mask)
        elif op < 0.9:
            dut.allocate(block)
            ref.allocate(block)
        else:
            dut.invalidate(block)
            ref.invalidate(block)
    assert dut.evictions == ref.evictions
    assert len(dut.evictions) > 100


# ---------------------------------------------------------------- temporal path


def test_cold_temporal_store_allocates_dirty_in_l2():
    h = hier()
    r = h.store_temporal(0, A, 0xF, vals(0xF, 7), 0)
    assert h.l1d[0].misses == 1 and A not in h.l1d[0]
    line = h.l2[h.partition_of(A)].probe(A)
    assert line is not None and line.dirty == 0xF
    assert r.durable_at is None
    assert h.persist_log == []


def test_load_after_store_hits_l2_and_moves_flit_rounded_bytes():
    h = hier()
    h.store_temporal(0, A, FULL, vals(FULL, 1), 0)
    before = h.bytes_m2s
    r = h.load(0, A, 0xF, 1000)
    assert r.hit_level is HitLevel.L2
    # a 4-byte request fetches one 32-byte sector: one flit
    assert h.bytes_m2s - before == 32


def test_l1_hit_latency():
    h = hier()
    h.load(0, A, 0xF, 0)
    r = h.load(0, A, 0xF, 5000)
    assert r.hit_level is HitLevel.L1D
    assert r.latency_cycles == 28


def test_store_hit_evicts_l1_copy():
    h = hier()
    h.load(0, A, 0xF, 0)
    h.store_temporal(0, A, 0xF, vals(0xF, 3), 5000)
    assert A not in h.l1d[0]


def test_clwb_writes_back_dirty_bytes():
    h = hier()
    h.store_temporal(0, A, 0xFF, vals(0xFF, 9), 0, persist=True, cta=0)
    r = h.clwb(0, A, 10, cta=0)
    assert r.durable_at is not None
    assert len(h.persist_log) == 1
    e = h.persist_log[0]
    assert e.mask == 0xFF and dict(e.values) == vals(0xFF, 9)
    assert h.l2[h.partition_of(A)].probe(A).dirty == 0


def test_clwb_of_clean_block_is_a_noop():
    h = hier()
    before = (h.bytes_s2m, h.bytes_m2s)
    r = h.clwb(0, B, 0)
    assert r.durable_at is None and r.latency_cycles == 0
    assert h.persist_log == []
    assert (h.bytes_s2m, h.bytes_m2s) == before


def test_two_stores_then_clwb_merge_into_one_entry():
    h = hier()
    h.store_temporal(0, A, 0x0F, vals(0x0F, 1), 0)
    h.store_temporal(0, A, 0x3C, vals(0x3C, 2), 5)
    h.clwb(0, A, 10)
    assert len(h.persist_log) == 1
    e = h.persist_log[0]
    assert e.mask == 0x3F
    expect = sequential_memory([(A + o, 1) for o in range(4)] + [(A + o, 2) for o in range(2, 6)])
    assert {A + o: v for o, v in e.values} == expect


# ---------------------------------------------------------------- non-temporal path and WPQ


def test_nt_store_on_empty_wpq():
    h = hier()
    r = h.store_nontemporal(0, A, 0xF, vals(0xF, 5), 0)
    e = h.persist_log[0]
    assert r.durable_at == e.time
    assert A not in h.l1d[0] and A not in h.l2[h.partition_of(A)]


def test_full_wpq_delays_acceptance_by_one_drain():
    q = WritePendingQueue(capacity=2, banks=1, write_cycles=100)
    assert q.accept(0) == (0, 100)
    assert q.accept(0) == (0, 200)
    assert q.accept(0) == (100, 300)


def test_same_block_nt_twice_second_wins():
    h = hier()
    h.store_nontemporal(0, A, 0xF, vals(0xF, 1), 0)
    h.store_nontemporal(0, A, 0x3, vals(0x3, 2), 1)
    assert len(h.persist_log) == 2
    image = {}
    for e in sorted(h.persist_log, key=lambda e: (e.time, e.seq)):
        image.update({A + o: v for o, v in e.values})
    assert image == {A: 2, A + 1: 2, A + 2: 1, A + 3: 1}


def test_nt_store_carries_dirty_l2_bytes():
    h = hier()
    h.store_temporal(0, A, 0xF0, vals(0xF0, 4), 0)
    h.store_nontemporal(0, A, 0xF, vals(0xF, 5), 10)
    e = h.persist_log[0]
    assert e.mask == 0xFF
    assert h.l2[h.partition_of(A)].probe(A).dirty == 0
    # the queued clwb is now a no-op
    h.clwb(0, A, 20)
    assert len(h.persist_log) == 1


def test_nt_store_to_dram_is_refused():
    with pytest.raises(AddressError):
        hier().store_nontemporal(0, 0x1000, 0xF, {}, 0, target=Target.DRAM)


def test_address_range_checked():
    with pytest.raises(AddressError):
        hier().load(0, 0x1000, 0xF, 0, target=Target.PM)


# ---------------------------------------------------------------- fences


def test_empty_sfence_costs_fence_cycles():
    assert hier().sfence(0, cta=0, now=100) == 120


def test_sfence_waits_for_pending_nt_store():
    h = hier()
    r = h.store_nontemporal(0, A, 0xF, vals(0xF, 5), 0, cta=0)
    assert h.sfence(0, 0, 0) == max(0 + 20, r.durable_at)
    assert r.durable_at > 20


def test_sfence_is_cta_scoped():
    h = hier()
    h.store_nontemporal(0, A, 0xF, vals(0xF, 5), 0, cta=1)
    assert h.sfence(0, cta=0, now=0) == 20


def test_sfence_issues_queued_clwbs():
    h = hier()
    h.store_temporal(0, A, 0xF, vals(0xF, 5), 0, persist=True, cta=0)
    done = h.sfence(0, 0, 50)
    assert len(h.persist_log) == 1
    assert done >= h.persist_log[0].time


def test_elided_fence_skips_when_nothing_outstanding():
    h = hier()
    assert h.sfence(0, 0, 100, elide=True) == 100


# ---------------------------------------------------------------- conservation


def test_wpq_byte_conservation_random():
    rng = random.Random(11)
    h = hier(wpq_capacity=4, write_banks=2)
    writes = []
    stored = 0
    blocks = [A + i * 128 for i in range(48)]
    for t in range(2000):
        block = rng.choice(blocks)
        mask = 0
        for _ in range(rng.randint(1, 6)):
            off = rng.randrange(0, 128, 4)
            mask |= 0xF << off
        v = rng.randrange(256)
        values = vals(mask, v)
        writes.extend((block + o, v) for o in values)
        stored += len(values)
        if rng.random() < 0.4:
            h.store_nontemporal(0, block, mask, values, t * 3)
        else:
            h.store_temporal(0, block, mask, values, t * 3)
            if rng.random() < 0.3:
                h.clwb(0, block, t * 3 + 1)
    for block in blocks:
        h.clwb(0, block, 10_000)
    # every byte counted in equals the bytes carried by the queue entries
    assert h.wpq_bytes_in == sum(len(e.values) for e in h.persist_log)
    assert all(bin(e.mask).count("1") == len(e.values) for e in h.persist_log)
    assert h.dirty_pm_bytes() == 0
    # merging can only shrink the byte count, never invent bytes
    assert h.wpq_bytes_in <= stored
    image = {}
    # durable (acceptance) order must reproduce program order
    for e in sorted(h.persist_log, key=lambda e: (e.time, e.seq)):
        image.update({e.block + o: v for o, v in e.values})
    assert image == sequential_memory(writes)


def test_wpq_without_merging_conserves_every_byte():
    rng = random.Random(5)
    h = hier()
    stored = 0
    for t in range(500):
        mask = rng.getrandbits(128) or 1
        h.store_nontemporal(0, A + rng.randrange(32) * 128, mask, vals(mask, 1), t)
        stored += bin(mask).count("1")
    assert h.wpq_bytes_in == stored
