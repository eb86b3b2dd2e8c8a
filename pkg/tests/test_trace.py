from __future__ import annotations

import pytest

from gpmsim.trace import (
    EventKind,
    MemInstr,
    Op,
    Role,
    Target,
    TraceError,
    coalesce,
    concat,
    parse_trace,
    serialize,
    strip_persistency,
    validate,
)

HEAD = "TRCv1\nK 0 BEGIN shared=0 ctas=1\n"


def warp(addrs, size=4, op=Op.LOAD, role=Role.PLAIN, target=Target.PM):
    return MemInstr(op, role, 0, tuple((a, size) for a in addrs), target)


def test_empty_kernel_parses():
    tr = parse_trace("TRCv1\nK 0 BEGIN shared=0 ctas=1\nK 0 END\n")
    assert len(tr.kernels) == 1
    assert [e.kind for e in tr.events] == [EventKind.KERNEL_BEGIN, EventKind.KERNEL_END]
    assert validate(tr) == []


def test_unterminated_transaction_rejected():
    with pytest.raises(TraceError, match="unterminated transaction"):
        parse_trace(HEAD + "TXB 0 0 0\nK 0 END\n")


def test_fixture_has_ten_events(fixture_trace):
    # counted by hand: K BEGIN, TXB, 2 log MEM, FEN, SYN, 2 data MEM, TXC, K END
    assert len(fixture_trace.events) == 10
    assert fixture_trace.kernels[0].cta_count == 1
    roles = [e.instr.role for e in fixture_trace.events if e.kind is EventKind.MEM]
    assert roles == [Role.LOG, Role.LOG, Role.DATA, Role.DATA]


def test_fixture_is_valid(fixture_trace):
    assert validate(fixture_trace) == []


def test_round_trip(fixture_trace):
    text = serialize(fixture_trace)
    again = parse_trace(text)
    assert again == fixture_trace
    assert serialize(again) == text


@pytest.mark.parametrize(
    "line, col",
    [
        ("MEM 0 0 0 XX log pm tx=0 0x110000000:8", 11),
        ("MEM 0 0 0 ST log pm tx=0 0x110000000:3", None),
        ("BOGUS 0", 1),
    ],
)
def test_parse_errors_carry_position(line, col):
    with pytest.raises(TraceError) as err:
        parse_trace(HEAD + "TXB 0 0 0\n" + line + "\nTXC 0 0 0\nK 0 END\n")
    assert err.value.line == 4
    if col is not None:
        assert err.value.column == col


def test_missing_header():
    with pytest.raises(TraceError, match="header"):
        parse_trace("K 0 BEGIN shared=0 ctas=1\nK 0 END\n")


def test_coalesce_perfect():
    c = coalesce(warp([0x1000 + 4 * i for i in range(32)]))
    assert c.degree == 1
    assert c.transactions == ((0x1000, (1 << 128) - 1),)


def test_coalesce_fully_scattered():
    assert coalesce(warp([0x1000 + 128 * i for i in range(32)])).degree == 32


def test_coalesce_stride_64():
    # two threads per 128-byte segment
    assert coalesce(warp([0x1000 + 64 * i for i in range(32)])).degree == 16


def test_coalesce_splits_straddling_access():
    c = coalesce(warp([0x107C], size=8))
    assert c.transactions == ((0x1000, 0xF << 124), (0x1080, 0xF))


def _one_tx(body: str) -> str:
    return HEAD + "TXB 0 0 0\n" + body + "TXC 0 0 0\nK 0 END\n"


def test_data_before_log_is_a_violation():
    tr = parse_trace(_one_tx(
        "MEM 0 0 0 ST data pm tx=0 0x100000000:4\n"
        "MEM 0 0 0 ST log pm tx=0 0x110000000:16,0x110000010:4\n"
    ))
    rules = {v.rule for v in validate(tr)}
    assert "data precedes log" in rules


def test_log_to_dram_is_a_violation():
    tr = parse_trace(_one_tx("MEM 0 0 0 ST log dram tx=0 0x1000:16,0x1010:8\n"))
    assert any(v.rule == "log must target PM" for v in validate(tr))


def test_short_log_is_a_violation():
    tr = parse_trace(_one_tx(
        "MEM 0 0 0 ST log pm tx=0 0x110000000:16\n"
        "MEM 0 0 0 ST data pm tx=0 0x100000000:4\n"
    ))
    assert any(v.rule == "log too small" for v in validate(tr))


def test_cross_cta_conflict_detected():
    text = (
        "TRCv1\nK 0 BEGIN shared=0 ctas=2\n"
        "TXB 0 0 0\nMEM 0 0 0 ST log pm tx=0 0x110000000:16,0x110000010:4\n"
        "MEM 0 0 0 ST data pm tx=0 0x100000000:4\nTXC 0 0 0\n"
        "TXB 0 1 0\nMEM 0 1 0 ST log pm tx=0 0x110001000:16,0x110001010:4\n"
        "MEM 0 1 0 ST data pm tx=0 0x100000000:4\nTXC 0 1 0\n"
        "K 0 END\n"
    )
    assert any(v.rule == "cross-CTA write conflict" for v in validate(parse_trace(text)))


def test_strip_persistency_keeps_only_plain_work(fixture_trace):
    base = strip_persistency(fixture_trace)
    mems = [e.instr for e in base.events if e.kind is EventKind.MEM]
    assert all(m.role is Role.PLAIN for m in mems)
    assert len(mems) == 2  # the two data stores survive as plain stores
    assert not any(e.kind in (EventKind.TX_BEGIN, EventKind.TX_COMMIT, EventKind.FENCE) for e in base.events)
    assert validate(base) == []


def test_concat_renumbers_kernels(fixture_trace):
    both = concat([fixture_trace, fixture_trace])
    assert [k.kernel_id for k in both.kernels] == [0, 1]
    assert validate(both) == []
