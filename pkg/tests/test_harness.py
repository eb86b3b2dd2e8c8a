from __future__ import annotations

import csv
import io
import json
import random

import pytest

from gpmsim.config import ConfigError
from gpmsim.harness import (
    STATS_COLUMNS,
    CrashReport,
    HarnessError,
    Report,
    RunConfig,
    RunStats,
    compare,
    crash_test,
    export,
    load_json,
    normalized,
    render,
    run,
    sample_points,
)
from gpmsim.strategy import GpuType
from gpmsim.synth import gen_synthetic
from gpmsim.trace import parse_trace

from gen import random_trace, small_config

EMPTY = "TRCv1\nK 0 BEGIN shared=0 ctas=1\nK 0 END\n"


def test_normalized_edge_cases():
    assert normalized(0, 0) == 1.0
    assert normalized(150, 100) == 1.5


def test_empty_kernel_normalizes_to_one():
    s = run(RunConfig(trace=parse_trace(EMPTY), strategy="agpm"))
    assert s.total_cycles == 0
    assert s.normalized_time == 1.0


def test_base_against_itself_is_one(fixture_path):
    s = run(RunConfig(trace=fixture_path, strategy="base"))
    assert s.normalized_time == 1.0
    assert s.base_cycles == s.total_cycles


def test_persistency_costs_time(fixture_path):
    s = run(RunConfig(trace=fixture_path, strategy="temporal"))
    assert s.total_cycles > s.base_cycles
    assert s.normalized_time == pytest.approx(s.total_cycles / s.base_cycles)


def test_run_config_rejects_bad_input(tmp_path, fixture_path):
    with pytest.raises(ConfigError, match="no trace"):
        run(RunConfig())
    with pytest.raises(ConfigError, match="not found"):
        run(RunConfig(trace=tmp_path / "missing.trc"))
    with pytest.raises(ConfigError, match="unknown agpm"):
        run(RunConfig(trace=fixture_path, agpm={"bogus": 1}))
    with pytest.raises(ConfigError):
        run(RunConfig(trace=fixture_path, bucl_threshold=0))


def test_compare_needs_two_strategies(fixture_path):
    with pytest.raises(HarnessError):
        compare(RunConfig(trace=fixture_path), ["agpm"])


def test_one_failing_strategy_does_not_stop_the_rest(fixture_path):
    rep = compare(RunConfig(trace=fixture_path), ["temporal", "nosuch", "nt"])
    assert set(rep.stats) == {"temporal", "nt"}
    assert "nosuch" in rep.errors
    assert rep.verdict is not None


def test_compare_ranks_and_classifies_family_a():
    rep = compare(RunConfig(trace=gen_synthetic("a", seed=0)), ["temporal", "nt", "agpm"])
    assert rep.verdict.gpu_type is GpuType.I
    scores = [rep.stats[n].normalized_time for n in rep.ranking]
    assert scores == sorted(scores)
    assert rep.deltas["temporal-nt"] == pytest.approx(
        rep.stats["temporal"].normalized_time - rep.stats["nt"].normalized_time)


def test_csv_columns_in_fixed_order(fixture_path):
    text = render(run(RunConfig(trace=fixture_path, strategy="agpm")), "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(STATS_COLUMNS)
    assert rows[0][0] == "schema_version"
    assert len(rows) == 2 and rows[1][0] == "1"


def test_report_csv_has_error_rows(fixture_path):
    rep = compare(RunConfig(trace=fixture_path), ["temporal", "nosuch"])
    rows = list(csv.DictReader(io.StringIO(render(rep, "csv"))))
    assert [r["strategy"] for r in rows] == ["StaticTemporal", "nosuch"]
    assert rows[1]["error"]


def test_json_round_trips(tmp_path, fixture_path):
    s = run(RunConfig(trace=fixture_path, strategy="agpm", seed=3))
    p = export(s, "json", tmp_path / "s.json")
    doc = json.loads(p.read_text())
    assert doc["schema"] == "gpmsim.run_stats" and doc["version"] == 1
    back = load_json(p)
    assert isinstance(back, RunStats) and back == s

    rep = compare(RunConfig(trace=fixture_path), ["temporal", "nt"])
    back = load_json(export(rep, "json", tmp_path / "r.json"))
    assert isinstance(back, Report)
    assert back.to_dict() == rep.to_dict()

    cr = crash_test(RunConfig(trace=fixture_path, strategy="nt"), 3)
    back = load_json(export(cr, "json", tmp_path / "c.json"))
    assert isinstance(back, CrashReport) and back.to_dict() == cr.to_dict()


def test_export_to_unwritable_path(tmp_path, fixture_path):
    s = run(RunConfig(trace=fixture_path))
    with pytest.raises(HarnessError):
        export(s, "json", tmp_path / "no" / "such" / "dir.json")


def test_sample_points():
    pts = sample_points(5000, 1000, seed=1)
    assert pts[0] == 0 and pts[-1] == 5000
    assert len(pts) == len(set(pts)) >= 1000
    assert pts == sorted(pts)
    assert sample_points(10, 1000, 0) == list(range(11))
    assert sample_points(5000, 1000, 1) == pts
    with pytest.raises(ValueError):
        sample_points(10, 0, 0)


def test_crash_test_includes_endpoints(fixture_path):
    rep = crash_test(RunConfig(trace=fixture_path, strategy="agpm"), 2, seed=4)
    pts = [p.point for p in rep.points]
    assert pts[0] == 0 and pts[-1] == rep.records
    assert rep.ok and rep.failed == 0


def test_crash_test_catches_mutant():
    tr = random_trace(random.Random(0), ctas=3)
    cfg = small_config()
    good = crash_test(RunConfig(config=cfg, trace=tr, strategy="temporal"), 1000)
    bad = crash_test(RunConfig(config=cfg, trace=tr, strategy="temporal"), 1000, data_first=True)
    assert good.ok
    assert bad.failed >= 1
    assert any(p.violations for p in bad.points if not p.ok)


def test_crash_test_rejects_base(fixture_path):
    with pytest.raises(ConfigError):
        crash_test(RunConfig(trace=fixture_path, strategy="base"))
