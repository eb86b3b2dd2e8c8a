"""``sim`` command line front end.

Examples::

    sim gen --family b --logs 20000 --seed 7 --out t.trc
    sim run --trace t.trc --strategy agpm --out stats.json
    sim compare --trace t.trc --strategies temporal,nt,agpm
    sim classify --metrics table2.csv
    sim crash-test --trace t.trc --strategy agpm --points 1000
    sim size-report

Set SIM_LOG_LEVEL (DEBUG, INFO, ...) for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .agpm import LocalityMetrics, classify_reason, reason_to_path, reason_to_type, size_report
from .config import ConfigError, dump_config
from .harness import (
    AGPM_OPTIONS,
    HarnessError,
    RunConfig,
    characterize,
    compare,
    crash_test,
    export,
    render,
    run,
)
from .persist import ProtocolViolation
from .synth import FAMILIES, UnrealizableFamily, gen_synthetic
from .trace import TraceError, read_trace, serialize, write_trace

log = logging.getLogger("gpmsim")

TRUE = {"1", "true", "yes", "y", "t"}


def _setup_logging() -> None:
    level = os.environ.get("SIM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _agpm_overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in AGPM_OPTIONS:
            raise ConfigError(f"--agpm expects KEY=VALUE with KEY in {', '.join(AGPM_OPTIONS)}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key] = value
    return out


def _run_config(args, strategy: str | None = None) -> RunConfig:
    return RunConfig(
        config=args.config,
        strategy=strategy or getattr(args, "strategy", "temporal"),
        trace=args.trace,
        seed=args.seed,
        agpm=_agpm_overrides(args.agpm),
        bucl_threshold=args.bucl_threshold,
        normalize=not getattr(args, "no_normalize", False),
    )


def _emit(obj, out: str | None, fmt: str | None) -> None:
    if out:
        fmt = fmt or ("csv" if out.endswith(".csv") else "json")
        export(obj, fmt, out)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(render(obj, fmt or "json"))


def cmd_run(args) -> int:
    _emit(run(_run_config(args)), args.out, args.format)
    return 0


def cmd_compare(args) -> int:
    report = compare(_run_config(args), args.strategies.split(","))
    if args.out:
        _emit(report, args.out, args.format)
    elif args.format:
        sys.stdout.write(render(report, args.format))
    else:
        print(f"{'rank':<5} {'strategy':<10} {'cycles':>12} {'normalized':>11}")
        for i, name in enumerate(report.ranking, 1):
            s = report.stats[name]
            norm = "-" if s.normalized_time is None else f"{s.normalized_time:.4f}"
            print(f"{i:<5} {name:<10} {s.total_cycles:>12} {norm:>11}")
        for name, err in report.errors.items():
            print(f"error {name}: {err}")
        if report.verdict is not None:
            v = report.verdict
            print(f"type {v.gpu_type.value} (temporal {v.perf_t:.4f}, nt {v.perf_nt:.4f}, diff {v.diff:.4f})")
    return 1 if report.errors else 0


def cmd_gen(args) -> int:
    overrides = {}
    if args.logs is not None:
        overrides["log_updates"] = args.logs
    if args.ctas is not None:
        overrides["ctas"] = args.ctas
    trace = gen_synthetic(args.family, seed=args.seed, **overrides)
    if args.out:
        write_trace(trace, args.out)
        log.info("wrote %s (%d memory instructions)", args.out, trace.mem_count)
    else:
        sys.stdout.write(serialize(trace))
    return 0


def _metrics_row(row: dict) -> tuple[LocalityMetrics, bool]:
    vals = {}
    for name in LocalityMetrics.FIELDS:
        raw = row.get(name)
        if raw is None or raw == "":
            raise ConfigError(f"metrics row {row.get('benchmark', '?')!r} lacks column {name!r}")
        vals[name] = int(raw)
    shared = str(row.get("shared", "false")).strip().lower() in TRUE
    return LocalityMetrics(**vals), shared


def cmd_classify(args) -> int:
    with open(args.metrics, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["benchmark", "reason", "type", "path"])
    for i, row in enumerate(rows):
        m, shared = _metrics_row(row)
        r = classify_reason(m, shared)
        w.writerow([row.get("benchmark") or f"row{i}", r.value, reason_to_type(r).value, reason_to_path(r).value])
    return 0


def cmd_characterize(args) -> int:
    rc = _run_config(args)
    rc.check()
    trace = read_trace(args.trace)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["benchmark", *LocalityMetrics.FIELDS, "shared"])
    for meta, m in zip(trace.kernels, characterize(trace, rc.sim_config(), args.seed)):
        w.writerow([meta.name, *(getattr(m, f) for f in LocalityMetrics.FIELDS),
                    "true" if meta.uses_shared_memory else "false"])
    return 0


def cmd_crash_test(args) -> int:
    report = crash_test(_run_config(args), args.points, args.crash_seed)
    if args.out:
        export(report, "json", args.out)
    failures = [p for p in report.points if not p.ok]
    print(f"{report.strategy}: {report.passed}/{len(report.points)} crash points recover "
          f"({report.records} persists, {report.transactions} transactions)")
    for p in failures[:args.show]:
        print(json.dumps({"point": p.point, "violations": p.violations}, sort_keys=True))
    return 0 if report.ok else 1


def cmd_size_report(args) -> int:
    rc = RunConfig(config=args.config, agpm=_agpm_overrides(args.agpm))
    rep = size_report(rc.sim_config().agpm)
    for k, v in rep.items():
        print(f"{k}: {v:g}")
    return 0


def _common(p: argparse.ArgumentParser, trace: bool = True) -> None:
    p.add_argument("--config", help="TOML hierarchy/AGPM config (defaults when omitted)")
    if trace:
        p.add_argument("--trace", help="trace file (TRCv1); required except with --dump-config")
        p.add_argument("--seed", type=int, default=0, help="seed for initial PM contents")
    p.add_argument("--agpm", action="append", metavar="KEY=VALUE", help="override an AGPM option (repeatable)")
    p.add_argument("--bucl-threshold", type=int, metavar="N", help="Bucl coalescing-degree threshold")
    p.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="GPU persistent-memory hierarchy simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--dump-config", action="store_true",
                    help="print the effective config (after --config) and exit")
    ap.add_argument("--config", dest="top_config", help=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command")

    strategies = "temporal|nt|pmspec|bucl|themis|agpm"
    p = sub.add_parser("run", help="simulate one strategy")
    _common(p)
    p.add_argument("--strategy", default="temporal", help=strategies)
    p.add_argument("--out", help="write stats here (.csv or .json)")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--no-normalize", action="store_true", help="skip the stripped base run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies on one trace")
    _common(p)
    p.add_argument("--strategies", required=True, help=f"comma list of {strategies}")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen", help="write a synthetic trace for one reason family")
    p.add_argument("--family", required=True, help=f"one of {', '.join(FAMILIES)} (or I/II/III)")
    p.add_argument("--logs", type=int, help="target number of log segment updates")
    p.add_argument("--ctas", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("classify", help="classify locality-metric rows from a CSV")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("characterize", help="whole-kernel locality metrics as classify-ready CSV")
    _common(p)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("crash-test", help="crash at sampled persist points and check recovery")
    _common(p)
    p.add_argument("--strategy", default="temporal", help=strategies)
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--crash-seed", type=int, default=0, help="seed for crash point sampling")
    p.add_argument("--show", type=int, default=5, help="failing points to print")
    p.add_argument("--out", help="write the full JSON report here")
    p.set_defaults(func=cmd_crash_test)

    p = sub.add_parser("size-report", help="AGPM buffer storage overhead")
    _common(p, trace=False)
    p.set_defaults(func=cmd_size_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.dump_config or getattr(args, "command", None) is None:
        if not args.dump_config:
            ap.print_help()
            return 2
        rc = RunConfig(config=getattr(args, "config", None) or args.top_config,
                       bucl_threshold=getattr(args, "bucl_threshold", None))
        try:
            rc.agpm = _agpm_overrides(getattr(args, "agpm", None))
            sys.stdout.write(dump_config(rc.sim_config()))
        except ConfigError as exc:
            print(f"sim: {exc}", file=sys.stderr)
            return 2
        return 0
    try:
        return args.func(args)
    except (ConfigError, TraceError, HarnessError, UnrealizableFamily, ProtocolViolation, OSError,
            ValueError) as exc:
        print(f"sim: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
