"""Simulator configuration.

Hardware defaults model a GPGPU-Sim style GPU
(20 SMs, 24 KiB L1D, 2 MiB L2 in 16 partitions, 8 memory channels).
Timing constants that the hardware description does not pin down
(hit latencies, WPQ depth, drain parallelism) live under ``timing`` and
``pm`` and are calibration knobs, not measured values.

Config files are TOML with dotted keys mirroring the dataclass tree, e.g.::

    l1d.size_kib = 24
    timing.l2_hit_cycles = 190
    agpm.metric_formula = "literal"
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class CacheConfig:
    size_kib: int
    line_bytes: int
    assoc: int
    mshrs: int
    policy: str


@dataclass
class L2Config(CacheConfig):
    partitions: int = 16
    partition_kib: int = 128


@dataclass
class InterconnectConfig:
    flit_bytes: int = 32
    clock_ghz: float = 1.4


@dataclass
class MemoryConfig:
    channels: int = 8
    bandwidth_gbps: float = 307.0
    clock_ghz: float = 1.2
    nvm_read_ns: float = 160.0
    nvm_write_ns: float = 480.0
    dram_read_ns: float = 160.0
    dram_write_ns: float = 160.0


@dataclass
class TimingConfig:
    l1_hit_cycles: int = 28
    l2_hit_cycles: int = 190
    # one-way SM <-> L2 partition crossing; part of l2_hit_cycles
    icnt_cycles: int = 60
    # L2 partition <-> memory controller
    mc_cycles: int = 20
    fence_cycles: int = 20
    barrier_cycles: int = 10
    issue_cycles: int = 1
    l2_port_cycles: int = 2
    warps_per_sm: int = 64
    ctas_per_sm: int = 32


@dataclass
class PMConfig:
    wpq_capacity: int = 64
    # concurrent NVM write slots per channel draining the WPQ
    write_banks: int = 16
    nt_invalidate: bool = False
    pm_base: int = 0x1_0000_0000
    pm_size: int = 0x1_0000_0000
    dram_base: int = 0x0
    dram_size: int = 0x1_0000_0000
    flag_base: int = 0x1_F000_0000


@dataclass
class AgpmConfig:
    sets: int = 512
    counter_bits: int = 5
    tag_bits: int = 57
    block_bytes: int = 128
    saturate: bool = True
    metric_formula: str = "rehit"
    warmup_logs: int = 100
    initial_threshold: int = 10000
    min_threshold: int = 100
    small_log_limit: int = 100
    thrash_ratio: float = 0.25

    @property
    def counter_max(self) -> int | None:
        return (1 << self.counter_bits) - 1 if self.saturate else None


@dataclass
class HierarchyConfig:
    sm_count: int = 20
    warp_size: int = 32
    core_clock_ghz: float = 1.8
    sector_bytes: int = 32
    segment_bytes: int = 128
    l1d: CacheConfig = field(
        default_factory=lambda: CacheConfig(
            size_kib=24, line_bytes=128, assoc=6, mshrs=256, policy="write-evict/write-no-allocate"
        )
    )
    l2: L2Config = field(
        default_factory=lambda: L2Config(
            size_kib=2048, line_bytes=128, assoc=16, mshrs=256, policy="write-back/write-allocate"
        )
    )
    interconnect: InterconnectConfig = field(default_factory=InterconnectConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    pm: PMConfig = field(default_factory=PMConfig)

    def ns_to_cycles(self, ns: float) -> int:
        return int(math.ceil(ns * self.core_clock_ghz))

    def flit_cycles(self, flits: int) -> int:
        return int(math.ceil(flits * self.core_clock_ghz / self.interconnect.clock_ghz))

    @property
    def bytes_per_channel_cycle(self) -> float:
        return self.memory.bandwidth_gbps / self.memory.channels / self.core_clock_ghz

    def validate(self) -> None:
        l2 = self.l2
        if l2.size_kib != l2.partitions * l2.partition_kib:
            raise ConfigError(
                f"l2.size_kib={l2.size_kib} != partitions*partition_kib="
                f"{l2.partitions * l2.partition_kib}"
            )
        # capacities need not be powers of two (the default L1D is 24 KiB, 6-way)
        for name, cache, kib in [("l1d", self.l1d, self.l1d.size_kib), ("l2", l2, l2.partition_kib)]:
            lines = kib * 1024 // cache.line_bytes
            if kib <= 0 or cache.assoc <= 0 or lines % cache.assoc:
                raise ConfigError(f"{name}: {lines} lines do not divide into {cache.assoc} ways")
        for name, value in [
            ("l1d.line_bytes", self.l1d.line_bytes),
            ("l2.line_bytes", l2.line_bytes),
            ("sector_bytes", self.sector_bytes),
            ("segment_bytes", self.segment_bytes),
            ("interconnect.flit_bytes", self.interconnect.flit_bytes),
        ]:
            if not _is_pow2(value):
                raise ConfigError(f"{name}={value} must be a power of two")
        if self.l1d.line_bytes != self.segment_bytes or l2.line_bytes != self.segment_bytes:
            raise ConfigError("cache lines must match the coalescing segment size")
        if self.warp_size <= 0 or self.sm_count <= 0:
            raise ConfigError("warp_size and sm_count must be positive")
        if self.pm.wpq_capacity < 1 or self.pm.write_banks < 1:
            raise ConfigError("pm.wpq_capacity and pm.write_banks must be >= 1")


@dataclass
class SimConfig:
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    agpm: AgpmConfig = field(default_factory=AgpmConfig)
    bucl_threshold: int = 8

    def validate(self) -> None:
        self.hierarchy.validate()
        if self.agpm.metric_formula not in ("rehit", "literal"):
            raise ConfigError(f"unknown agpm.metric_formula {self.agpm.metric_formula!r}")
        if self.bucl_threshold < 1:
            raise ConfigError("bucl_threshold must be >= 1")


def _set_dotted(obj: Any, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    target = obj
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"unknown config key {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {dotted!r} names a section, not a value")
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{dotted} expects a boolean")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif type(current) is not type(value):
        raise ConfigError(f"{dotted} expects {type(current).__name__}, got {type(value).__name__}")
    setattr(target, leaf, value)


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


# keys under these prefixes are routed into SimConfig.hierarchy
_TOP_LEVEL = {"agpm", "bucl_threshold"}


def config_from_mapping(tree: dict) -> SimConfig:
    cfg = SimConfig()
    for key, value in _flatten(tree).items():
        head = key.split(".", 1)[0]
        if head == "hierarchy":
            _set_dotted(cfg, key, value)
        elif head in _TOP_LEVEL:
            _set_dotted(cfg, key, value)
        else:
            _set_dotted(cfg.hierarchy, key, value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> SimConfig:
    if path is None:
        cfg = SimConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    try:
        with path.open("rb") as fh:
            tree = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(tree)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, int) and value >= 0x10000:
        return hex(value)
    return repr(value)


def dump_config(cfg: SimConfig) -> str:
    """Render every setting as ``dotted.key = value`` lines (valid TOML)."""
    lines = []

    def walk(obj: Any, prefix: str) -> None:
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name} = {_toml_value(value)}")

    walk(cfg.hierarchy, "")
    walk(cfg.agpm, "agpm.")
    lines.append(f"bucl_threshold = {cfg.bucl_threshold}")
    return "\n".join(lines) + "\n"
