"""Profiler-style metrics derived from a :class:`SimReport`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

from .config import HardwareConfig
from .kernelsim import SimReport

UNDEFINED = None  # hit rate of a level that saw no demand probes

# (attribute, label, unit) in the order of a profiler comparison table
TABLE_ROWS = (
    ("duration_cycles", "Duration", "cycle"),
    ("compute_throughput", "Compute Throughput", "%"),
    ("memory_throughput", "Memory Throughput", "%"),
    ("l1_hit_rate", "L1 Cache Hit Rate (Load)", "%"),
    ("l2_hit_rate", "L2 Cache Hit Rate (Load)", "%"),
    ("cpi", "Cycles Per Instruction", "cycle"),
    ("stall_long_scoreboard", "Stall Long Scoreboard", "cycle"),
)


@dataclass(frozen=True)
class MetricSet:
    duration_cycles: int
    compute_throughput: float
    memory_throughput: float
    l1_hit_rate: Optional[float]
    l2_hit_rate: Optional[float]
    cpi: float
    stall_long_scoreboard: float
    # HBM utilisation counting demand fills only
    memory_throughput_demand: float = 0.0
    speedup: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else UNDEFINED


def derive_metrics(r: SimReport, hw: HardwareConfig) -> MetricSet:
    m = r.memory
    duration = r.duration_cycles
    capacity = duration * hw.bw_hbm
    instr = r.instructions
    return MetricSet(
        duration_cycles=duration,
        compute_throughput=r.compute_cycles / (duration * r.resident_warp_slots) if duration else 0.0,
        memory_throughput=(m.hbm_bytes_demand + m.hbm_bytes_prefetch) / capacity if capacity else 0.0,
        memory_throughput_demand=m.hbm_bytes_demand / capacity if capacity else 0.0,
        l1_hit_rate=_ratio(m.l1_demand_hits, m.l1_demand_probes),
        l2_hit_rate=_ratio(m.l2_demand_hits, m.l2_demand_probes),
        cpi=r.active_cycles / instr if instr else 0.0,
        stall_long_scoreboard=r.stall_long_scoreboard / instr if instr else 0.0,
    )


def speedup(baseline: MetricSet | float, optimized: MetricSet | float) -> float:
    """Ratio of baseline duration to optimized duration."""
    b = baseline.duration_cycles if isinstance(baseline, MetricSet) else baseline
    o = optimized.duration_cycles if isinstance(optimized, MetricSet) else optimized
    if b <= 0 or o <= 0:
        raise ValueError("durations must be > 0")
    return b / o


def with_speedup(baseline: MetricSet, optimized: MetricSet) -> MetricSet:
    return replace(optimized, speedup=speedup(baseline, optimized))


def amdahl_e2e(kernel_speedup: float, attention_fraction: float) -> float:
    """End-to-end speedup when only the attention share of runtime gets faster."""
    if kernel_speedup <= 0:
        raise ValueError("kernel_speedup must be > 0")
    if not 0.0 <= attention_fraction <= 1.0:
        raise ValueError("attention_fraction must lie in [0, 1]")
    return 1.0 / ((1.0 - attention_fraction) + attention_fraction / kernel_speedup)


def format_value(attr: str, value) -> str:
    if value is None:
        return "n/a"
    if attr == "duration_cycles":
        return str(value)
    if attr in ("compute_throughput", "memory_throughput", "l1_hit_rate", "l2_hit_rate"):
        return f"{100 * value:.2f}"
    return f"{value:.2f}"


def format_table(columns: Sequence[tuple[str, MetricSet]], with_speedup_row: bool = False) -> str:
    """Aligned plain-text table, one column per named MetricSet."""
    header = ["Metric"] + [name for name, _ in columns]
    rows = [header]
    for attr, label, unit in TABLE_ROWS:
        rows.append([f"{label} ({unit})"] + [format_value(attr, getattr(ms, attr)) for _, ms in columns])
    if with_speedup_row:
        base = columns[0][1]
        rows.append(["Speedup (x)"] + [f"{speedup(base, ms):.2f}" for _, ms in columns])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
