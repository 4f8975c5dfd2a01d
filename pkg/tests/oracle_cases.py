"""Random trace generation and side-by-side comparison against the naive model."""

from __future__ import annotations

import math
import random

from kvpsim.config import HardwareConfig
from kvpsim.memsim import MemoryHierarchy

from naive_memsim import Op, simulate

MAX_OPS = 10_000
MAX_LINES = 64


def random_hardware(rng: random.Random) -> HardwareConfig:
    line = rng.choice([16, 32, 64])
    lat_l1 = rng.randint(1, 4)
    lat_l2 = rng.randint(lat_l1 + 1, 12)
    lat_hbm = rng.randint(lat_l2 + 1, 40)
    bw_hbm = rng.choice([4, 8, 16, 24, 64, 100])
    return HardwareConfig(
        l1_capacity=line * rng.randint(1, 8),
        l2_capacity=line * rng.randint(2, 32),
        line_size=line,
        lat_l1=lat_l1,
        lat_l2=lat_l2,
        lat_hbm=lat_hbm,
        bw_l2=bw_hbm * 4,
        bw_hbm=bw_hbm,
        sm_count=rng.randint(1, 3),
        max_blocks_per_sm=1,
        prefetch_queue_depth=rng.randint(1, 6),
    )


def random_trace(rng: random.Random, hw: HardwareConfig, max_ops: int = MAX_OPS) -> list[Op]:
    """Log-uniform length so both short and long traces are common."""
    n_ops = int(math.exp(rng.uniform(0, math.log(max_ops))))
    n_lines = rng.randint(1, MAX_LINES)
    ls = hw.line_size
    prefetch_share = rng.random() * 0.6
    mean_gap = rng.choice([0.3, 1, 4, 20])
    ops = []
    t = 0
    for _ in range(n_ops):
        t += int(rng.expovariate(1 / mean_gap))
        first = rng.randrange(n_lines)
        span = rng.randint(1, min(3, n_lines - first))
        offset = rng.randrange(ls)
        end = (first + span) * ls
        addr = first * ls + offset
        length = rng.randint(1, end - addr)
        ops.append(Op(
            cycle=t,
            kind="prefetch" if rng.random() < prefetch_share else "demand",
            sm=rng.randrange(hw.sm_count),
            addr=addr,
            length=length,
            priority=rng.choice(["normal", "evict_first"]),
            reads=rng.randint(1, 3),
        ))
    return ops


def run_fast(hw: HardwareConfig, ops: list[Op]):
    """Drive kvpsim.memsim with the same trace; same output shape as the oracle."""
    log = []
    mem = MemoryHierarchy(hw, log=log.append)
    reqs = []
    for op in ops:
        while mem.clock < op.cycle:
            mem.run_until(op.cycle)
        if op.kind == "prefetch":
            mem.prefetch_l2(op.addr, op.length, op.priority, op.reads)
        else:
            reqs.append(mem.demand_load(op.sm, op.addr, op.length, op.priority, op.reads))
    mem.drain()
    ls = hw.line_size
    events, hbm = [], []
    for r in log:
        if r["level"] == "hbm":
            hbm.append((r["cycle"], r["kind"] == "prefetch_l2", r["addr"] // ls))
        else:
            kind = "prefetch" if r["kind"] == "prefetch_l2" else "demand"
            events.append((r["cycle"], kind, r["level"], r["addr"] // ls, r["hit"]))
    return events, [q.completion for q in reqs], sorted(hbm)


def compare_case(seed: int, max_ops: int = MAX_OPS) -> tuple[bool, str]:
    rng = random.Random(seed)
    hw = random_hardware(rng)
    ops = random_trace(rng, hw, max_ops)
    fast = run_fast(hw, ops)
    slow = simulate(hw, ops)
    for name, a, b in zip(("probe stream", "completions", "hbm fills"), fast, slow):
        if a != b:
            idx = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
            return False, f"seed {seed}: {name} differ at #{idx}: {a[idx:idx + 1]} vs {b[idx:idx + 1]}"
    return True, ""
