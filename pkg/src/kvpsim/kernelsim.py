"""Paged-attention decode kernel model running on :mod:`kvpsim.memsim`.

The grid has one thread block per (query head, sequence). Each thread block
has ``threads_per_block / 32`` warps; warp ``i`` handles KV blocks
``i, i + w, i + 2w, ...`` of its sequence. Every iteration a warp loads a K
block, computes QK^T, loads the matching V block and computes logits.V.
Prefetch variants additionally ask L2 for the block the warp will need on its
next iteration while it computes on the current one.
"""

from __future__ import annotations

import heapq
import json
import sys
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Optional

from .config import HardwareConfig, Scenario, VariantKind
from .kvlayout import KVTables, blocks_per_sequence, build_block_tables, kv_head_for_q_head
from .memsim import MemCounters, MemoryHierarchy, MemRequest


class SimulationError(RuntimeError):
    """An internal invariant of the simulation did not hold."""


class Phase(str, Enum):
    ISSUE_LOAD_K = "issue_load_k"
    WAIT_K = "wait_k"
    COMPUTE_QK = "compute_qk"
    ISSUE_LOAD_V = "issue_load_v"
    WAIT_V = "wait_v"
    COMPUTE_LV = "compute_lv"
    DONE = "done"


_AFTER_ISSUE = {Phase.ISSUE_LOAD_K: Phase.WAIT_K, Phase.ISSUE_LOAD_V: Phase.WAIT_V}
_AFTER_WAIT = {Phase.WAIT_K: Phase.COMPUTE_QK, Phase.WAIT_V: Phase.COMPUTE_LV}


@dataclass(frozen=True)
class KernelLaunch:
    q_heads: int
    batch: int
    warps_per_block: int
    blocks_per_seq: int

    @classmethod
    def from_scenario(cls, s: Scenario) -> "KernelLaunch":
        return cls(
            q_heads=s.model.q_heads,
            batch=s.workload.batch,
            warps_per_block=s.model.warps_per_block,
            blocks_per_seq=blocks_per_sequence(s.workload.seq_len, s.model.tokens_per_block),
        )

    @property
    def num_thread_blocks(self) -> int:
        return self.q_heads * self.batch

    def thread_block(self, index: int) -> tuple[int, int]:
        """(q_head, sequence) of a linear thread-block index; heads vary fastest."""
        return index % self.q_heads, index // self.q_heads

    def warp_range(self, warp: int) -> range:
        """Block ordinals visited by warp ``warp`` of any thread block."""
        return range(warp, self.blocks_per_seq, self.warps_per_block)


@dataclass(eq=False)
class WarpState:
    wid: int
    sm: int
    thread_block: int
    index: int
    seq: int
    q_head: int
    kv_head: int
    block_idx: int
    end: int
    stride: int
    phase: Phase = Phase.ISSUE_LOAD_K
    pending: Optional[MemRequest] = None
    remaining: int = 0
    wait_start: int = 0
    start_cycle: int = 0
    done_cycle: Optional[int] = None
    instructions: int = 0
    loads: int = 0
    prefetches: int = 0
    issue_cycles: int = 0
    compute_cycles: int = 0
    stall_long_scoreboard: int = 0
    stall_other: int = 0


class BlockScheduler:
    """Round-robin thread-block dispatch with a per-SM residency cap."""

    def __init__(self, num_blocks: int, sm_count: int, max_blocks_per_sm: int):
        if num_blocks < 1:
            raise ValueError("grid is empty")
        self.sm_count = sm_count
        self.max_blocks_per_sm = max_blocks_per_sm
        self.pending = deque(range(num_blocks))

    def initial(self) -> list[tuple[int, int]]:
        out = []
        for _ in range(self.max_blocks_per_sm):
            for sm in range(self.sm_count):
                if not self.pending:
                    return out
                out.append((self.pending.popleft(), sm))
        return out

    def release(self, sm: int) -> Optional[int]:
        """A block on ``sm`` finished; return the block that takes its slot."""
        return self.pending.popleft() if self.pending else None


@dataclass(frozen=True)
class Assignment:
    thread_block: int
    sm: int
    start: int
    end: int


def schedule_thread_blocks(launch: KernelLaunch, hw: HardwareConfig,
                           durations: Callable[[int], int] | list[int]) -> list[Assignment]:
    """Timeline of thread blocks given a fixed runtime per block."""
    dur = durations if callable(durations) else durations.__getitem__
    sched = BlockScheduler(launch.num_thread_blocks, hw.sm_count, hw.max_blocks_per_sm)
    heap: list[tuple[int, int, int]] = []
    out = []
    for tb, sm in sched.initial():
        heapq.heappush(heap, (dur(tb), tb, sm))
        out.append(Assignment(tb, sm, 0, dur(tb)))
    while heap:
        end, _, sm = heapq.heappop(heap)
        nxt = sched.release(sm)
        if nxt is not None:
            heapq.heappush(heap, (end + dur(nxt), nxt, sm))
            out.append(Assignment(nxt, sm, end, end + dur(nxt)))
    return sorted(out, key=lambda a: a.thread_block)


@dataclass(frozen=True)
class WarpSummary:
    wid: int
    sm: int
    start: int
    done: int
    instructions: int
    issue_cycles: int
    compute_cycles: int
    stall_long_scoreboard: int
    stall_other: int
    idle_cycles: int


@dataclass(frozen=True)
class SimReport:
    duration_cycles: int
    thread_blocks: int
    warps: int
    resident_warp_slots: int
    instructions: int
    load_instructions: int
    prefetch_instructions: int
    issue_cycles: int
    compute_cycles: int
    stall_long_scoreboard: int
    stall_other: int
    idle_cycles: int
    memory: MemCounters
    per_warp: tuple[WarpSummary, ...] = field(repr=False)

    @property
    def active_cycles(self) -> int:
        return self.issue_cycles + self.compute_cycles + self.stall_long_scoreboard + self.stall_other

    def conservation_errors(self) -> list[str]:
        """Warps whose cycle categories do not add up to the kernel duration."""
        errors = []
        for w in self.per_warp:
            total = w.issue_cycles + w.compute_cycles + w.stall_long_scoreboard + w.stall_other + w.idle_cycles
            if total != self.duration_cycles:
                errors.append(f"warp {w.wid}: {total} != {self.duration_cycles}")
        return errors

    def to_dict(self, per_warp: bool = True) -> dict:
        d = asdict(self)
        d["memory"] = self.memory.to_dict()
        if per_warp:
            d["per_warp"] = [asdict(w) for w in self.per_warp]
        else:
            del d["per_warp"]
        return d

    def to_json(self, per_warp: bool = True) -> str:
        return json.dumps(self.to_dict(per_warp), sort_keys=True)


class KernelModel:
    """Shared state for one simulated launch."""

    def __init__(self, scenario: Scenario, mem_log=None, timeline=None):
        self.s = scenario
        hw = scenario.hardware
        self.hw = hw
        self.launch = KernelLaunch.from_scenario(scenario)
        self.tables: KVTables = build_block_tables(scenario.model, scenario.workload, hw.line_size, hw.hbm_capacity)
        self.block_bytes = self.tables.k.block_bytes
        kind = scenario.variant.kind
        self.prefetch_k = kind in (VariantKind.PREFETCH_K, VariantKind.PREFETCH_KV)
        self.prefetch_v = kind is VariantKind.PREFETCH_KV
        self.at_load_issue = scenario.variant.prefetch_at_load_issue
        self.priority = scenario.variant.eviction_priority
        self.readers = scenario.model.group_size  # query heads reading each KV block
        self.cc_qk = scenario.workload.compute_cycles_qk
        self.cc_lv = scenario.workload.compute_cycles_lv
        self.mem = MemoryHierarchy(hw, log=mem_log)
        self.timeline = timeline
        self.sched = BlockScheduler(self.launch.num_thread_blocks, hw.sm_count, hw.max_blocks_per_sm)
        self.warps: list[WarpState] = []
        self.tb_left: dict[int, int] = {}
        self.tb_sm: dict[int, int] = {}

    def _mark(self, w: WarpState, t: int) -> None:
        if self.timeline is not None:
            self.timeline({"cycle": t, "warp": w.wid, "phase": w.phase.value})

    def start_thread_block(self, tb: int, sm: int, t: int) -> list[WarpState]:
        """Create the warps of ``tb`` at cycle ``t``; returns those with work."""
        launch = self.launch
        q_head, seq = launch.thread_block(tb)
        kv_head = kv_head_for_q_head(q_head, self.s.model)
        w_count = launch.warps_per_block
        self.tb_sm[tb] = sm
        self.tb_left[tb] = w_count
        runnable = []
        for i in range(w_count):
            w = WarpState(
                wid=tb * w_count + i, sm=sm, thread_block=tb, index=i, seq=seq, q_head=q_head,
                kv_head=kv_head, block_idx=i, end=launch.blocks_per_seq, stride=w_count, start_cycle=t,
            )
            self.warps.append(w)
            if w.block_idx >= w.end:
                w.phase = Phase.DONE
                w.done_cycle = t
                self.tb_left[tb] -= 1
            else:
                runnable.append(w)
            self._mark(w, t)
        return runnable

    def address(self, w: WarpState, phase: Phase, ordinal: int) -> int:
        table = self.tables.k if phase in (Phase.ISSUE_LOAD_K, Phase.WAIT_K, Phase.COMPUTE_QK) else self.tables.v
        return table.lookup(w.seq, w.kv_head, ordinal)

    def maybe_prefetch(self, w: WarpState, phase: Phase) -> None:
        is_k = phase in (Phase.ISSUE_LOAD_K, Phase.COMPUTE_QK)
        if not (self.prefetch_k if is_k else self.prefetch_v):
            return
        nxt = w.block_idx + w.stride
        if nxt >= w.end:
            return
        self.mem.prefetch_l2(self.address(w, phase, nxt), self.block_bytes, self.priority, self.readers)
        w.instructions += 1
        w.prefetches += 1

    def issue_load(self, w: WarpState, t: int) -> MemRequest:
        addr = self.address(w, w.phase, w.block_idx)
        req = self.mem.demand_load(w.sm, addr, self.block_bytes, self.priority, self.readers)
        if self.at_load_issue:
            self.maybe_prefetch(w, w.phase)
        w.pending = req
        w.instructions += 1
        w.loads += 1
        w.issue_cycles += 1
        w.wait_start = t + 1
        w.phase = _AFTER_ISSUE[w.phase]
        self._mark(w, t + 1)
        return req

    def enter_compute(self, w: WarpState, t: int) -> int:
        """Wait -> compute at ``t``; returns the compute length."""
        w.phase = _AFTER_WAIT[w.phase]
        w.pending = None
        if not self.at_load_issue:
            self.maybe_prefetch(w, w.phase)
        w.remaining = self.cc_qk if w.phase is Phase.COMPUTE_QK else self.cc_lv
        self._mark(w, t)
        return w.remaining

    def after_compute(self, w: WarpState, t: int) -> bool:
        """Compute finished at ``t``; returns True when the warp is done."""
        if w.phase is Phase.COMPUTE_QK:
            w.phase = Phase.ISSUE_LOAD_V
        else:
            w.block_idx += w.stride
            if w.block_idx < w.end:
                w.phase = Phase.ISSUE_LOAD_K
            else:
                w.phase = Phase.DONE
                w.done_cycle = t
                self.tb_left[w.thread_block] -= 1
        self._mark(w, t)
        return w.phase is Phase.DONE

    def report(self) -> SimReport:
        duration = max(w.done_cycle for w in self.warps)
        summaries = tuple(
            WarpSummary(
                wid=w.wid, sm=w.sm, start=w.start_cycle, done=w.done_cycle, instructions=w.instructions,
                issue_cycles=w.issue_cycles, compute_cycles=w.compute_cycles,
                stall_long_scoreboard=w.stall_long_scoreboard, stall_other=w.stall_other,
                idle_cycles=duration - (w.done_cycle - w.start_cycle),
            )
            for w in sorted(self.warps, key=lambda w: w.wid)
        )
        hw = self.hw
        slots = min(self.launch.num_thread_blocks, hw.sm_count * hw.max_blocks_per_sm) * self.launch.warps_per_block
        return SimReport(
            duration_cycles=duration,
            thread_blocks=self.launch.num_thread_blocks,
            warps=len(summaries),
            resident_warp_slots=slots,
            instructions=sum(w.instructions for w in self.warps),
            load_instructions=sum(w.loads for w in self.warps),
            prefetch_instructions=sum(w.prefetches for w in self.warps),
            issue_cycles=sum(w.issue_cycles for w in summaries),
            compute_cycles=sum(w.compute_cycles for w in summaries),
            stall_long_scoreboard=sum(w.stall_long_scoreboard for w in summaries),
            stall_other=sum(w.stall_other for w in summaries),
            idle_cycles=sum(w.idle_cycles for w in summaries),
            memory=MemCounters(**self.mem.counters.to_dict()),
            per_warp=summaries,
        )


def step_warp(w: WarpState, kernel: KernelModel) -> list[MemRequest]:
    """Advance one warp by the single cycle at ``kernel.mem.clock``.

    Returns the demand loads issued this cycle.
    """
    t = kernel.mem.clock
    phase = w.phase
    if phase is Phase.DONE:
        raise ValueError(f"warp {w.wid} is done")
    if phase in _AFTER_ISSUE:
        return [kernel.issue_load(w, t)]
    if phase in _AFTER_WAIT:
        if w.pending.completion is None:
            w.stall_long_scoreboard += 1
            return []
        kernel.enter_compute(w, t)
    w.compute_cycles += 1
    w.instructions += 1
    w.remaining -= 1
    if w.remaining == 0:
        kernel.after_compute(w, t + 1)
    return []


def _run_events(k: KernelModel) -> None:
    mem = k.mem
    heap: list[tuple[int, int]] = []
    waiting: dict[int, WarpState] = {}
    by_id: dict[int, WarpState] = {}

    def schedule(ws: list[WarpState], t: int) -> None:
        for w in ws:
            by_id[w.wid] = w
            heapq.heappush(heap, (t, w.wid))

    for tb, sm in k.sched.initial():
        schedule(k.start_thread_block(tb, sm, 0), 0)

    def finish(w: WarpState, t: int) -> None:
        if k.tb_left[w.thread_block] == 0:
            nxt = k.sched.release(w.sm)
            if nxt is not None:
                schedule(k.start_thread_block(nxt, w.sm, t), t)

    while heap or waiting:
        limit = heap[0][0] if heap else sys.maxsize
        completed = mem.run_until(limit)
        t = mem.clock
        ready = [waiting.pop(r.rid) for r in completed]
        while True:
            while heap and heap[0][0] == t:
                ready.append(by_id[heapq.heappop(heap)[1]])
            if not ready:
                break
            ready.sort(key=lambda w: w.wid)
            for w in ready:
                if w.phase in _AFTER_WAIT:
                    # load completed: the completion cycle itself is not a stall
                    w.stall_long_scoreboard += t - w.wait_start
                    cycles = k.enter_compute(w, t)
                    w.compute_cycles += cycles
                    w.instructions += cycles
                    heapq.heappush(heap, (t + cycles, w.wid))
                    continue
                if w.phase in (Phase.COMPUTE_QK, Phase.COMPUTE_LV):
                    if k.after_compute(w, t):
                        finish(w, t)
                        continue
                req = k.issue_load(w, t)
                waiting[req.rid] = w
            ready = []


def _run_cycles(k: KernelModel) -> None:
    mem = k.mem
    active: list[WarpState] = []
    for tb, sm in k.sched.initial():
        active.extend(k.start_thread_block(tb, sm, 0))
    while active:
        t = mem.clock
        for w in active:
            step_warp(w, k)
        still = []
        released = set()
        for w in active:
            if w.phase is Phase.DONE:
                if k.tb_left[w.thread_block] == 0 and w.thread_block not in released:
                    released.add(w.thread_block)
                    nxt = k.sched.release(w.sm)
                    if nxt is not None:
                        still.extend(k.start_thread_block(nxt, w.sm, t + 1))
            else:
                still.append(w)
        active = sorted(still, key=lambda w: w.wid)
        mem.advance(1)


def run_kernel(scenario: Scenario, *, stepping: str = "event",
               mem_log: Optional[Callable[[dict], None]] = None,
               timeline: Optional[Callable[[dict], None]] = None) -> SimReport:
    """Simulate the whole grid to completion.

    ``stepping="cycle"`` drives every warp through :func:`step_warp` one cycle
    at a time; ``"event"`` jumps between phase changes. Both give identical
    reports; the cycle driver is only practical for small scenarios.
    """
    k = KernelModel(scenario, mem_log=mem_log, timeline=timeline)
    if stepping == "event":
        _run_events(k)
    elif stepping == "cycle":
        _run_cycles(k)
    else:
        raise ValueError(f"unknown stepping mode {stepping!r}")
    report = k.report()
    errors = report.conservation_errors()
    if errors:
        raise SimulationError("cycle accounting broken: " + "; ".join(errors[:3]))
    return report

