"""Slow, literal reference model of the memory hierarchy used as a test oracle.

Written independently of ``kvpsim.memsim``: caches are plain lists, the HBM
channel is simulated one cycle at a time with an explicit byte budget, and
request completion is computed from the per-line ready times at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class Fill:
    line: int
    left: int
    prefetch: bool
    ready: Optional[int] = None
    promoted: bool = False


@dataclass
class Op:
    cycle: int
    kind: str  # "demand" or "prefetch"
    sm: int
    addr: int
    length: int
    priority: str = "normal"
    reads: int = 1


@dataclass
class Request:
    issue: int
    parts: list = field(default_factory=list)  # (fill, floor) per line

    def completion(self) -> int:
        return max(max(floor, fill.ready) for fill, floor in self.parts)


class NaiveL2:
    """Three ordered lists; victims come from the front of the first non-empty one."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.classes = {"consumed": [], "evict_first": [], "normal": []}
        self.data: dict[int, Fill] = {}
        self.reads_left: dict[int, int] = {}

    def where(self, line):
        for name, lst in self.classes.items():
            if line in lst:
                return name
        return None

    def touch(self, line) -> Optional[Fill]:
        name = self.where(line)
        if name is None:
            return None
        lst = self.classes[name]
        lst.remove(line)
        lst.append(line)
        return self.data[line]

    def read(self, line):
        if line not in self.reads_left:
            return
        self.reads_left[line] -= 1
        if self.reads_left[line] == 0:
            del self.reads_left[line]
            self.classes["evict_first"].remove(line)
            self.classes["consumed"].append(line)

    def install(self, line, fill, priority, reads):
        if sum(len(v) for v in self.classes.values()) >= self.capacity:
            for name in ("consumed", "evict_first", "normal"):
                if self.classes[name]:
                    victim = self.classes[name].pop(0)
                    del self.data[victim]
                    self.reads_left.pop(victim, None)
                    break
        self.data[line] = fill
        if priority == "evict_first":
            self.classes["evict_first"].append(line)
            self.reads_left[line] = max(reads, 1)
        else:
            self.classes["normal"].append(line)


class NaiveL1:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.order: list[int] = []
        self.data: dict[int, tuple] = {}

    def get(self, line):
        if line not in self.data:
            return None
        self.order.remove(line)
        self.order.append(line)
        return self.data[line]

    def put(self, line, value):
        if line in self.data:
            self.order.remove(line)
        elif len(self.order) >= self.capacity:
            del self.data[self.order.pop(0)]
        self.order.append(line)
        self.data[line] = value


def simulate(hw, ops: list[Op]):
    """Run ``ops`` (sorted by cycle); return (events, completions, hbm fills).

    ``events`` lists (cycle, kind, level, line, hit) probe outcomes in issue
    order; ``completions`` holds one completion cycle per demand request;
    ``hbm fills`` is the sorted list of (ready, prefetch, line).
    """
    ls = hw.line_size
    l1 = [NaiveL1(hw.l1_capacity // ls) for _ in range(hw.sm_count)]
    l2 = NaiveL2(hw.l2_capacity // ls)
    demand_q: list[Fill] = []
    prefetch_q: list[Fill] = []
    prefetch_groups: list[list[Fill]] = []
    requests: list[Request] = []
    events = []
    hbm = []

    def in_flight(now):
        # a group stays retired once the clock has passed all its ready times
        prefetch_groups[:] = [g for g in prefetch_groups if any(f.ready is None or f.ready > now for f in g)]
        return len(prefetch_groups)

    def issue(op: Op, now: int):
        lines = range(op.addr // ls, (op.addr + op.length - 1) // ls + 1)
        if op.kind == "prefetch":
            if in_flight(now) >= hw.prefetch_queue_depth:
                events.append((now, "prefetch", "queue", op.addr // ls, None))
                return
            group = []
            for line in lines:
                fill = l2.touch(line)
                events.append((now, "prefetch", "l2", line, fill is not None))
                if fill is None:
                    fill = Fill(line, ls, prefetch=True)
                    l2.install(line, fill, op.priority, op.reads)
                    prefetch_q.append(fill)
                    group.append(fill)
            if group:
                prefetch_groups.append(group)
            return
        req = Request(now)
        for line in lines:
            entry = l1[op.sm].get(line)
            if entry is not None:
                fill, floor = entry
                req.parts.append((fill, max(floor, now + hw.lat_l1)))
                events.append((now, "demand", "l1", line, True))
                continue
            events.append((now, "demand", "l1", line, False))
            fill = l2.touch(line)
            if fill is not None:
                events.append((now, "demand", "l2", line, True))
                l2.read(line)
                floor = now + hw.lat_l2
                if fill.ready is None and fill.prefetch and not fill.promoted:
                    fill.promoted = True
                    prefetch_q.remove(fill)
                    demand_q.append(fill)
            else:
                events.append((now, "demand", "l2", line, False))
                fill = Fill(line, ls, prefetch=False)
                l2.install(line, fill, op.priority, op.reads)
                l2.read(line)
                demand_q.append(fill)
                floor = now
            l1[op.sm].put(line, (fill, floor))
            req.parts.append((fill, floor))
        requests.append(req)

    def serve(cycle: int):
        budget = hw.bw_hbm
        for queue in (demand_q, prefetch_q):
            while queue and budget > 0:
                fill = queue[0]
                moved = min(budget, fill.left)
                fill.left -= moved
                budget -= moved
                if fill.left == 0:
                    fill.ready = cycle + hw.lat_hbm
                    hbm.append((fill.ready, fill.prefetch, fill.line))
                    queue.pop(0)

    i = 0
    now = 0
    while i < len(ops) or demand_q or prefetch_q:
        if i < len(ops) and not demand_q and not prefetch_q:
            now = max(now, ops[i].cycle)
        while i < len(ops) and ops[i].cycle == now:
            issue(ops[i], now)
            i += 1
        serve(now)
        now += 1
    return events, [r.completion() for r in requests], sorted(hbm)
