"""Cycle-level model of the L1 / L2 / HBM hierarchy.

Timing rules
------------
* Requests are split into ``line_size`` lines. An L1 hit completes after
  ``lat_l1``, an L2 hit after ``lat_l2``. A double miss allocates the line in
  L2 and L1 immediately and queues a fill on the HBM channel.
* The HBM channel moves ``bw_hbm`` bytes per cycle. Demand fills are served
  FIFO before any prefetch fill; a prefetch fill only gets bytes left over in a
  cycle. A fill whose last byte moves in cycle ``c`` is ready at
  ``c + lat_hbm``. Bytes queued at cycle ``t`` can move during cycle ``t``.
* A probe that finds a line still in flight counts as a hit and completes at
  ``max(probe latency, fill ready)``. A demand hit on an in-flight prefetch
  fill moves that fill to the tail of the demand queue.
* Prefetches never touch L1 and are never counted in demand hit rates.
* Lines carry the eviction priority of the request that installed them. A
  demand load that makes the last expected read of an ``evict_first`` line
  demotes it to the consumed class, which is evicted before anything else.

All time is integer cycles. Only cycles strictly before the current clock are
ever committed on the channel, so requests issued at the current clock get
priority in the same cycle.
"""

from __future__ import annotations

import heapq
import json
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass
from typing import IO, Callable, Optional

from .config import EvictionPriority, HardwareConfig

DEMAND = "demand_load"
PREFETCH = "prefetch_l2"


class _Fill:
    """One line moving from HBM into L2."""

    __slots__ = ("line", "remaining", "ready", "waiters", "prefetch", "promoted", "record")

    def __init__(self, line: int, nbytes: int, prefetch: bool, record: Optional["_PrefetchRecord"] = None):
        self.line = line
        self.remaining = nbytes
        self.ready: Optional[int] = None
        self.waiters: Optional[list] = []
        self.prefetch = prefetch
        self.promoted = False
        self.record = record


class _PrefetchRecord:
    __slots__ = ("pending", "ready")

    def __init__(self) -> None:
        self.pending = 0
        self.ready = 0


class MemRequest:
    """Handle for a demand load. ``completion`` stays None until reported."""

    __slots__ = ("rid", "kind", "addr", "len", "sm", "issue_cycle", "completion", "_finish", "_pending")

    def __init__(self, rid: int, kind: str, addr: int, length: int, sm: int, issue_cycle: int):
        self.rid = rid
        self.kind = kind
        self.addr = addr
        self.len = length
        self.sm = sm
        self.issue_cycle = issue_cycle
        self.completion: Optional[int] = None
        self._finish = issue_cycle
        self._pending = 0

    @property
    def done(self) -> bool:
        return self.completion is not None

    def __repr__(self) -> str:
        return (f"MemRequest(rid={self.rid}, addr={self.addr:#x}, len={self.len}, sm={self.sm}, "
                f"issue={self.issue_cycle}, completion={self.completion})")


@dataclass
class MemCounters:
    l1_demand_probes: int = 0
    l1_demand_hits: int = 0
    l2_demand_probes: int = 0
    l2_demand_hits: int = 0
    l2_prefetch_probes: int = 0
    l2_prefetch_hits: int = 0
    hbm_fills_demand: int = 0
    hbm_fills_prefetch: int = 0
    hbm_bytes_demand: int = 0
    hbm_bytes_prefetch: int = 0
    demand_requests: int = 0
    demand_bytes_requested: int = 0
    prefetches_issued: int = 0
    prefetches_dropped: int = 0
    prefetch_promotions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class LRUCache:
    """Fully associative line cache with plain LRU replacement."""

    def __init__(self, capacity_lines: int):
        if capacity_lines < 1:
            raise ValueError("cache needs at least one line")
        self.capacity = capacity_lines
        self._lines: OrderedDict = OrderedDict()

    def lookup(self, line: int):
        value = self._lines.get(line)
        if value is not None:
            self._lines.move_to_end(line)
        return value

    def insert(self, line: int, value) -> Optional[int]:
        victim = None
        if line not in self._lines and len(self._lines) >= self.capacity:
            victim, _ = self._lines.popitem(last=False)
        self._lines[line] = value
        self._lines.move_to_end(line)
        return victim

    def __contains__(self, line: int) -> bool:
        return line in self._lines

    def __len__(self) -> int:
        return len(self._lines)

    def lines(self) -> list[int]:
        """Resident lines, least recently used first."""
        return list(self._lines)


class PriorityLRUCache:
    """L2 model with three eviction classes, each ordered oldest first.

    Victims come from ``consumed`` first, then ``evict_first``, then
    ``normal``. An ``evict_first`` line is installed expecting some number of
    demand reads (one per query head sharing the block) and moves to
    ``consumed`` after the last of them: nobody will ask for it again, so it
    is the cheapest line to lose.
    """

    def __init__(self, capacity_lines: int):
        if capacity_lines < 1:
            raise ValueError("cache needs at least one line")
        self.capacity = capacity_lines
        self.normal: OrderedDict = OrderedDict()
        self.evict_first: OrderedDict = OrderedDict()
        self.consumed: OrderedDict = OrderedDict()
        self._where: dict[int, OrderedDict] = {}
        self._reads_left: dict[int, int] = {}

    def _segment(self, line: int) -> Optional[OrderedDict]:
        return self._where.get(line)

    def lookup(self, line: int):
        """Return the line's value and refresh its recency, or None on miss."""
        seg = self._segment(line)
        if seg is None:
            return None
        seg.move_to_end(line)
        return seg[line]

    def consume(self, line: int) -> None:
        """Count one demand read of a resident ``evict_first`` line."""
        left = self._reads_left.get(line)
        if left is None:
            return
        if left > 1:
            self._reads_left[line] = left - 1
        else:
            del self._reads_left[line]
            self.consumed[line] = self.evict_first.pop(line)
            self._where[line] = self.consumed

    def priority(self, line: int) -> Optional[EvictionPriority]:
        seg = self._segment(line)
        if seg is None:
            return None
        return EvictionPriority.NORMAL if seg is self.normal else EvictionPriority.EVICT_FIRST

    def insert(self, line: int, value, priority: EvictionPriority = EvictionPriority.NORMAL,
               reads: int = 1) -> Optional[int]:
        where = self._where
        victim = evict_policy_apply(self, line)
        if victim is not None:
            del where.pop(victim)[victim]
            self._reads_left.pop(victim, None)
        seg = where.get(line)
        if seg is not None:
            del seg[line]
        self._reads_left.pop(line, None)
        if priority is EvictionPriority.EVICT_FIRST:
            target = self.evict_first
            self._reads_left[line] = max(reads, 1)
        else:
            target = self.normal
        target[line] = value
        where[line] = target
        return victim

    def __contains__(self, line: int) -> bool:
        return line in self._where

    def __len__(self) -> int:
        return len(self._where)


def evict_policy_apply(l2_state: PriorityLRUCache, incoming: int) -> Optional[int]:
    """Pick the line that must leave for ``incoming`` to fit, or None.

    Oldest consumed line if any, else least recently used ``evict_first``
    line, else least recently used ``normal`` line.
    """
    if incoming in l2_state or len(l2_state) < l2_state.capacity:
        return None
    segment = l2_state.consumed or l2_state.evict_first or l2_state.normal
    return next(iter(segment))


class MemoryHierarchy:
    """Per-SM L1 caches, one shared L2 and a bandwidth-limited HBM channel.

    One instance belongs to one simulation run; it is not thread-safe.
    """

    def __init__(self, hw: HardwareConfig, log: Optional[Callable[[dict], None]] = None):
        self.hw = hw
        self.clock = 0
        self.l1 = [LRUCache(hw.l1_capacity // hw.line_size) for _ in range(hw.sm_count)]
        self.l2 = PriorityLRUCache(hw.l2_capacity // hw.line_size)
        self.counters = MemCounters()
        self._log = log
        self._demand_q: deque[_Fill] = deque()
        self._prefetch_q: deque[_Fill] = deque()
        self._cyc = 0   # channel cursor: next cycle with free bandwidth
        self._used = 0  # bytes already moved in cycle ``_cyc``
        self._events: list[tuple[int, int, MemRequest]] = []
        self._next_rid = 0
        self._pf_unserved = 0
        self._pf_ready: list[int] = []

    # -- issue ----------------------------------------------------------------

    def _lines(self, addr: int, length: int) -> range:
        if length <= 0:
            raise ValueError(f"request length must be > 0, got {length}")
        ls = self.hw.line_size
        return range(addr // ls, (addr + length - 1) // ls + 1)

    def _enqueue(self, fill: _Fill, queue: deque) -> None:
        if self._cyc < self.clock and self._head() is None:
            self._cyc, self._used = self.clock, 0
        queue.append(fill)

    def _depend(self, req: MemRequest, fill: _Fill, floor: int) -> None:
        if fill.ready is not None:
            req._finish = max(req._finish, floor, fill.ready)
        else:
            req._finish = max(req._finish, floor)
            fill.waiters.append((req, floor))
            req._pending += 1

    def demand_load(self, sm: int, addr: int, length: int,
                    priority: EvictionPriority = EvictionPriority.NORMAL, reads: int = 1) -> MemRequest:
        """Issue a blocking load at the current clock; returns its handle.

        ``priority`` and ``reads`` apply to lines this load installs in L2.
        """
        t = self.clock
        hw = self.hw
        c = self.counters
        lines = self._lines(addr, length)
        priority = EvictionPriority(priority)
        req = MemRequest(self._next_rid, DEMAND, addr, length, sm, t)
        self._next_rid += 1
        c.demand_requests += 1
        c.demand_bytes_requested += length
        l1 = self.l1[sm]
        log = self._log
        for line in lines:
            c.l1_demand_probes += 1
            entry = l1.lookup(line)
            if entry is not None:
                c.l1_demand_hits += 1
                fill, floor = entry
                self._depend(req, fill, max(floor, t + hw.lat_l1))
                if log:
                    log({"cycle": t, "kind": DEMAND, "level": "l1", "addr": line * hw.line_size,
                         "len": hw.line_size, "hit": True})
                continue
            c.l2_demand_probes += 1
            fill = self.l2.lookup(line)
            l2_hit = fill is not None
            if l2_hit:
                c.l2_demand_hits += 1
                self.l2.consume(line)
                floor = t + hw.lat_l2
                if fill.ready is None and fill.prefetch and not fill.promoted:
                    fill.promoted = True
                    c.prefetch_promotions += 1
                    self._enqueue(fill, self._demand_q)
            else:
                fill = _Fill(line, hw.line_size, prefetch=False)
                self.l2.insert(line, fill, priority, reads)
                self.l2.consume(line)
                self._enqueue(fill, self._demand_q)
                floor = t
            l1.insert(line, (fill, floor))
            self._depend(req, fill, floor)
            if log:
                log({"cycle": t, "kind": DEMAND, "level": "l1", "addr": line * hw.line_size,
                     "len": hw.line_size, "hit": False})
                log({"cycle": t, "kind": DEMAND, "level": "l2", "addr": line * hw.line_size,
                     "len": hw.line_size, "hit": l2_hit})
        if req._pending == 0:
            heapq.heappush(self._events, (req._finish, req.rid, req))
        return req

    def inflight_prefetches(self) -> int:
        ready = self._pf_ready
        while ready and ready[0] <= self.clock:
            heapq.heappop(ready)
        return self._pf_unserved + len(ready)

    def prefetch_l2(self, addr: int, length: int,
                    priority: EvictionPriority = EvictionPriority.NORMAL, reads: int = 1) -> bool:
        """Non-blocking L2 prefetch at the current clock.

        Returns False when the prefetch queue is full and the request was
        dropped (the cache is left untouched).
        """
        hw = self.hw
        c = self.counters
        lines = self._lines(addr, length)
        priority = EvictionPriority(priority)
        if self.inflight_prefetches() >= hw.prefetch_queue_depth:
            c.prefetches_dropped += 1
            if self._log:
                self._log({"cycle": self.clock, "kind": PREFETCH, "level": "queue", "addr": addr,
                           "len": length, "hit": None})
            return False
        c.prefetches_issued += 1
        record = _PrefetchRecord()
        for line in lines:
            c.l2_prefetch_probes += 1
            hit = self.l2.lookup(line) is not None
            if hit:
                c.l2_prefetch_hits += 1
            else:
                fill = _Fill(line, hw.line_size, prefetch=True, record=record)
                record.pending += 1
                self.l2.insert(line, fill, priority, reads)
                self._enqueue(fill, self._prefetch_q)
            if self._log:
                self._log({"cycle": self.clock, "kind": PREFETCH, "level": "l2",
                           "addr": line * hw.line_size, "len": hw.line_size, "hit": hit})
        if record.pending:
            self._pf_unserved += 1
        return True

    # -- channel --------------------------------------------------------------

    def _head(self) -> Optional[_Fill]:
        if self._demand_q:
            return self._demand_q[0]
        pq = self._prefetch_q
        while pq and pq[0].promoted:
            pq.popleft()
        return pq[0] if pq else None

    def _complete_fill(self, fill: _Fill, ready: int) -> None:
        fill.ready = ready
        c = self.counters
        if fill.prefetch:
            c.hbm_fills_prefetch += 1
            c.hbm_bytes_prefetch += self.hw.line_size
        else:
            c.hbm_fills_demand += 1
            c.hbm_bytes_demand += self.hw.line_size
        for req, floor in fill.waiters:
            req._finish = max(req._finish, floor, ready)
            req._pending -= 1
            if req._pending == 0:
                heapq.heappush(self._events, (req._finish, req.rid, req))
        fill.waiters = None
        rec = fill.record
        if rec is not None:
            rec.pending -= 1
            rec.ready = max(rec.ready, ready)
            if rec.pending == 0:
                self._pf_unserved -= 1
                heapq.heappush(self._pf_ready, rec.ready)
        if self._log:
            self._log({"cycle": ready, "kind": PREFETCH if fill.prefetch else DEMAND, "level": "hbm",
                       "addr": fill.line * self.hw.line_size, "len": self.hw.line_size, "hit": None})

    def _serve(self, limit: int) -> None:
        """Commit channel cycles before ``limit`` or the next pending completion."""
        bw = self.hw.bw_hbm
        lat = self.hw.lat_hbm
        events = self._events
        while True:
            fill = self._head()
            if fill is None:
                return
            lim = limit if not events or events[0][0] > limit else events[0][0]
            cyc = self._cyc
            if cyc >= lim:
                return
            avail = bw - self._used
            rem = fill.remaining
            if rem <= avail:
                end, used = cyc, self._used + rem
            else:
                over = rem - avail
                k = -(-over // bw)
                end, used = cyc + k, over - (k - 1) * bw
            if end >= lim:
                fill.remaining = rem - (avail + (lim - cyc - 1) * bw)
                self._cyc, self._used = lim, 0
                return
            if self._demand_q and self._demand_q[0] is fill:
                self._demand_q.popleft()
            else:
                self._prefetch_q.popleft()
            fill.remaining = 0
            if used == bw:
                self._cyc, self._used = end + 1, 0
            else:
                self._cyc, self._used = end, used
            self._complete_fill(fill, end + lat)

    def run_until(self, limit: int) -> list[MemRequest]:
        """Advance to the first request completion at or before ``limit``.

        The clock stops at that completion (or at ``limit``); requests finishing
        exactly then are returned with ``completion`` set.
        """
        if limit < self.clock:
            raise ValueError(f"cannot run backwards from {self.clock} to {limit}")
        self._serve(limit)
        events = self._events
        t = min(limit, events[0][0]) if events else limit
        self.clock = t
        done = []
        while events and events[0][0] <= t:
            finish, _, req = heapq.heappop(events)
            req.completion = finish
            done.append(req)
        return done

    def advance(self, cycles: int) -> list[MemRequest]:
        """Advance the clock by ``cycles``; returns requests completed meanwhile."""
        if cycles < 1:
            raise ValueError("advance needs cycles >= 1")
        target = self.clock + cycles
        done: list[MemRequest] = []
        while True:
            done.extend(self.run_until(target))
            if self.clock == target:
                return done

    def next_completion(self) -> Optional[int]:
        """Earliest known completion cycle among outstanding requests."""
        return self._events[0][0] if self._events else None

    @property
    def busy(self) -> bool:
        return bool(self._events or self._demand_q or self._head() is not None)

    def drain(self) -> list[MemRequest]:
        """Run until nothing is queued or outstanding."""
        done: list[MemRequest] = []
        while self.busy:
            step = max(self.hw.lat_hbm, 1)
            done.extend(self.advance(step))
        return done


class JsonlTraceWriter:
    """Callable sink writing one JSON object per memory event."""

    def __init__(self, fp: IO[str]):
        self.fp = fp

    def __call__(self, record: dict) -> None:
        self.fp.write(json.dumps(record, sort_keys=True) + "\n")
