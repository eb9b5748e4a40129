"""Memory-side model: coalescing, set-associative LRU caches with MSHRs,
per-SM memory ports and FCFS memory controllers with an L2 slice."""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

LINE_SIZE = 128
_standalone_tokens = itertools.count(1 << 60)


class ConfigError(ValueError):
    pass


@dataclass
class MemRequest:
    request_id: int
    warp_id: int
    sm_id: int
    line_address: int
    is_write: bool = False
    issue_cycle: int = 0
    merged_warp_count: int = 1

    def __post_init__(self):
        assert self.line_address % LINE_SIZE == 0


def line_of(addr: int, line_size: int = LINE_SIZE) -> int:
    return addr - addr % line_size


def coalesce(lane_addresses, line_size: int = LINE_SIZE, *, warp_id: int = 0,
             sm_id: int = 0, is_write: bool = False, cycle: int = 0,
             first_id: int = 0) -> list[MemRequest]:
    """One request per distinct line touched by the active (non-None) lanes,
    in ascending line order."""
    lines = sorted({a - a % line_size for a in lane_addresses if a is not None})
    return [MemRequest(first_id + i, warp_id, sm_id, line, is_write, cycle)
            for i, line in enumerate(lines)]


def lane_masks_by_line(lane_addresses, line_size: int = LINE_SIZE) -> dict[int, int]:
    """Map each touched line to the bitmask of lanes touching it."""
    out: dict[int, int] = {}
    for lane, a in enumerate(lane_addresses):
        if a is not None:
            line = a - a % line_size
            out[line] = out.get(line, 0) | (1 << lane)
    return out


def cross_warp_coalesce(pending: list[MemRequest], window: int) -> list[MemRequest]:
    """Merge same-line reads issued within ``window`` cycles of the first
    request to that line. Requests from different SMs never merge."""
    out: list[MemRequest] = []
    open_: dict[tuple[int, int], MemRequest] = {}
    for req in sorted(pending, key=lambda r: (r.issue_cycle, r.request_id)):
        key = (req.sm_id, req.line_address)
        head = open_.get(key)
        if (head is not None and not req.is_write and not head.is_write
                and req.issue_cycle - head.issue_cycle <= window):
            head.merged_warp_count += req.merged_warp_count
            continue
        merged = MemRequest(req.request_id, req.warp_id, req.sm_id, req.line_address,
                            req.is_write, req.issue_cycle, req.merged_warp_count)
        open_[key] = merged
        out.append(merged)
    return out


# -- caches ----------------------------------------------------------------

class Access(Enum):
    HIT = "hit"
    MISS_NEW = "miss_new"
    MISS_MERGED = "miss_merged"
    MSHR_FULL = "mshr_full"


@dataclass
class MshrEntry:
    line: int
    token: int
    merges: int = 0


@dataclass
class CacheStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    merged: int = 0
    mshr_full: int = 0


class Cache:
    """Set-associative LRU cache with an optional MSHR table.

    Each set is a list of ``ways`` slots holding a line address or None;
    ``stamp`` holds the last-use time per slot for LRU victim choice.
    """

    def __init__(self, sets: int, ways: int, line_size: int = LINE_SIZE,
                 hit_latency: int = 28, mshr_entries: int = 64, merge_cap: int = 8):
        if sets <= 0 or ways <= 0:
            raise ConfigError("cache needs positive sets and ways")
        self.sets = sets
        self.ways = ways
        self.line_size = line_size
        self.hit_latency = hit_latency
        self.mshr_entries = mshr_entries
        self.merge_cap = merge_cap
        self.tags = [[None] * ways for _ in range(sets)]
        self.stamp = [[-1] * ways for _ in range(sets)]
        self.mshr: dict[int, MshrEntry] = {}
        self.stats = CacheStats()
        self._clock = 0

    @classmethod
    def from_kb(cls, kb: float, ways: int, **kw) -> "Cache":
        line_size = kw.get("line_size", LINE_SIZE)
        lines = max(ways, int(kb * 1024) // line_size)
        return cls(max(1, lines // ways), ways, **kw)

    @property
    def capacity_bytes(self) -> int:
        return self.sets * self.ways * self.line_size

    def _set(self, line: int) -> int:
        return (line // self.line_size) % self.sets

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def contains(self, line: int) -> bool:
        return line in self.tags[self._set(line)]

    def lookup(self, line: int) -> bool:
        """Tag check with LRU update; counts a hit or miss."""
        s = self._set(line)
        self.stats.accesses += 1
        try:
            way = self.tags[s].index(line)
        except ValueError:
            self.stats.misses += 1
            return False
        self.stamp[s][way] = self._tick()
        self.stats.hits += 1
        return True

    def fill(self, line: int) -> int | None:
        """Insert ``line`` evicting the LRU way; returns the victim line."""
        s = self._set(line)
        tags, stamps = self.tags[s], self.stamp[s]
        if line in tags:
            stamps[tags.index(line)] = self._tick()
            return None
        way = min(range(self.ways), key=lambda w: (tags[w] is not None, stamps[w], w))
        victim = tags[way]
        tags[way] = line
        stamps[way] = self._tick()
        return victim

    def access_line(self, line: int) -> bool:
        """Trace-style access: lookup and fill on miss. Returns hit."""
        if self.lookup(line):
            return True
        self.fill(line)
        return False

    def mshr_free(self) -> int:
        return self.mshr_entries - len(self.mshr)

    def access(self, line: int, token_source) -> tuple[Access, int | None]:
        """Read access through the MSHRs. ``token_source()`` mints a token
        for a newly allocated MSHR entry."""
        entry = self.mshr.get(line)
        if entry is not None:
            if entry.merges >= self.merge_cap:
                self.stats.mshr_full += 1
                return Access.MSHR_FULL, None
            self.stats.accesses += 1
            self.stats.misses += 1
            self.stats.merged += 1
            entry.merges += 1
            return Access.MISS_MERGED, entry.token
        if self.lookup(line):
            return Access.HIT, None
        if len(self.mshr) >= self.mshr_entries:
            # undo the miss count; the access is retried later
            self.stats.accesses -= 1
            self.stats.misses -= 1
            self.stats.mshr_full += 1
            return Access.MSHR_FULL, None
        token = token_source()
        self.mshr[line] = MshrEntry(line, token)
        return Access.MISS_NEW, token

    def complete_fill(self, line: int) -> MshrEntry:
        entry = self.mshr.pop(line)
        self.fill(line)
        return entry

    def resident_lines(self) -> set[int]:
        return {t for ways in self.tags for t in ways if t is not None}


def access_cache(cache: Cache, req: MemRequest, cycle: int,
                 token_source=None) -> tuple[Access, int | None]:
    """Read access of ``req`` through ``cache``; returns (outcome, mshr token)."""
    del cycle  # outcomes do not depend on time; latency is applied by the port
    return cache.access(req.line_address, token_source or _standalone_tokens.__next__)


def fuse_l1(a: Cache, b: Cache) -> Cache:
    """Fuse two identical caches into one with twice the ways.

    ``a``'s way i becomes way 2i and ``b``'s way i becomes 2i+1; resident
    lines and their recency survive, and the hit latency grows by one cycle.
    """
    if (a.sets, a.ways, a.line_size) != (b.sets, b.ways, b.line_size):
        raise ConfigError("fuse_l1: cache geometries differ")
    fused = Cache(a.sets, 2 * a.ways, a.line_size, a.hit_latency + 1,
                  a.mshr_entries + b.mshr_entries, a.merge_cap)
    for s in range(a.sets):
        for w in range(a.ways):
            fused.tags[s][2 * w] = a.tags[s][w]
            fused.stamp[s][2 * w] = a.stamp[s][w]
            fused.tags[s][2 * w + 1] = b.tags[s][w]
            fused.stamp[s][2 * w + 1] = b.stamp[s][w]
    fused._clock = max(a._clock, b._clock)
    fused.mshr = {**a.mshr, **b.mshr}
    return fused


def unfuse_l1(fused: Cache) -> tuple[Cache, Cache]:
    """Inverse of :func:`fuse_l1`: even ways to the first half, odd to the second."""
    if fused.ways % 2:
        raise ConfigError("unfuse_l1: odd way count")
    half = fused.ways // 2
    parts = []
    for parity in (0, 1):
        c = Cache(fused.sets, half, fused.line_size, fused.hit_latency - 1,
                  max(1, fused.mshr_entries // 2), fused.merge_cap)
        for s in range(fused.sets):
            for w in range(half):
                c.tags[s][w] = fused.tags[s][2 * w + parity]
                c.stamp[s][w] = fused.stamp[s][2 * w + parity]
        c._clock = fused._clock
        parts.append(c)
    return parts[0], parts[1]


# -- memory port (one per SM, or per fused pair) ---------------------------

@dataclass
class PortStats:
    lane_accesses: int = 0
    requests_sent: int = 0
    window_merges: int = 0
    loads: int = 0
    stores: int = 0
    icache_accesses: int = 0
    icache_misses: int = 0


@dataclass
class Outgoing:
    line: int
    is_write: bool
    token: int | None
    size: int


class MemoryPort:
    """L1D/L1I, MSHRs, a cross-warp coalescing window and the NoC interface
    of one SM (or of a fused pair, where both halves share it)."""

    def __init__(self, port_id: int, node: int, l1d: Cache, l1i: Cache,
                 window: int = 8, icache_miss_penalty: int = 20):
        self.port_id = port_id
        self.node = node
        self.l1d = l1d
        self.l1i = l1i
        self.window = window
        self.icache_miss_penalty = icache_miss_penalty
        self.stats = PortStats()
        self.waiters: dict[int, list] = {}
        self.token_issue: dict[int, int] = {}
        self._hit_events: list[tuple[int, int]] = []
        self._recent: dict[int, tuple[int, int]] = {}
        self.outbox: deque[Outgoing] = deque()
        self._next_token = port_id << 40

    def mint_token(self) -> int:
        self._next_token += 1
        return self._next_token

    def busy(self) -> bool:
        return bool(self.waiters or self.outbox or self.l1d.mshr)

    def fetch(self, pc: int) -> int:
        """Instruction fetch; returns the stall (0 on an I-cache hit)."""
        self.stats.icache_accesses += 1
        if self.l1i.access_line(pc * 8 - (pc * 8) % self.l1i.line_size):
            return 0
        self.stats.icache_misses += 1
        return self.icache_miss_penalty

    def new_lines_needed(self, lines, now: int) -> int:
        n = 0
        for line in lines:
            rec = self._recent.get(line)
            if rec is not None and now - rec[1] <= self.window and rec[0] in self.waiters:
                continue
            if line in self.l1d.mshr or self.l1d.contains(line):
                continue
            n += 1
        return n

    def load(self, line_masks: dict[int, int], active_lanes: int, now: int):
        """Issue a warp load. Returns {token: lane_mask} or None when the
        MSHRs cannot take the instruction (nothing is changed then)."""
        if self.new_lines_needed(line_masks, now) > self.l1d.mshr_free():
            self.l1d.stats.mshr_full += 1
            return None
        self.stats.loads += 1
        self.stats.lane_accesses += active_lanes
        pending: dict[int, int] = {}
        for line in sorted(line_masks):
            lanes = line_masks[line]
            rec = self._recent.get(line)
            if rec is not None and now - rec[1] <= self.window and rec[0] in self.waiters:
                self.stats.window_merges += 1
                pending[rec[0]] = pending.get(rec[0], 0) | lanes
                continue
            self.stats.requests_sent += 1
            outcome, token = self.l1d.access(line, self.mint_token)
            if outcome is Access.HIT:
                token = self.mint_token()
                heapq.heappush(self._hit_events, (now + self.l1d.hit_latency, token))
            elif outcome is Access.MISS_NEW:
                self.outbox.append(Outgoing(line, False, token, 0))
            elif outcome is Access.MSHR_FULL:
                # merge cap reached on an in-flight line: wait on it anyway
                token = self.l1d.mshr[line].token
            self.waiters.setdefault(token, [])
            self.token_issue.setdefault(token, now)
            self._recent[line] = (token, now)
            pending[token] = pending.get(token, 0) | lanes
        if len(self._recent) > 256:
            self._recent = {k: v for k, v in self._recent.items()
                            if now - v[1] <= self.window}
        return pending

    def store(self, line_masks: dict[int, int], active_lanes: int) -> None:
        self.stats.stores += 1
        self.stats.lane_accesses += active_lanes
        for line in sorted(line_masks):
            self.stats.requests_sent += 1
            self.outbox.append(Outgoing(line, True, None, 0))

    def register(self, token: int, warp) -> None:
        self.waiters[token].append(warp)

    def unregister(self, token: int, warp) -> None:
        lst = self.waiters.get(token)
        if lst is not None and warp in lst:
            lst.remove(warp)

    def _finish(self, token: int, now: int) -> None:
        self.token_issue.pop(token, None)
        for warp in self.waiters.pop(token, ()):
            warp.on_token_done(token, now)

    def tick(self, now: int) -> None:
        ev = self._hit_events
        while ev and ev[0][0] <= now:
            _, token = heapq.heappop(ev)
            self._finish(token, now)

    def fill(self, line: int, now: int) -> None:
        entry = self.l1d.complete_fill(line)
        self._finish(entry.token, now)

    def next_event(self) -> int | None:
        return self._hit_events[0][0] if self._hit_events else None


# -- memory controllers ----------------------------------------------------

@dataclass
class McStats:
    reads: int = 0
    writes: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    icnt_stall_cycles: int = 0


@dataclass(order=True)
class _Reply:
    ready: int
    seq: int
    line: int = field(compare=False)
    dst_node: int = field(compare=False)
    port_id: int = field(compare=False)


class MemoryController:
    """FCFS request queue, an L2 slice and a flat-latency DRAM channel."""

    def __init__(self, mc_id: int, node: int, l2: Cache, l2_latency: int = 120,
                 dram_latency: int = 220, dram_burst: int = 4):
        self.mc_id = mc_id
        self.node = node
        self.l2 = l2
        self.l2_latency = l2_latency
        self.dram_latency = dram_latency
        self.dram_burst = dram_burst
        self.queue: deque = deque()
        self.replies: list[_Reply] = []
        self.stats = McStats()
        self._dram_free = 0
        self._seq = 0

    def busy(self) -> bool:
        return bool(self.queue or self.replies)

    def receive(self, line: int, is_write: bool, src_node: int, port_id: int) -> None:
        self.queue.append((line, is_write, src_node, port_id))

    def service(self, now: int) -> None:
        """Pop at most one queued request and schedule its reply."""
        if not self.queue:
            return
        line, is_write, src, port_id = self.queue.popleft()
        hit = self.l2.access_line(line)
        if hit:
            self.stats.l2_hits += 1
            ready = now + self.l2_latency
        else:
            self.stats.l2_misses += 1
            start = max(now, self._dram_free)
            self._dram_free = start + self.dram_burst
            ready = start + self.l2_latency + self.dram_latency
        if is_write:
            self.stats.writes += 1
            return
        self.stats.reads += 1
        self._seq += 1
        heapq.heappush(self.replies, _Reply(ready, self._seq, line, src, port_id))

    def head_reply(self, now: int) -> _Reply | None:
        if self.replies and self.replies[0].ready <= now:
            return self.replies[0]
        return None

    def pop_reply(self) -> None:
        heapq.heappop(self.replies)

    def next_event(self) -> int | None:
        if self.queue:
            return 0
        return self.replies[0].ready if self.replies else None
