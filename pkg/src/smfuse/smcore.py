"""In-order SIMT core: warp contexts, reconvergence stack, greedy-then-oldest
scheduling, issue at a fixed SIMD width and stall accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .memsys import lane_masks_by_line
from .workload import WARP_SIZE, Kind

BRANCH_BUBBLE = 2


@dataclass
class SmConfig:
    warp_size: int = 32
    simd_width: int = 8
    max_threads: int = 1024
    max_ctas: int = 8
    registers: int = 16384
    schedulers: int = 1
    l1d_kb: float = 16
    l1d_ways: int = 4
    l1i_kb: float = 2
    l1i_ways: int = 4
    shared_kb: int = 48
    mshr_entries: int = 64


class WarpState(Enum):
    READY = "ready"
    WAITING_MEM = "waiting_mem"
    WAITING_BARRIER = "waiting_barrier"
    AT_BRANCH_STALL = "at_branch_stall"
    DONE = "done"


@dataclass(frozen=True)
class LaneGroup:
    """A run of consecutive lanes taken from one generated warp stream."""
    stream: tuple
    origin: tuple   # (cta_id, warp index in CTA)
    offset: int     # first lane within the origin warp


def _bits(mask: int) -> int:
    return mask.bit_count()


class Warp:
    """Execution context of a (possibly fused or regrouped) warp.

    Lanes are the concatenation of ``groups``; bit ``i`` of every mask refers
    to lane ``i`` of this warp.
    """

    __slots__ = ("wid", "cta", "groups", "gsize", "nlanes", "pc", "mask", "stack",
                 "state", "ready_at", "last_issue", "pending", "port", "origin_tag")

    def __init__(self, wid: int, cta: int, groups, gsize: int, pc: int = 0,
                 mask: int | None = None, stack=None):
        self.wid = wid
        self.cta = cta
        self.groups = tuple(groups)
        self.gsize = gsize
        self.nlanes = len(self.groups) * gsize
        self.pc = pc
        self.mask = (1 << self.nlanes) - 1 if mask is None else mask
        self.stack: list[tuple[int, int]] = list(stack or ())
        self.state = WarpState.READY
        self.ready_at = 0
        self.last_issue = -1
        self.pending: dict[int, list] = {}   # token -> [lane mask, issue cycle]
        self.port = None
        self.origin_tag = None

    def __repr__(self) -> str:
        return f"Warp({self.wid}, lanes={self.nlanes}, pc={self.pc}, {self.state.name})"

    @property
    def full_mask(self) -> int:
        return (1 << self.nlanes) - 1

    @property
    def is_fused(self) -> bool:
        return len({g.origin for g in self.groups}) > 1

    def instr(self):
        return self.groups[0].stream[self.pc]

    def taken_mask(self) -> int:
        gs = self.gsize
        gmask = (1 << gs) - 1
        out = 0
        pc = self.pc
        for i, g in enumerate(self.groups):
            out |= ((g.stream[pc].taken_mask >> g.offset) & gmask) << (i * gs)
        return out

    def lane_addresses(self) -> list:
        gs = self.gsize
        pc = self.pc
        out = []
        for g in self.groups:
            out.extend(g.stream[pc].addresses[g.offset:g.offset + gs])
        mask = self.mask
        return [a if mask >> i & 1 else None for i, a in enumerate(out)]

    def is_ready(self, now: int) -> bool:
        return self.state is WarpState.READY and self.ready_at <= now

    def oldest_load_age(self, now: int) -> int:
        if not self.pending:
            return 0
        return now - min(issue for _, issue in self.pending.values())

    def on_token_done(self, token: int, now: int) -> None:
        self.pending.pop(token, None)
        if not self.pending and self.state is WarpState.WAITING_MEM:
            self.state = WarpState.READY
            self.ready_at = max(self.ready_at, now)

    def reconverge(self) -> None:
        """Pop every stack entry whose reconvergence pc has been reached."""
        while self.stack and self.stack[-1][0] == self.pc:
            self.mask = self.stack.pop()[1]


def reconverge(warp: Warp) -> Warp:
    assert warp.stack, "reconverge on an empty SIMT stack"
    assert warp.pc == warp.stack[-1][0], "pc is not at the reconvergence point"
    warp.reconverge()
    return warp


class Scoreboard:
    """Per-warp pending-writeback release times."""

    def __init__(self):
        self._until: dict[int, int] = {}

    def reserve(self, wid: int, until: int) -> None:
        self._until[wid] = until

    def pending(self, wid: int, now: int) -> bool:
        return self._until.get(wid, -1) > now

    def release(self, wid: int) -> None:
        self._until.pop(wid, None)


@dataclass
class CoreStats:
    cycles: int = 0
    idle_cycles: int = 0
    busy_cycles: int = 0
    drain_cycles: int = 0
    issued_insns: int = 0
    thread_insns: int = 0
    control_stall_cycles: int = 0
    issue_cycles: int = 0
    active_thread_slots: int = 0
    inactive_thread_slots: int = 0
    mshr_stall_cycles: int = 0
    icache_stall_cycles: int = 0
    loads: int = 0
    stores: int = 0


class Core:
    """One scheduler plus a SIMD pipeline of ``simd_width`` lanes."""

    def __init__(self, core_id: int, simd_width: int, port=None, base_simd: int = 8):
        self.core_id = core_id
        self.simd_width = simd_width
        self.base_simd = base_simd
        self.port = port
        self.warps: list[Warp] = []
        self.last_issued: Warp | None = None
        self.pipe_free_at = 0
        self.stall_until = 0
        self.scoreboard = Scoreboard()
        self.stats = CoreStats()
        self.enabled = True

    @property
    def weight(self) -> float:
        return self.simd_width / self.base_simd

    def add(self, warp: Warp) -> None:
        warp.port = self.port
        self.warps.append(warp)

    def remove(self, warp: Warp) -> None:
        self.warps.remove(warp)
        self.scoreboard.release(warp.wid)
        if self.last_issued is warp:
            self.last_issued = None

    def ready_warps(self, now: int) -> list[Warp]:
        sb = self.scoreboard
        return [w for w in self.warps if w.is_ready(now) and not sb.pending(w.wid, now)]


def schedule(core: Core, now: int) -> Warp | None:
    """Greedy-then-oldest pick; ``None`` when nothing can issue."""
    sb = core.scoreboard
    last = core.last_issued
    if last is not None and last.is_ready(now) and not sb.pending(last.wid, now):
        return last
    best = None
    for w in core.warps:
        if w.state is WarpState.READY and w.ready_at <= now and not sb.pending(w.wid, now):
            if best is None or (w.last_issue, w.wid) < (best.last_issue, best.wid):
                best = w
    return best


def occupancy(active_lanes: int, simd_width: int) -> int:
    return max(1, -(-active_lanes // simd_width))


def issue(core: Core, warp: Warp, now: int, hooks) -> int:
    """Issue ``warp``'s next instruction. Returns pipeline occupancy in
    cycles, or 0 if the instruction could not issue this cycle."""
    assert warp.is_ready(now) and not core.scoreboard.pending(warp.wid, now)
    stats = core.stats
    port = core.port
    if port is not None:
        stall = port.fetch(warp.pc)
        if stall:
            warp.ready_at = now + stall
            stats.icache_stall_cycles += stall
            return 0
    instr = warp.instr()
    kind = instr.kind
    mask = warp.mask
    active = _bits(mask)
    occ = occupancy(active, core.simd_width)
    ready = now + max(occ, instr.latency)

    if kind is Kind.LOAD:
        addrs = warp.lane_addresses()
        pending = port.load(lane_masks_by_line(addrs), active, now)
        if pending is None:
            warp.ready_at = now + 1
            stats.mshr_stall_cycles += 1
            return 0
        stats.loads += 1
        for token, lanes in pending.items():
            warp.pending[token] = [lanes, port.token_issue.get(token, now)]
            port.register(token, warp)
        if warp.pending:
            warp.state = WarpState.WAITING_MEM
        ready = now + occ
    elif kind is Kind.STORE:
        port.store(lane_masks_by_line(warp.lane_addresses()), active)
        stats.stores += 1
        ready = now + occ

    # bookkeeping common to every issued instruction
    stats.issued_insns += 1
    stats.thread_insns += active
    stats.issue_cycles += occ
    stats.active_thread_slots += active
    stats.inactive_thread_slots += warp.nlanes - active
    if warp.stack:
        stats.control_stall_cycles += occ
    hooks.retire(warp, mask)
    warp.last_issue = now
    core.last_issued = warp
    core.pipe_free_at = now + occ

    if kind is Kind.EXIT:
        assert not warp.stack, "warp exited with a non-empty SIMT stack"
        warp.state = WarpState.DONE
        hooks.warp_exit(core, warp, now)
        return occ
    if kind is Kind.BARRIER:
        warp.pc += 1
        warp.reconverge()
        warp.state = WarpState.WAITING_BARRIER
        hooks.barrier(warp, now)
        return occ
    if kind is Kind.BRANCH:
        taken = warp.taken_mask() & mask
        if taken == mask:
            warp.pc += 1
        elif taken == 0:
            warp.pc = instr.reconv
        else:
            warp.stack.append((instr.reconv, mask))
            warp.mask = taken
            warp.pc += 1
            ready += BRANCH_BUBBLE
            stats.control_stall_cycles += BRANCH_BUBBLE
            stats.issue_cycles += BRANCH_BUBBLE
            if warp.state is WarpState.READY:
                warp.state = WarpState.AT_BRANCH_STALL
    else:
        warp.pc += 1
    warp.reconverge()
    warp.ready_at = ready
    core.scoreboard.reserve(warp.wid, ready)
    if warp.state is WarpState.AT_BRANCH_STALL:
        warp.state = WarpState.READY  # the bubble is carried by ready_at
    return occ


def step_core(core: Core, now: int, hooks) -> Warp | None:
    """Advance ``core`` by one cycle; returns the issued warp if any."""
    stats = core.stats
    stats.cycles += 1
    if core.stall_until > now:
        stats.drain_cycles += 1
        return None
    if core.pipe_free_at > now:
        stats.busy_cycles += 1
        return None
    warp = schedule(core, now)
    if warp is None:
        stats.idle_cycles += 1
        return None
    if issue(core, warp, now, hooks):
        stats.busy_cycles += 1
        return warp
    stats.idle_cycles += 1
    return None


def thread_capacity_ok(resident_ctas: int, resident_threads: int, cta_threads: int,
                       max_ctas: int, max_threads: int) -> bool:
    return resident_ctas < max_ctas and resident_threads + cta_threads <= max_threads


def origin_groups(stream: tuple, cta_id: int, warp_index: int, gsize: int) -> list[LaneGroup]:
    return [LaneGroup(stream, (cta_id, warp_index), off) for off in range(0, WARP_SIZE, gsize)]


@dataclass
class ThreadCounter:
    """Per-thread retired instruction counts keyed by (cta, warp, lane)."""
    counts: dict = field(default_factory=dict)

    def add(self, warp: Warp, mask: int) -> None:
        gs = warp.gsize
        gm = (1 << gs) - 1
        counts = self.counts
        for i, g in enumerate(warp.groups):
            bits = (mask >> (i * gs)) & gm
            if not bits:
                continue
            arr = counts.get(g.origin)
            if arr is None:
                arr = counts[g.origin] = [0] * WARP_SIZE
            off = g.offset
            while bits:
                low = bits & -bits
                arr[off + low.bit_length() - 1] += 1
                bits ^= low
