"""Fuse/split machinery for a pair of neighbouring SMs.

A pair starts in BASELINE, becomes FUSED when the predictor asks for
scale-up, and under the dynamic schemes oscillates between FUSED and
SPLIT_RUNNING as the fraction of divergent warps rises and falls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .memsys import ConfigError
from .smcore import Core, Warp, WarpState
from .workload import WARP_SIZE


class Mode(Enum):
    BASELINE = "BASELINE"
    FUSED = "FUSED"
    SPLIT_RUNNING = "SPLIT_RUNNING"


class Decision(Enum):
    SCALE_UP = "SCALE_UP"
    SCALE_OUT = "SCALE_OUT"


class Policy(Enum):
    STATIC = "static"
    DIRECT = "direct"
    REGROUP = "regroup"


SPLIT = "SPLIT"
STAY = "STAY"
REFUSE = "REFUSE"

_ALLOWED = {
    (Mode.BASELINE, Mode.FUSED),
    (Mode.FUSED, Mode.SPLIT_RUNNING),
    (Mode.SPLIT_RUNNING, Mode.FUSED),
    (Mode.FUSED, Mode.BASELINE),
    (Mode.SPLIT_RUNNING, Mode.BASELINE),
}


@dataclass
class ReconfigParams:
    split_threshold: float = 0.25
    check_period: int = 500
    migration_period: int = 1000
    control_frac: float = 0.5
    mem_age: int = 200
    reconfig_cost: int = 500
    split_cost: int = 50
    refuse_cost: int = 0
    group_size: int = 8
    migrate_idle: float = 0.5


@dataclass
class PairState:
    pair_id: int
    sm_a: int
    sm_b: int
    mode: Mode = Mode.BASELINE
    params: ReconfigParams = field(default_factory=ReconfigParams)
    divergence_bin: list = field(default_factory=list)
    slow_set: list = field(default_factory=list)   # warps moved to SM_1 by a split
    events: list = field(default_factory=list)     # (cycle, transition)
    lane_audit: list = field(default_factory=list)  # (cycle, lanes before, lanes after)

    def transition(self, new: Mode, cycle: int) -> None:
        if (self.mode, new) not in _ALLOWED:
            raise AssertionError(f"illegal transition {self.mode.name}->{new.name}")
        if self.events:
            assert cycle >= self.events[-1][0], "event log must be time ordered"
        self.events.append((cycle, f"{self.mode.name}->{new.name}"))
        self.mode = new
        self.divergence_bin = []

    def count(self, transition: str) -> int:
        return sum(1 for _, t in self.events if t == transition)


# -- classification --------------------------------------------------------

def classify_divergent(warp: Warp, now: int, control_frac: float = 0.5,
                       mem_age: int = 200) -> bool:
    """Control divergence: too few active lanes. Memory divergence: a load
    outstanding for longer than ``mem_age`` cycles."""
    if warp.state is WarpState.DONE:
        return False
    if warp.mask.bit_count() / warp.nlanes < control_frac:
        return True
    return warp.oldest_load_age(now) > mem_age


def collect_bin(pair: PairState, warps, now: int) -> list[Warp]:
    p = pair.params
    pair.divergence_bin = [w for w in warps
                           if w.state is not WarpState.WAITING_BARRIER
                           and classify_divergent(w, now, p.control_frac, p.mem_age)]
    return pair.divergence_bin


def check_split(pair: PairState, resident_warps: int) -> str:
    assert pair.mode is Mode.FUSED
    if resident_warps == 0:
        return STAY
    ratio = len(pair.divergence_bin) / resident_warps
    return SPLIT if ratio > pair.params.split_threshold else STAY


# -- lane surgery ----------------------------------------------------------

def carve(warp: Warp, group_idx, wid: int) -> Warp:
    """A new warp made of ``warp``'s lane groups ``group_idx`` (in that
    order), with masks, stack and outstanding loads sliced to match."""
    gs = warp.gsize
    gm = (1 << gs) - 1

    def slice_mask(m: int) -> int:
        out = 0
        for j, g in enumerate(group_idx):
            out |= ((m >> (g * gs)) & gm) << (j * gs)
        return out

    child = Warp(wid, warp.cta, [warp.groups[g] for g in group_idx], gs, pc=warp.pc,
                 mask=slice_mask(warp.mask),
                 stack=[(rpc, slice_mask(m)) for rpc, m in warp.stack])
    child.ready_at = warp.ready_at
    child.last_issue = warp.last_issue
    child.port = warp.port
    for token, (lanes, issued) in warp.pending.items():
        sub = slice_mask(lanes)
        if sub:
            child.pending[token] = [sub, issued]
    # lanes idle on the current path skip straight to the reconvergence point
    while child.mask == 0:
        assert child.stack, "child warp lost all lanes"
        child.pc, child.mask = child.stack.pop()
        child.reconverge()
    if warp.state is WarpState.DONE:
        child.state = WarpState.DONE
    elif child.pending:
        child.state = WarpState.WAITING_MEM
    elif warp.state is WarpState.WAITING_BARRIER:
        child.state = WarpState.WAITING_BARRIER
    else:
        child.state = WarpState.READY
    return child


def _rehome_tokens(parent: Warp, children) -> None:
    port = parent.port
    if port is None:
        return
    for token in parent.pending:
        port.unregister(token, parent)
        for c in children:
            if token in c.pending:
                port.register(token, c)


def direct_split(warp: Warp, wids) -> tuple[Warp, Warp]:
    """Cut a 64-lane warp in the middle."""
    n = len(warp.groups)
    if warp.nlanes != 2 * WARP_SIZE:
        raise ValueError("direct_split needs a 64-lane warp")
    lo = carve(warp, range(0, n // 2), wids[0])
    hi = carve(warp, range(n // 2, n), wids[1])
    _rehome_tokens(warp, (lo, hi))
    return lo, hi


def group_scores(warp: Warp, now: int) -> list[int]:
    """Slowness per lane group: the oldest outstanding load age of any lane,
    else the number of stack levels on which a lane sits idle."""
    gs = warp.gsize
    gm = (1 << gs) - 1
    scores = []
    for g in range(len(warp.groups)):
        shift = g * gs
        age = max((now - issued for lanes, issued in warp.pending.values()
                   if (lanes >> shift) & gm), default=-1)
        if age >= 0:
            scores.append(age)
            continue
        # inactive depth: levels (incl. the current one) where a lane is masked off
        masks = [m for _, m in warp.stack] + [warp.mask]
        depth = 0
        for lane in range(gs):
            bit = 1 << (shift + lane)
            depth = max(depth, sum(1 for m in masks if not m & bit))
        scores.append(depth)
    return scores


def regroup_order(scores: list[int]) -> list[int]:
    """Group indices sorted slowest first; ties go to the lower index first
    into the fast half, so they sort last."""
    return sorted(range(len(scores)), key=lambda g: (-scores[g], -g))


def regroup_warps(warp: Warp, now: int, wids, group_size: int | None = None
                  ) -> tuple[Warp, Warp]:
    """Split a 64-lane warp into a fast and a slow 32-lane warp."""
    gs = group_size or warp.gsize
    if WARP_SIZE % gs or gs != warp.gsize:
        raise ConfigError(f"group_size {gs} must divide {WARP_SIZE} and match the warp layout")
    if warp.nlanes != 2 * WARP_SIZE:
        raise ValueError("regroup_warps needs a 64-lane warp")
    order = regroup_order(group_scores(warp, now))
    half = len(order) // 2
    slow_groups = sorted(order[:half])
    fast_groups = sorted(order[half:])
    fast = carve(warp, fast_groups, wids[0])
    slow = carve(warp, slow_groups, wids[1])
    _rehome_tokens(warp, (fast, slow))
    return fast, slow


# -- pair transitions -------------------------------------------------------

def _live_lanes(cores) -> int:
    return sum(w.nlanes for c in cores for w in c.warps if w.state is not WarpState.DONE)


def _place(core: Core, warp: Warp, until: int) -> None:
    core.add(warp)
    core.scoreboard.reserve(warp.wid, until)


def execute_split(pair: PairState, core0: Core, core1: Core, policy: Policy, now: int,
                  next_wid, on_replace=None) -> PairState:
    """Move every binned warp (or its slow part) to SM_1 and let both
    halves run at the baseline SIMD width."""
    assert pair.mode is Mode.FUSED
    before = _live_lanes((core0, core1))
    binned = [w for w in pair.divergence_bin if w in core0.warps]
    slow_set = []
    half = core0.simd_width // 2
    core0.simd_width = core1.simd_width = half
    for w in binned:
        core0.remove(w)
        if w.nlanes < 2 * WARP_SIZE:
            _place(core1, w, w.ready_at)
            slow_set.append(w)
            continue
        if policy is Policy.DIRECT:
            lo, hi = direct_split(w, (next_wid(), next_wid()))
            kids = [(core1, lo), (core1, hi)]
            slow_set += [lo, hi]
        else:
            fast, slow = regroup_warps(w, now, (next_wid(), next_wid()))
            kids = [(core0, fast), (core1, slow)]
            slow_set.append(slow)
        for core, kid in kids:
            _place(core, kid, w.ready_at)
        if on_replace is not None:
            on_replace(w, [k for _, k in kids])
    core1.enabled = True
    for c in (core0, core1):
        c.stall_until = max(c.stall_until, now + pair.params.split_cost)
        c.pipe_free_at = max(c.pipe_free_at, now)
    pair.transition(Mode.SPLIT_RUNNING, now)
    pair.slow_set = slow_set
    pair.lane_audit.append((now, before, _live_lanes((core0, core1))))
    return pair


def check_refuse(pair: PairState, core1: Core, now: int) -> str:
    assert pair.mode is Mode.SPLIT_RUNNING
    p = pair.params
    still = [w for w in pair.slow_set
             if w in core1.warps and classify_divergent(w, now, p.control_frac, p.mem_age)]
    return STAY if still else REFUSE


def refuse(pair: PairState, core0: Core, core1: Core, now: int) -> PairState:
    """Merge SM_1's pool back into SM_0; warps keep their current shape."""
    assert pair.mode is Mode.SPLIT_RUNNING
    before = _live_lanes((core0, core1))
    for w in list(core1.warps):
        until = max(w.ready_at, now)
        core1.remove(w)
        _place(core0, w, until)
    core0.simd_width = core0.simd_width + core1.simd_width
    core1.enabled = False
    core0.stall_until = max(core0.stall_until, now + pair.params.refuse_cost)
    core0.pipe_free_at = max(core0.pipe_free_at, core1.pipe_free_at)
    pair.slow_set = []
    pair.transition(Mode.FUSED, now)
    pair.lane_audit.append((now, before, _live_lanes((core0, core1))))
    return pair


def migrate_fast_warps(pair: PairState, core0: Core, core1: Core, now: int,
                       sm1_idle_fraction: float) -> int:
    """Lend one ready warp from SM_0 to an underused SM_1."""
    assert pair.mode is Mode.SPLIT_RUNNING
    if sm1_idle_fraction <= pair.params.migrate_idle:
        return 0
    ready = core0.ready_warps(now)
    if len(ready) <= 1:
        return 0
    w = min(ready, key=lambda x: (x.last_issue, x.wid))
    core0.remove(w)
    _place(core1, w, w.ready_at)
    return 1


def apply_kernel_decision(gpu, decision: Decision, policy: Policy = Policy.STATIC) -> None:
    """Reconfigure ``gpu`` at a kernel boundary (no resident warps)."""
    assert gpu.resident_warps() == 0, "reconfiguration must happen between kernels"
    if decision is Decision.SCALE_UP:
        gpu.fuse_all(policy)
    else:
        gpu.unfuse_all()
