"""The whole-chip cycle loop: SMs (or fused pairs), memory ports, the mesh
and the memory controllers, plus CTA dispatch and metric collection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields, is_dataclass

from .memsys import (LINE_SIZE, Cache, ConfigError, MemoryController, MemoryPort,
                     fuse_l1, unfuse_l1)
from .noc import (REPLY_FLITS, REQUEST_FLITS, InjectResult, Interconnect, Packet, Subnet,
                  build_topology, sm_pairs)
from .predictor import MetricVector, SamplingInconclusive
from .reconfig import (REFUSE, SPLIT, Mode, PairState, Policy, ReconfigParams, check_refuse,
                       check_split, collect_bin, execute_split, migrate_fast_warps, refuse)
from .smcore import (Core, SmConfig, ThreadCounter, Warp, WarpState, origin_groups,
                     step_core, thread_capacity_ok)
from .workload import WARP_SIZE, CtaStream

SCHEMES = ("baseline", "scale_up", "static_fuse", "direct_split", "warp_regroup")
FUSING_SCHEMES = SCHEMES[1:]
POLICY = {"static_fuse": Policy.STATIC, "scale_up": Policy.STATIC,
          "direct_split": Policy.DIRECT, "warp_regroup": Policy.REGROUP}
NEVER = 1 << 62


@dataclass
class GpuConfig:
    sm_count: int = 48
    mc_count: int = 8
    scheme: str = "baseline"
    perfect_noc: bool = False
    model_path: str | None = None
    sm: SmConfig = field(default_factory=SmConfig)
    reconfig: ReconfigParams = field(default_factory=ReconfigParams)
    l1_hit_latency: int = 28
    mshr_merge_cap: int = 8
    coalesce_window: int = 8
    icache_miss_penalty: int = 20
    l2_kb: float = 128
    l2_ways: int = 8
    l2_latency: int = 120
    dram_latency: int = 220
    dram_burst: int = 4
    queue_depth: int = 8
    sample_cycles: int = 10_000
    sample_doublings: int = 3
    max_cycles: int = 20_000_000
    seed: int | None = None       # overrides the kernel seed when set
    track_threads: bool = False
    wide_warps: bool = False      # 64-lane warps on unfused SMs (large-SM sweep points)

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {', '.join(SCHEMES)}, got {self.scheme!r}")
        if self.sm_count <= 0 or self.mc_count <= 0:
            raise ConfigError("sm_count and mc_count must be positive")
        if self.scheme in FUSING_SCHEMES and self.sm_count % 2:
            raise ConfigError(f"scheme {self.scheme} needs an even sm_count")
        if self.sm.warp_size != WARP_SIZE:
            raise ConfigError("warp_size is fixed at 32")
        if self.sm.simd_width <= 0:
            raise ConfigError("simd_width must be positive")
        if self.wide_warps and self.scheme != "baseline":
            raise ConfigError("wide_warps only applies to the baseline scheme")
        gs = self.reconfig.group_size
        if gs <= 0 or WARP_SIZE % gs:
            raise ConfigError(f"group_size {gs} must divide {WARP_SIZE}")

    @classmethod
    def desk(cls, **kw) -> "GpuConfig":
        """8 SMs and 4 MCs: the small configuration used by the tests."""
        kw.setdefault("sm_count", 8)
        kw.setdefault("mc_count", 4)
        return cls(**kw)


def _from_dict(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown field {where}{key}")
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default) and isinstance(value, dict):
            value = _from_dict(type(default), value, f"{where}{key}.")
        out[key] = value
    return cls(**out)


def config_from_dict(data: dict) -> GpuConfig:
    cfg = _from_dict(GpuConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: GpuConfig) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


@dataclass
class CtaRecord:
    cta_id: int
    threads: int
    live: int
    waiting: list = field(default_factory=list)


class Unit:
    """One scheduling domain: a baseline SM, or a fused pair of SMs."""

    def __init__(self, uid: int, sms: tuple, node: int, port: MemoryPort, cores: list,
                 max_ctas: int, max_threads: int, pair: PairState | None = None):
        self.uid = uid
        self.sms = sms
        self.node = node
        self.port = port
        self.cores = cores
        self.max_ctas = max_ctas
        self.max_threads = max_threads
        self.pair = pair
        self.ctas: dict[int, CtaRecord] = {}
        self.threads = 0
        self.completed = 0
        self.idle_mark = (0, 0)   # (cycles, idle) of core 1 at the last migration check
        for c in cores:
            c.unit = self
            c.port = port

    @property
    def fused(self) -> bool:
        return self.pair is not None and self.pair.mode is not Mode.BASELINE

    def accepts(self, threads: int) -> bool:
        return thread_capacity_ok(len(self.ctas), self.threads, threads,
                                  self.max_ctas, self.max_threads)

    def warps(self):
        for c in self.cores:
            yield from c.warps


class Gpu:
    """Mutable chip state advanced by :meth:`step` / :meth:`run_until`."""

    def __init__(self, cfg: GpuConfig, ctas: list[CtaStream]):
        cfg.validate()
        self.cfg = cfg
        self.now = 0
        self.end_cycle = 0
        self.pending: deque[CtaStream] = deque(ctas)
        self.total_ctas = len(ctas)
        self.done_ctas = 0
        self.dispatch_enabled = True
        self.policy = Policy.STATIC
        self.threads = ThreadCounter() if cfg.track_threads else None
        self.cta_time = 0
        self.resident_ctas = 0
        self.reconfig_cycles = 0
        self._wid = 0
        self._port_id = 0
        self.retired_ports: list[MemoryPort] = []
        self.retired_nets: list[Interconnect] = []
        self.pairs: list[PairState] = []
        self.cta_unit: dict[int, Unit] = {}
        self.mcs = []
        self.topo = build_topology(cfg.sm_count, cfg.mc_count)
        for j, node in enumerate(self.topo.mc_nodes):
            l2 = Cache.from_kb(cfg.l2_kb, cfg.l2_ways, hit_latency=cfg.l2_latency)
            self.mcs.append(MemoryController(j, node, l2, cfg.l2_latency, cfg.dram_latency,
                                             cfg.dram_burst))
        self.mc_by_node = {mc.node: mc for mc in self.mcs}
        self.net = Interconnect(self.topo, cfg.queue_depth, cfg.perfect_noc)
        self.ports: dict[int, MemoryPort] = {}
        self.units: list[Unit] = []
        self.sm_completed = [0] * cfg.sm_count
        for i in range(cfg.sm_count):
            port = self._new_port(self.topo.sm_nodes[i], self._l1d(), self._l1i())
            core = Core(i, cfg.sm.simd_width, port, base_simd=cfg.sm.simd_width)
            self.units.append(Unit(i, (i,), self.topo.sm_nodes[i], port, [core],
                                   cfg.sm.max_ctas, cfg.sm.max_threads))

    # -- construction helpers --------------------------------------------------

    def _l1d(self) -> Cache:
        s = self.cfg.sm
        return Cache.from_kb(s.l1d_kb, s.l1d_ways, hit_latency=self.cfg.l1_hit_latency,
                             mshr_entries=s.mshr_entries, merge_cap=self.cfg.mshr_merge_cap)

    def _l1i(self) -> Cache:
        s = self.cfg.sm
        return Cache.from_kb(s.l1i_kb, s.l1i_ways, hit_latency=1, mshr_entries=0)

    def _new_port(self, node: int, l1d: Cache, l1i: Cache) -> MemoryPort:
        port = MemoryPort(self._port_id, node, l1d, l1i, self.cfg.coalesce_window,
                          self.cfg.icache_miss_penalty)
        self.ports[self._port_id] = port
        self._port_id += 1
        return port

    def _retire_port(self, port: MemoryPort) -> None:
        del self.ports[port.port_id]
        self.retired_ports.append(port)

    def next_wid(self) -> int:
        self._wid += 1
        return self._wid

    def _reset_net(self) -> None:
        assert self.net.idle(), "NoC must be drained before it is rebuilt"
        self.retired_nets.append(self.net)
        self.net = Interconnect(self.topo, self.cfg.queue_depth, self.cfg.perfect_noc)

    # -- reconfiguration -------------------------------------------------------

    def resident_warps(self) -> int:
        return sum(len(c.warps) for u in self.units for c in u.cores)

    def drained(self) -> bool:
        return (self.resident_warps() == 0 and self.net.idle()
                and not any(mc.busy() for mc in self.mcs)
                and not any(p.busy() for p in self.ports.values()))

    def fuse_all(self, policy: Policy = Policy.STATIC) -> None:
        """Fuse every neighbouring SM pair (kernel boundary only)."""
        assert self.resident_warps() == 0
        if any(u.fused for u in self.units):
            return
        cfg = self.cfg
        pairs = sm_pairs(self.topo)
        self.topo = build_topology(cfg.sm_count, cfg.mc_count, pairs)
        self._reset_net()
        by_sm = {u.sms[0]: u for u in self.units}
        units = []
        for k, (a, b) in enumerate(pairs):
            ua, ub = by_sm[a], by_sm[b]
            port = self._new_port(self.topo.sm_nodes[a], fuse_l1(ua.port.l1d, ub.port.l1d),
                                  fuse_l1(ua.port.l1i, ub.port.l1i))
            self._retire_port(ua.port)
            self._retire_port(ub.port)
            c0, c1 = ua.cores[0], ub.cores[0]
            c0.simd_width = c0.base_simd * 2
            c1.enabled = False
            pair = PairState(k, a, b, params=cfg.reconfig)
            pair.transition(Mode.FUSED, self.now)
            units.append(Unit(k, (a, b), self.topo.sm_nodes[a], port, [c0, c1],
                              2 * cfg.sm.max_ctas, 2 * cfg.sm.max_threads, pair))
        self.units = units
        self.pairs = [u.pair for u in units]
        self.policy = policy

    def unfuse_all(self) -> None:
        assert self.resident_warps() == 0
        if not any(u.fused for u in self.units):
            return
        cfg = self.cfg
        self.topo = build_topology(cfg.sm_count, cfg.mc_count)
        self._reset_net()
        units = []
        for u in self.units:
            if not u.fused:
                units.append(u)
                continue
            d0, d1 = unfuse_l1(u.port.l1d)
            i0, i1 = unfuse_l1(u.port.l1i)
            self._retire_port(u.port)
            for sm, core, l1d, l1i in zip(u.sms, u.cores, (d0, d1), (i0, i1)):
                core.simd_width = core.base_simd
                core.enabled = True
                port = self._new_port(self.topo.sm_nodes[sm], l1d, l1i)
                units.append(Unit(sm, (sm,), self.topo.sm_nodes[sm], port, [core],
                                  cfg.sm.max_ctas, cfg.sm.max_threads))
            u.pair.transition(Mode.BASELINE, self.now)
        units.sort(key=lambda u: u.sms[0])
        self.units = units
        self.policy = Policy.STATIC

    # -- hooks called by the cores ------------------------------------------------

    def retire(self, warp: Warp, mask: int) -> None:
        if self.threads is not None:
            self.threads.add(warp, mask)

    def warp_exit(self, core: Core, warp: Warp, now: int) -> None:
        core.remove(warp)
        unit = core.unit
        rec = unit.ctas[warp.cta]
        rec.live -= 1
        if rec.live == 0:
            del unit.ctas[warp.cta]
            del self.cta_unit[warp.cta]
            unit.threads -= rec.threads
            self.resident_ctas -= 1
            unit.completed += 1
            for sm in unit.sms:
                self.sm_completed[sm] += 1
            self.done_ctas += 1
            if self.done_ctas == self.total_ctas:
                self.end_cycle = max(now + 1, core.pipe_free_at)
        else:
            self._maybe_release(rec, now)

    def barrier(self, warp: Warp, now: int) -> None:
        rec = self.cta_unit[warp.cta].ctas[warp.cta]
        rec.waiting.append(warp)
        self._maybe_release(rec, now)

    def _maybe_release(self, rec: CtaRecord, now: int) -> None:
        if rec.waiting and len(rec.waiting) == rec.live:
            for w in rec.waiting:
                w.state = WarpState.READY
                w.ready_at = max(w.ready_at, now + 1)
            rec.waiting = []

    def _replace(self, parent: Warp, kids) -> None:
        rec = self.cta_unit[parent.cta].ctas[parent.cta]
        rec.live += len(kids) - 1
        if parent in rec.waiting:
            rec.waiting.remove(parent)
            rec.waiting += [k for k in kids if k.state is WarpState.WAITING_BARRIER]

    # -- dispatch ------------------------------------------------------------------

    def _dispatch(self, now: int) -> None:
        if not self.pending or not self.dispatch_enabled:
            return
        gs = self.cfg.reconfig.group_size
        for unit in self.units:
            if not self.pending:
                return
            cta = self.pending[0]
            threads = cta.warp_count * WARP_SIZE
            if not unit.accepts(threads):
                continue
            self.pending.popleft()
            streams = cta.streams
            groups = [origin_groups(s, cta.cta_id, i, gs) for i, s in enumerate(streams)]
            if unit.fused or self.cfg.wide_warps:
                shaped = [groups[i] + groups[i + 1] for i in range(0, len(groups) - 1, 2)]
                if len(groups) % 2:
                    shaped.append(groups[-1])
            else:
                shaped = groups
            core = unit.cores[0]
            for g in shaped:
                w = Warp(self.next_wid(), cta.cta_id, g, gs)
                w.ready_at = now
                core.add(w)
            self.cta_unit[cta.cta_id] = unit
            unit.ctas[cta.cta_id] = CtaRecord(cta.cta_id, threads, len(shaped))
            unit.threads += threads
            self.resident_ctas += 1

    def _can_dispatch(self) -> bool:
        if not self.pending or not self.dispatch_enabled:
            return False
        threads = self.pending[0].warp_count * WARP_SIZE
        return any(u.accepts(threads) for u in self.units)

    # -- memory plumbing -------------------------------------------------------------

    def _mc_for(self, line: int) -> MemoryController:
        return self.mcs[(line // LINE_SIZE) % len(self.mcs)]

    def _memory(self, now: int) -> None:
        reply_net = self.net.reply
        for mc in self.mcs:
            mc.service(now)
            while True:
                r = mc.head_reply(now)
                if r is None:
                    break
                pkt = Packet(mc.node, r.dst_node, REPLY_FLITS, Subnet.REPLY, (r.line, r.port_id))
                if reply_net.inject(pkt, now) is InjectResult.STALLED:
                    mc.stats.icnt_stall_cycles += 1
                    break
                mc.pop_reply()
        self.net.step(now)
        for pkt in self.net.req.deliveries(now):
            line, is_write, port_id = pkt.payload
            self.mc_by_node[pkt.dst].receive(line, is_write, pkt.src, port_id)
        for pkt in reply_net.deliveries(now):
            line, port_id = pkt.payload
            self.ports[port_id].fill(line, now)
        req_net = self.net.req
        for unit in self.units:
            port = unit.port
            ev = port._hit_events
            if ev and ev[0][0] <= now:
                port.tick(now)
            box = port.outbox
            while box:
                out = box[0]
                size = REPLY_FLITS if out.is_write else REQUEST_FLITS
                pkt = Packet(unit.node, self._mc_for(out.line).node, size, Subnet.REQ,
                             (out.line, out.is_write, port.port_id))
                if req_net.inject(pkt, now) is InjectResult.STALLED:
                    break
                box.popleft()

    # -- dynamic split / re-fuse -------------------------------------------------------

    def _reconfigure(self, now: int) -> None:
        p = self.cfg.reconfig
        check = now % p.check_period == 0
        migrate = now % p.migration_period == 0
        for unit in self.units:
            pair = unit.pair
            if pair is None:
                continue
            c0, c1 = unit.cores
            if pair.mode is Mode.FUSED and check:
                collect_bin(pair, c0.warps, now)
                if check_split(pair, len(c0.warps)) == SPLIT:
                    execute_split(pair, c0, c1, self.policy, now, self.next_wid, self._replace)
                    unit.idle_mark = (c1.stats.cycles, c1.stats.idle_cycles)
            elif pair.mode is Mode.SPLIT_RUNNING:
                if check and check_refuse(pair, c1, now) == REFUSE:
                    refuse(pair, c0, c1, now)
                elif migrate:
                    cyc, idle = unit.idle_mark
                    span = c1.stats.cycles - cyc
                    frac = (c1.stats.idle_cycles - idle) / span if span else 0.0
                    migrate_fast_warps(pair, c0, c1, now, frac)
                    unit.idle_mark = (c1.stats.cycles, c1.stats.idle_cycles)

    # -- the cycle loop ------------------------------------------------------------

    def step(self, now: int) -> int:
        """Advance one cycle; returns the number of instructions issued."""
        self._memory(now)
        self._dispatch(now)
        issued = 0
        for unit in self.units:
            for core in unit.cores:
                if not core.enabled:
                    continue
                if core.stall_until > now or core.pipe_free_at > now:
                    st = core.stats
                    st.cycles += 1
                    if core.stall_until > now:
                        st.drain_cycles += 1
                    else:
                        st.busy_cycles += 1
                elif step_core(core, now, self) is not None:
                    issued += 1
        if self.policy is not Policy.STATIC and now > 0:
            self._reconfigure(now)
        self.cta_time += self.resident_ctas
        return issued

    def _next_time(self, now: int) -> int:
        nxt = now + 1
        if self._can_dispatch():
            return nxt
        best = NEVER
        for unit in self.units:
            port = unit.port
            if port.outbox:
                return nxt
            t = port.next_event()
            if t is not None and t < best:
                best = t
            for core in unit.cores:
                if not core.enabled:
                    continue
                gate = max(core.stall_until, core.pipe_free_at)
                sb = core.scoreboard._until
                ready = NEVER
                for w in core.warps:
                    if w.state is WarpState.READY:
                        r = max(w.ready_at, sb.get(w.wid, 0))
                        if r < ready:
                            ready = r
                if ready < NEVER:
                    t = max(gate, ready)
                    if t <= nxt:
                        return nxt
                    best = min(best, t)
        for mc in self.mcs:
            t = mc.next_event()
            if t is not None:
                if t <= nxt:
                    return nxt
                best = min(best, t)
        t = self.net.next_event()
        if t is not None:
            if t <= nxt:
                return nxt
            best = min(best, t)
        if self.policy is not Policy.STATIC:
            p = self.cfg.reconfig
            for period in (p.check_period, p.migration_period):
                best = min(best, (now // period + 1) * period)
        return max(nxt, best)

    def _skip(self, start: int, end: int) -> None:
        """Account cycles [start, end) in which nothing happens."""
        span = end - start
        if span <= 0:
            return
        for unit in self.units:
            for core in unit.cores:
                if not core.enabled:
                    continue
                st = core.stats
                st.cycles += span
                drain = max(0, min(end, core.stall_until) - start)
                rest_start = start + drain
                busy = max(0, min(end, core.pipe_free_at) - rest_start)
                st.drain_cycles += drain
                st.busy_cycles += busy
                st.idle_cycles += span - drain - busy
        self.cta_time += span * self.resident_ctas

    def finished(self) -> bool:
        return self.done_ctas == self.total_ctas

    def run_until(self, stop, limit: int | None = None) -> None:
        limit = self.cfg.max_cycles if limit is None else limit
        now = self.now
        while not stop():
            if now >= limit:
                break
            issued = self.step(now)
            if stop():
                now += 1
                break
            # skipping ahead is only worth trying after a quiet cycle
            nxt = now + 1 if issued else self._next_time(now)
            if nxt >= NEVER:
                raise RuntimeError(f"simulation deadlocked at cycle {now}")
            nxt = min(nxt, limit)
            self._skip(now + 1, nxt)
            now = nxt
        self.now = now
        if not self.finished() and now >= self.cfg.max_cycles:
            raise RuntimeError(f"kernel did not finish within {self.cfg.max_cycles} cycles")

    def idle_for(self, cycles: int) -> None:
        """Advance the clock with every core stalled (reconfiguration)."""
        for unit in self.units:
            for core in unit.cores:
                core.stall_until = max(core.stall_until, self.now + cycles)
        self._skip(self.now, self.now + cycles)
        self.now += cycles
        self.reconfig_cycles += cycles

    # -- counters -------------------------------------------------------------------------

    def all_ports(self) -> list[MemoryPort]:
        return self.retired_ports + list(self.ports.values())

    def all_cores(self) -> list[Core]:
        seen = {}
        for u in self.units:
            for c in u.cores:
                seen[c.core_id] = c
        return list(seen.values())

    def all_nets(self) -> list[Interconnect]:
        return self.retired_nets + [self.net]

    def counters(self) -> dict:
        cores = self.all_cores()
        ports = self.all_ports()
        nets = self.all_nets()
        cs = {k: sum(getattr(c.stats, k) for c in cores)
              for k in ("issued_insns", "thread_insns", "active_thread_slots",
                        "inactive_thread_slots", "control_stall_cycles", "issue_cycles",
                        "loads", "stores", "mshr_stall_cycles")}
        wcyc = sum(c.stats.cycles * c.weight for c in cores)
        widle = sum(c.stats.idle_cycles * c.weight for c in cores)
        d = {f"core_{k}": v for k, v in cs.items()}
        d.update(
            weighted_cycles=wcyc, weighted_idle=widle,
            lane_accesses=sum(p.stats.lane_accesses for p in ports),
            requests_sent=sum(p.stats.requests_sent for p in ports),
            icache_accesses=sum(p.stats.icache_accesses for p in ports),
            icache_misses=sum(p.stats.icache_misses for p in ports),
            l1d_accesses=sum(p.l1d.stats.accesses for p in ports),
            l1d_hits=sum(p.l1d.stats.hits for p in ports),
            l1d_misses=sum(p.l1d.stats.misses for p in ports),
            l1d_merged=sum(p.l1d.stats.merged for p in ports),
            injected_flits=sum(n.injected_flits() for n in nets),
            delivered=sum(n.delivered() for n in nets),
            total_latency=sum(n.total_latency() for n in nets),
            icnt_stall=sum(mc.stats.icnt_stall_cycles for mc in self.mcs),
            cta_time=self.cta_time,
        )
        return d

    def metric_vector(self, cycles: int) -> MetricVector:
        c = self.counters()
        return metrics_from_counters(c, cycles, self.cfg.sm_count, self.topo.live_node_count(),
                                     self.cfg.sm.max_ctas)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _frac(x: float) -> float:
    return min(1.0, max(0.0, x))


def sample_metrics(c: dict, window_cycles: int, sm_count: int, live_nodes: int,
                   max_ctas: int) -> MetricVector:
    """Metric vector of a sampling window; an empty window is inconclusive."""
    if c["core_issued_insns"] == 0:
        raise SamplingInconclusive(f"no instructions issued in {window_cycles} cycles")
    return metrics_from_counters(c, window_cycles, sm_count, live_nodes, max_ctas)


def metrics_from_counters(c: dict, cycles: int, sm_count: int, live_nodes: int,
                          max_ctas: int) -> MetricVector:
    issued = c["core_issued_insns"]
    slots = c["core_active_thread_slots"] + c["core_inactive_thread_slots"]
    return MetricVector(
        control_divergent=_frac(_ratio(c["core_inactive_thread_slots"], slots)),
        coalescing=_frac(_ratio(c["requests_sent"], c["lane_accesses"])),
        l1d_miss=_frac(_ratio(c["l1d_accesses"] - c["l1d_hits"], c["l1d_accesses"])),
        l1i_miss=_frac(_ratio(c["icache_misses"], c["icache_accesses"])),
        l1c_miss=0.0,
        mshr=_frac(_ratio(c["l1d_merged"], c["l1d_misses"])),
        load_inst_rate=_frac(_ratio(c["core_loads"], issued)),
        store_inst_rate=_frac(_ratio(c["core_stores"], issued)),
        noc=_frac(_ratio(c["injected_flits"], 2 * cycles * live_nodes)),
        concurrent_cta=min(float(max_ctas), _ratio(c["cta_time"], cycles * sm_count)),
        avg_noc_latency=_ratio(c["total_latency"], c["delivered"]),
    )
