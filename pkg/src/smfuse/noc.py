"""2D mesh interconnect: topology with router bypass, XY routing and a
cycle-stepped packet network (one instance per subnet)."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum

from .memsys import ConfigError

ROUTER_STAGES = 2
BYPASS_LATENCY = 1
REQUEST_FLITS = 2
REPLY_FLITS = 10

# port indices: 0 local (inject/eject), then the four mesh directions
LOCAL, EAST, WEST, NORTH, SOUTH = range(5)
_OPPOSITE = {EAST: WEST, WEST: EAST, NORTH: SOUTH, SOUTH: NORTH}


class NodeKind(Enum):
    SM = "sm"
    MC = "mc"
    BYPASSED = "bypassed"
    EMPTY = "empty"


class Subnet(Enum):
    REQ = "req"
    REPLY = "reply"


class InjectResult(Enum):
    ACCEPTED = "accepted"
    STALLED = "stalled"


@dataclass(frozen=True)
class Hop:
    node: int
    bypassed: bool


@dataclass
class MeshTopology:
    width: int
    height: int
    kinds: list            # NodeKind per node id (row-major)
    owner: list            # SM index / MC index / partner node / None
    sm_nodes: list         # baseline node of every SM index
    mc_nodes: list
    channel_bits: int = 128

    def coords(self, node: int) -> tuple[int, int]:
        return node % self.width, node // self.width

    def node_at(self, x: int, y: int) -> int:
        return y * self.width + x

    def is_bypassed(self, node: int) -> bool:
        return self.kinds[node] is NodeKind.BYPASSED

    def home(self, node: int) -> int:
        """Live node that serves ``node`` (its partner when bypassed)."""
        return self.owner[node] if self.is_bypassed(node) else node

    def sm_home(self, sm: int) -> int:
        return self.home(self.sm_nodes[sm])

    def live_sm_nodes(self) -> list[int]:
        return sorted({self.sm_home(i) for i in range(len(self.sm_nodes))})

    def live_node_count(self) -> int:
        return len(self.live_sm_nodes()) + len(self.mc_nodes)

    def adjacent(self, a: int, b: int) -> bool:
        (ax, ay), (bx, by) = self.coords(a), self.coords(b)
        return abs(ax - bx) + abs(ay - by) == 1


def _mesh_shape(total: int) -> tuple[int, int]:
    best = None
    for h in range(1, total + 1):
        for w in (h, h + 1):
            if w * h >= total and (best is None or w * h < best[0] * best[1]):
                best = (w, h)
        if h * h > total:
            break
    return best


def _mc_positions(width: int, height: int, mc_count: int) -> list[tuple[int, int]]:
    # Half the MCs down the left column, the rest down the right one, spread evenly.
    left = (mc_count + 1) // 2
    out = []
    for side, count in ((0, left), (width - 1, mc_count - left)):
        if count > height:
            raise ConfigError(f"{mc_count} MCs do not fit two {height}-node perimeter columns")
        for i in range(count):
            y = 0 if count == 1 else round(i * (height - 1) / (count - 1))
            out.append((side, y))
    return out


def sm_pairs(topo: MeshTopology) -> list[tuple[int, int]]:
    """Neighbouring SM pairs that may fuse, chosen greedily in SM index
    order (successor first, then any free mesh neighbour)."""
    count = len(topo.sm_nodes)
    by_node = {node: i for i, node in enumerate(topo.sm_nodes)}
    free = set(range(count))
    pairs = []
    for a in range(count):
        if a not in free:
            continue
        candidates = [a + 1] if a + 1 in free else []
        x, y = topo.coords(topo.sm_nodes[a])
        for nx, ny in ((x + 1, y), (x, y + 1), (x - 1, y), (x, y - 1)):
            if 0 <= nx < topo.width and 0 <= ny < topo.height:
                b = by_node.get(topo.node_at(nx, ny))
                if b is not None and b in free and b != a:
                    candidates.append(b)
        for b in candidates:
            if topo.adjacent(topo.sm_nodes[a], topo.sm_nodes[b]):
                free -= {a, b}
                pairs.append((a, b))
                break
    if free:
        raise ConfigError(f"SMs {sorted(free)} have no free neighbour to fuse with")
    return pairs


def build_topology(sm_count: int, mc_count: int, fused_pairs=()) -> MeshTopology:
    """Place SMs in snake order around perimeter MCs; bypass the second SM of
    every fused pair."""
    if sm_count <= 0 or mc_count <= 0:
        raise ConfigError("need at least one SM and one MC")
    width, height = _mesh_shape(sm_count + mc_count)
    if width < 2:
        width, height = 2, max(1, height)
    n = width * height
    kinds = [NodeKind.EMPTY] * n
    owner: list = [None] * n
    mc_nodes = []
    for j, (x, y) in enumerate(_mc_positions(width, height, mc_count)):
        node = y * width + x
        kinds[node] = NodeKind.MC
        owner[node] = j
        mc_nodes.append(node)
    sm_nodes = []
    # snake order keeps consecutive SM indices adjacent across row ends
    snake = [y * width + (x if y % 2 == 0 else width - 1 - x)
             for y in range(height) for x in range(width)]
    for node in snake:
        if len(sm_nodes) == sm_count:
            break
        if kinds[node] is NodeKind.EMPTY:
            kinds[node] = NodeKind.SM
            owner[node] = len(sm_nodes)
            sm_nodes.append(node)
    topo = MeshTopology(width, height, kinds, owner, sm_nodes, mc_nodes)
    for a, b in fused_pairs:
        na, nb = sm_nodes[a], sm_nodes[b]
        if not topo.adjacent(na, nb):
            raise ConfigError(f"SMs {a} and {b} are not mesh neighbours")
        kinds[nb] = NodeKind.BYPASSED
        owner[nb] = na
    return topo


def route(topo: MeshTopology, src: int, dst: int) -> list[Hop]:
    """X-then-Y path from ``src`` to ``dst`` (excluding ``src``)."""
    assert not topo.is_bypassed(dst), "re-home bypassed destinations first"
    x, y = topo.coords(src)
    dx, dy = topo.coords(dst)
    hops = []
    while x != dx:
        x += 1 if dx > x else -1
        node = topo.node_at(x, y)
        hops.append(Hop(node, topo.is_bypassed(node)))
    while y != dy:
        y += 1 if dy > y else -1
        node = topo.node_at(x, y)
        hops.append(Hop(node, topo.is_bypassed(node)))
    return hops


def hop_count(topo: MeshTopology, src: int, dst: int) -> int:
    """Router traversals, bypassed routers excluded."""
    return sum(1 for h in route(topo, src, dst) if not h.bypassed)


def zero_load_latency(topo: MeshTopology, src: int, dst: int, flits: int) -> int:
    hops = route(topo, src, dst)
    live = sum(1 for h in hops if not h.bypassed)
    return ROUTER_STAGES * live + BYPASS_LATENCY * (len(hops) - live) + flits


def mean_sm_mc_hops(topo: MeshTopology) -> float:
    pairs = [(s, m) for s in topo.live_sm_nodes() for m in topo.mc_nodes]
    return sum(hop_count(topo, s, m) for s, m in pairs) / len(pairs)


def _direction(topo: MeshTopology, a: int, b: int) -> int:
    (ax, ay), (bx, by) = topo.coords(a), topo.coords(b)
    if bx > ax:
        return EAST
    if bx < ax:
        return WEST
    return SOUTH if by > ay else NORTH


def _stops(topo: MeshTopology, src: int, dst: int) -> list[tuple]:
    """Live routers on the path as (node, segment latency, out port at the
    previous stop, in port at this stop)."""
    stops = []
    prev = src
    first_dir = None
    bypassed = 0
    for hop in route(topo, src, dst):
        d = _direction(topo, prev, hop.node)
        if first_dir is None:
            first_dir = d
        if hop.bypassed:
            bypassed += 1
        else:
            stops.append((hop.node, ROUTER_STAGES + BYPASS_LATENCY * bypassed,
                          first_dir, _OPPOSITE[d]))
            first_dir = None
            bypassed = 0
        prev = hop.node
    return stops


# -- network ---------------------------------------------------------------

@dataclass(eq=False)
class Packet:
    src: int
    dst: int
    size: int
    subnet: Subnet
    payload: object = None
    inject_cycle: int = -1
    deliver_cycle: int = -1
    ready_at: int = 0
    stops: list = field(default_factory=list)
    at: int = -1          # index into stops of the current router, -1 = source


@dataclass
class NocStats:
    injected_packets: int = 0
    injected_flits: int = 0
    delivered_packets: int = 0
    total_latency: int = 0
    injection_stalls: int = 0
    stalls_by_node: dict = field(default_factory=dict)


class Network:
    """One subnet of the mesh. Packets advance with virtual cut-through
    at packet granularity: an output link is busy for ``size`` cycles and a
    packet enters a downstream buffer only if the whole packet fits or the
    buffer is empty."""

    def __init__(self, topo: MeshTopology, subnet: Subnet, queue_depth: int = 8,
                 perfect: bool = False):
        self.topo = topo
        self.subnet = subnet
        self.queue_depth = queue_depth
        self.perfect = perfect
        n = topo.width * topo.height
        self.buffers = [[[] for _ in range(5)] for _ in range(n)]
        self.occupancy = [[0] * 5 for _ in range(n)]
        self.out_busy = [[0] * 5 for _ in range(n)]
        self.active: set[int] = set()
        self._delivered: list = []
        self._seq = 0
        self._stop_cache: dict = {}
        self.stats = NocStats()

    @property
    def in_flight(self) -> int:
        return self.stats.injected_packets - self.stats.delivered_packets

    def _has_space(self, node: int, port: int, size: int) -> bool:
        occ = self.occupancy[node][port]
        return occ == 0 or occ + size <= self.queue_depth

    def can_inject(self, node: int, size: int) -> bool:
        return self.perfect or self._has_space(node, LOCAL, size)

    def inject(self, packet: Packet, now: int) -> InjectResult:
        src = packet.src
        assert not self.topo.is_bypassed(src)
        if not self.can_inject(src, packet.size):
            self.stats.injection_stalls += 1
            self.stats.stalls_by_node[src] = self.stats.stalls_by_node.get(src, 0) + 1
            return InjectResult.STALLED
        packet.inject_cycle = now
        self.stats.injected_packets += 1
        self.stats.injected_flits += packet.size
        if self.perfect:
            self._schedule_delivery(packet, now + 1)
            return InjectResult.ACCEPTED
        key = (src, packet.dst)
        stops = self._stop_cache.get(key)
        if stops is None:
            stops = self._stop_cache[key] = _stops(self.topo, src, packet.dst)
        packet.stops = stops
        packet.at = -1
        packet.ready_at = now
        self.buffers[src][LOCAL].append(packet)
        self.occupancy[src][LOCAL] += packet.size
        self.active.add(src)
        return InjectResult.ACCEPTED

    def _schedule_delivery(self, packet: Packet, when: int) -> None:
        packet.deliver_cycle = when
        self._seq += 1
        heapq.heappush(self._delivered, (when, self._seq, packet))

    def step(self, now: int) -> None:
        if self.perfect or not self.active:
            return
        moves = []
        start = now % 5
        # phase one only reads state, so node order cannot change the outcome
        for node in self.active:
            bufs = self.buffers[node]
            busy = self.out_busy[node]
            claimed = set()
            for k in range(5):
                port = (start + k) % 5
                queue = bufs[port]
                if not queue:
                    continue
                pkt = queue[0]
                if pkt.ready_at > now:
                    continue
                nxt = pkt.at + 1
                if nxt == len(pkt.stops):
                    out = LOCAL
                else:
                    stop = pkt.stops[nxt]
                    out = stop[2]
                    if not self._has_space(stop[0], stop[3], pkt.size):
                        continue
                if out in claimed or busy[out] > now:
                    continue
                claimed.add(out)
                moves.append((node, port, out, pkt))
        for node, port, out, pkt in moves:
            self.buffers[node][port].pop(0)
            self.occupancy[node][port] -= pkt.size
            self.out_busy[node][out] = now + pkt.size
            if out == LOCAL:
                self._schedule_delivery(pkt, now + pkt.size)
            else:
                pkt.at += 1
                nnode, seg, _, inport = pkt.stops[pkt.at]
                pkt.ready_at = now + seg
                self.buffers[nnode][inport].append(pkt)
                self.occupancy[nnode][inport] += pkt.size
                self.active.add(nnode)
        for node, _, _, _ in moves:
            if not any(self.buffers[node]):
                self.active.discard(node)

    def deliveries(self, now: int) -> list[Packet]:
        out = []
        heap = self._delivered
        while heap and heap[0][0] <= now:
            pkt = heapq.heappop(heap)[2]
            self.stats.delivered_packets += 1
            self.stats.total_latency += pkt.deliver_cycle - pkt.inject_cycle
            out.append(pkt)
        return out

    def idle(self) -> bool:
        return not self.active and not self._delivered

    def next_event(self) -> int | None:
        best = self._delivered[0][0] if self._delivered else None
        for n in self.active:
            for q in self.buffers[n]:
                if q and (best is None or q[0].ready_at < best):
                    best = q[0].ready_at
        return best


class Interconnect:
    """Request and reply subnets over one topology."""

    def __init__(self, topo: MeshTopology, queue_depth: int = 8, perfect: bool = False):
        self.topo = topo
        self.perfect = perfect
        self.req = Network(topo, Subnet.REQ, queue_depth, perfect)
        self.reply = Network(topo, Subnet.REPLY, queue_depth, perfect)

    def step(self, now: int) -> None:
        self.req.step(now)
        self.reply.step(now)

    def idle(self) -> bool:
        return self.req.idle() and self.reply.idle()

    def injected_flits(self) -> int:
        return self.req.stats.injected_flits + self.reply.stats.injected_flits

    def delivered(self) -> int:
        return self.req.stats.delivered_packets + self.reply.stats.delivered_packets

    def total_latency(self) -> int:
        return self.req.stats.total_latency + self.reply.stats.total_latency

    def next_event(self) -> int | None:
        times = [t for t in (self.req.next_event(), self.reply.next_event()) if t is not None]
        return min(times) if times else None
