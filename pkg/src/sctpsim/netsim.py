"""Deterministic discrete-event network simulator.

Time is kept as integer nanoseconds. Events run in ``(fire_at, sequence)``
order, so two events at the same instant execute in scheduling order.
Links are FIFO with a DropTail queue and Bernoulli wire loss drawn from a
per-link generator derived from the master seed and the link name.
"""

import heapq
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, NamedTuple

import numpy as np

from .errors import DanglingAddress, PastEvent

NS = 1_000_000_000


def seconds_to_ns(s):
    return int(round(s * NS))


def ns_to_seconds(t):
    return t / NS


class EventKind(Enum):
    PACKET_ARRIVAL = "arrive"
    TIMER_FIRE = "timer"
    APP_SEND = "app"
    SIM_END = "end"


class SimEvent(NamedTuple):
    fire_at: int
    sequence: int
    kind: EventKind
    action: Callable
    args: tuple = ()


class Simulator:
    def __init__(self):
        self.now = 0
        self._queue = []
        self._seq = 0
        self.executed = 0

    def schedule(self, fire_at, kind, action, *args):
        if fire_at < self.now:
            raise PastEvent(f"event at {fire_at} ns is before the clock ({self.now} ns)")
        ev = SimEvent(fire_at, self._seq, kind, action, args)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def schedule_in(self, delay, kind, action, *args):
        return self.schedule(self.now + delay, kind, action, *args)

    @property
    def pending(self):
        return len(self._queue)

    def run_until(self, end_time):
        """Execute events with ``fire_at <= end_time`` (seconds); return how many ran."""
        end = seconds_to_ns(end_time)
        q = self._queue
        pop = heapq.heappop
        n = 0
        while q and q[0][0] <= end:
            ev = pop(q)
            self.now = ev[0]
            ev[3](*ev[4])
            n += 1
        self.executed += n
        return n


class Timer:
    """A restartable one-shot timer that avoids heap churn.

    Moving the deadline later keeps the pending event and re-arms when it
    fires early; moving it earlier schedules a fresh event and the old one is
    ignored when it pops.
    """

    __slots__ = ("sim", "callback", "deadline", "_pending")

    def __init__(self, sim, callback):
        self.sim = sim
        self.callback = callback
        self.deadline = None
        self._pending = None

    def set(self, deadline):
        self.deadline = deadline
        if deadline is None:
            return
        if self._pending is None or self._pending > deadline:
            self._pending = deadline
            self.sim.schedule(deadline, EventKind.TIMER_FIRE, self._fire, deadline)

    def _fire(self, scheduled_for):
        if scheduled_for != self._pending:
            return
        self._pending = None
        d = self.deadline
        if d is None:
            return
        if d > self.sim.now:
            self._pending = d
            self.sim.schedule(d, EventKind.TIMER_FIRE, self._fire, d)
            return
        self.deadline = None
        self.callback(self.sim.now)


@dataclass(slots=True, eq=False)
class Datagram:
    """Network-layer envelope around a transport packet."""

    src: int
    dst: int
    dst_port: int
    payload: Any
    size: int
    protocol: str = "sctp"
    flow: Any = None
    is_data: bool = False
    seq: int = -1
    sent_at: int = 0
    route: tuple = ()
    hop: int = 0


def link_rng(seed, name):
    """Independent generator for one link, split from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


class Link:
    """Unidirectional link: DropTail FIFO, serialization, propagation, wire loss."""

    def __init__(self, sim, name, bandwidth, prop_delay, queue_limit=50, loss_rate=0.0,
                 rng=None, seed=0):
        self.sim = sim
        self.name = name
        self.bandwidth = float(bandwidth)
        self.prop_delay = seconds_to_ns(prop_delay)
        self.queue_limit = queue_limit
        self.loss_rate = loss_rate
        self.rng = rng if rng is not None else link_rng(seed, name)
        self.busy_until = 0
        self.deliver = None          # callable(datagram, link) set by the topology
        self.drop_filter = None      # optional scripted loss: callable(datagram) -> bool
        self.on_drop = None          # callable(datagram, link, reason)
        self.trace = None            # callable(time, kind, link, datagram)
        self._finish = deque()       # serialization finish times of packets in the system
        self._ns_per_byte = 8 * NS / self.bandwidth
        self.offered = 0
        self.delivered = 0
        self.queue_drops = 0
        self.loss_drops = 0
        self.bytes_delivered = 0

    @property
    def occupancy(self):
        now = self.sim.now
        f = self._finish
        while f and f[0] <= now:
            f.popleft()
        return len(f)

    @property
    def in_flight(self):
        return self.offered - self.delivered - self.queue_drops - self.loss_drops

    def serialization(self, nbytes):
        return int(round(nbytes * self._ns_per_byte))

    def transmit(self, dgram):
        """Offer a datagram; return its arrival time in ns, or None if it is dropped."""
        now = self.sim.now
        self.offered += 1
        f = self._finish
        while f and f[0] <= now:
            f.popleft()
        if len(f) >= self.queue_limit:
            self.queue_drops += 1
            if self.trace:
                self.trace(now, "drop_queue", self, dgram)
            if self.on_drop:
                self.on_drop(dgram, self, "queue")
            return None
        start = self.busy_until if self.busy_until > now else now
        done = start + int(round(dgram.size * self._ns_per_byte))
        self.busy_until = done
        f.append(done)
        if self.trace:
            self.trace(now, "enqueue", self, dgram)
        lost = False
        if self.drop_filter is not None and self.drop_filter(dgram):
            lost = True
        elif self.loss_rate > 0.0 and (self.loss_rate >= 1.0 or self.rng.random() < self.loss_rate):
            lost = True
        if lost:
            self.loss_drops += 1
            if self.trace:
                self.trace(done, "drop_loss", self, dgram)
            if self.on_drop:
                self.on_drop(dgram, self, "loss")
            return None
        arrival = done + self.prop_delay
        self.sim.schedule(arrival, EventKind.PACKET_ARRIVAL, self._arrive, dgram)
        return arrival

    def _arrive(self, dgram):
        self.delivered += 1
        self.bytes_delivered += dgram.size
        if self.trace:
            self.trace(self.sim.now, "arrive", self, dgram)
        self.deliver(dgram, self)

    def counters(self):
        return {"offered": self.offered, "delivered": self.delivered,
                "queue_drops": self.queue_drops, "loss_drops": self.loss_drops,
                "in_flight": self.in_flight}


@dataclass
class Topology:
    sim: Simulator
    nodes: list = field(default_factory=list)
    links: dict = field(default_factory=dict)
    address_map: dict = field(default_factory=dict)     # address -> node name
    routes: dict = field(default_factory=dict)          # (src, dst) -> tuple of links
    endpoints: dict = field(default_factory=dict)       # (address, port) -> handler
    host_addresses: dict = field(default_factory=dict)  # node name -> [addresses]
    bottleneck: str = None

    def bind(self, address, port, handler):
        if address not in self.address_map:
            raise DanglingAddress(f"address {address} is not attached to any node")
        self.endpoints[(address, port)] = handler

    def send(self, dgram):
        route = self.routes.get((dgram.src, dgram.dst))
        if route is None:
            raise DanglingAddress(f"no route from {dgram.src} to {dgram.dst}")
        dgram.route = route
        dgram.hop = 0
        dgram.sent_at = self.sim.now
        return route[0].transmit(dgram)

    def _forward(self, dgram, link):
        dgram.hop += 1
        if dgram.hop < len(dgram.route):
            dgram.route[dgram.hop].transmit(dgram)
            return
        handler = self.endpoints.get((dgram.dst, dgram.dst_port))
        if handler is not None:
            handler(dgram)

    def set_trace(self, trace):
        for link in self.links.values():
            link.trace = trace

    def set_drop_hook(self, hook):
        for link in self.links.values():
            link.on_drop = hook


def build_topology(sim, spec, seed=0):
    """Build a topology from an explicit description or a named template.

    ``spec`` is either ``{"template": "dumbbell" | "dualpath", ...params}`` or an
    explicit dict with ``nodes``, ``links`` (dicts with name/src/dst/bandwidth/
    delay/queue_limit/loss_rate), ``addresses`` (address -> node) and
    ``routes`` ((src_addr, dst_addr) -> [link names]).
    """
    if "template" in spec:
        params = dict(spec)
        template = params.pop("template")
        if template == "dumbbell":
            spec = dumbbell_spec(**params)
        elif template == "dualpath":
            spec = dualpath_spec(**params)
        else:
            raise ValueError(f"unknown topology template {template!r}")
    topo = Topology(sim, nodes=list(spec["nodes"]), bottleneck=spec.get("bottleneck"))
    node_set = set(topo.nodes)
    for ld in spec["links"]:
        for end in (ld["src"], ld["dst"]):
            if end not in node_set:
                raise DanglingAddress(f"link {ld['name']} references unknown node {end!r}")
        link = Link(sim, ld["name"], ld["bandwidth"], ld["delay"], ld.get("queue_limit", 50),
                    ld.get("loss_rate", 0.0), seed=seed)
        link.src_node, link.dst_node = ld["src"], ld["dst"]
        link.deliver = topo._forward
        topo.links[ld["name"]] = link
    for addr, node in spec["addresses"].items():
        if node not in node_set:
            raise DanglingAddress(f"address {addr} references unknown node {node!r}")
        topo.address_map[addr] = node
        topo.host_addresses.setdefault(node, []).append(addr)
    for (src, dst), names in spec["routes"].items():
        for a in (src, dst):
            if a not in topo.address_map:
                raise DanglingAddress(f"route endpoint {a} is not a known address")
        try:
            hops = tuple(topo.links[n] for n in names)
        except KeyError as e:
            raise DanglingAddress(f"route {src}->{dst} uses unknown link {e.args[0]!r}") from None
        at = topo.address_map[src]
        for h in hops:
            if h.src_node != at:
                raise DanglingAddress(f"route {src}->{dst} is not contiguous at link {h.name}")
            at = h.dst_node
        if at != topo.address_map[dst]:
            raise DanglingAddress(f"route {src}->{dst} ends at {at}, not at the destination node")
        topo.routes[(src, dst)] = hops
    return topo


def ip(a, b, c, d):
    return (a << 24) | (b << 16) | (c << 8) | d


def dumbbell_spec(n=1, bandwidth=5e6, delay=0.2, queue_limit=50, loss_rate=0.0,
                  access_bandwidth=0.0, access_delay=0.0, access_queue_limit=1000):
    """N sender/receiver pairs sharing one bottleneck in each direction.

    With ``access_bandwidth`` 0 the hosts attach straight to the bottleneck.
    """
    left = [f"s{i}" for i in range(n)]
    right = [f"r{i}" for i in range(n)]
    nodes = ["L", "R"] + (left + right if access_bandwidth else [])
    links = [
        {"name": "bneck_fwd", "src": "L", "dst": "R", "bandwidth": bandwidth, "delay": delay,
         "queue_limit": queue_limit, "loss_rate": loss_rate},
        {"name": "bneck_rev", "src": "R", "dst": "L", "bandwidth": bandwidth, "delay": delay,
         "queue_limit": queue_limit, "loss_rate": loss_rate},
    ]
    addresses = {}
    routes = {}
    for i in range(n):
        sa, ra = ip(10, 0, 0, i + 1), ip(10, 1, 0, i + 1)
        addresses[sa] = left[i]
        addresses[ra] = right[i]
        if access_bandwidth:
            for name, a, b in ((f"acc_s{i}_up", left[i], "L"), (f"acc_s{i}_down", "L", left[i]),
                               (f"acc_r{i}_up", right[i], "R"), (f"acc_r{i}_down", "R", right[i])):
                links.append({"name": name, "src": a, "dst": b, "bandwidth": access_bandwidth,
                              "delay": access_delay, "queue_limit": access_queue_limit})
            routes[(sa, ra)] = [f"acc_s{i}_up", "bneck_fwd", f"acc_r{i}_down"]
            routes[(ra, sa)] = [f"acc_r{i}_up", "bneck_rev", f"acc_s{i}_down"]
        else:
            # hosts sit on the router: alias the bottleneck endpoints
            addresses[sa] = "L"
            addresses[ra] = "R"
            routes[(sa, ra)] = ["bneck_fwd"]
            routes[(ra, sa)] = ["bneck_rev"]
    return {"nodes": nodes, "links": links, "addresses": addresses, "routes": routes,
            "bottleneck": "bneck_fwd"}


def dualpath_spec(bandwidth=5e6, delay=0.2, queue_limit=50, loss_rate=0.0,
                  alt_bandwidth=None, alt_delay=None, alt_loss_rate=None):
    """Two disjoint paths between host A (two addresses) and host B (two addresses)."""
    alt_bandwidth = bandwidth if alt_bandwidth is None else alt_bandwidth
    alt_delay = delay if alt_delay is None else alt_delay
    alt_loss_rate = loss_rate if alt_loss_rate is None else alt_loss_rate
    a = [ip(10, 0, 0, 1), ip(10, 0, 1, 1)]
    b = [ip(10, 1, 0, 1), ip(10, 1, 1, 1)]
    links = []
    for k, (bw, d, lr) in enumerate(((bandwidth, delay, loss_rate),
                                     (alt_bandwidth, alt_delay, alt_loss_rate))):
        links.append({"name": f"p{k}_fwd", "src": "A", "dst": "B", "bandwidth": bw, "delay": d,
                      "queue_limit": queue_limit, "loss_rate": lr})
        links.append({"name": f"p{k}_rev", "src": "B", "dst": "A", "bandwidth": bw, "delay": d,
                      "queue_limit": queue_limit, "loss_rate": lr})
    return {
        "nodes": ["A", "B"],
        "links": links,
        "addresses": {a[0]: "A", a[1]: "A", b[0]: "B", b[1]: "B"},
        "routes": {(a[0], b[0]): ["p0_fwd"], (b[0], a[0]): ["p0_rev"],
                   (a[1], b[1]): ["p1_fwd"], (b[1], a[1]): ["p1_rev"]},
        "bottleneck": "p0_fwd",
    }
