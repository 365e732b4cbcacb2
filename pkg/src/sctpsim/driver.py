"""Glue between transport endpoints and the simulator, plus traffic sources.

A :class:`HostDriver` binds one endpoint to its addresses in a topology,
turns emissions into datagrams and keeps one lazy :class:`Timer` per timer
key the endpoint reports.
"""

from functools import partial

from . import wire
from .netsim import Datagram, EventKind, Timer

IP_HEADER = 20


def datagram_for(emission, protocol, flow=None, encode=False):
    pkt = emission.packet
    if protocol == "tcp":
        size = pkt.size + IP_HEADER
        seq = pkt.seq
        payload = pkt
    else:
        chunks = pkt.chunks
        size = wire.packet_size(chunks) + IP_HEADER
        seq = chunks[0].tsn if emission.is_data else -1
        payload = wire.encode_packet(pkt) if encode else pkt
    return Datagram(emission.src, emission.dst, emission.dst_port, payload, size,
                    protocol, flow, emission.is_data, seq)


class HostDriver:
    def __init__(self, sim, topology, endpoint, protocol="sctp", flow=None, wire_encode=False):
        self.sim = sim
        self.topology = topology
        self.endpoint = endpoint
        self.protocol = protocol
        self.flow = flow              # FlowStats charged for data this host sends
        self.wire_encode = wire_encode and protocol != "tcp"
        self.timers = {}
        self.decode_stats = {}
        for addr in endpoint.addresses:
            topology.bind(addr, endpoint.port, self._on_datagram)

    def _on_datagram(self, dgram):
        pkt = dgram.payload
        if self.wire_encode:
            pkt = wire.decode_packet(pkt, self.decode_stats)
        self.dispatch(self.endpoint.receive(pkt, dgram.src, dgram.dst, self.sim.now))

    def dispatch(self, emissions):
        topo = self.topology
        flow = self.flow
        now = self.sim.now
        for e in emissions:
            dg = datagram_for(e, self.protocol, flow, self.wire_encode)
            if e.is_data and flow is not None:
                flow.packet_sent(now)
            topo.send(dg)
        self.sync_timers()

    def flush(self):
        self.dispatch(self.endpoint.drain())

    def sync_timers(self):
        timers = self.timers
        for key, deadline in self.endpoint.touched_deadlines():
            t = timers.get(key)
            if t is None:
                if deadline is None:
                    continue
                t = timers[key] = Timer(self.sim, partial(self._fire, key))
            elif t.deadline == deadline:
                continue
            t.set(deadline)

    def _fire(self, key, now):
        self.dispatch(self.endpoint.on_timer(key, now))


def drop_hook(dgram, link, reason):
    """Link drop callback charging lost data datagrams to their flow."""
    if dgram.is_data and dgram.flow is not None:
        dgram.flow.packet_dropped(dgram.sent_at)


# ------------------------------------------------------------- sources
class _Source:
    def __init__(self, message_size, streams=1, limit=None, payload=None):
        self.message_size = message_size
        self.streams = streams
        self.limit = limit
        self.sent = 0
        self._payload = payload if payload is not None else bytes(message_size)
        self._next_stream = 0

    @property
    def exhausted(self):
        return self.limit is not None and self.sent >= self.limit

    def next_payload(self):
        return self._payload

    def write(self, conn, now):
        """Hand one message to an SCTP association or a TCP connection."""
        data = self.next_payload()
        self.sent += 1
        if hasattr(conn, "send_message"):
            sid = self._next_stream
            self._next_stream = (sid + 1) % self.streams
            conn.send_message(sid, data, True, now)
        else:
            conn.write(data, now)


class GreedySource(_Source):
    """FTP-like source: keeps enough unsent data queued to fill the window."""

    def attach(self, conn, driver, now):
        conn.data_source = self.top_up
        driver.dispatch(driver.endpoint.kick(conn, now))

    def top_up(self, conn, now):
        sw = getattr(conn, "send_window", None)
        if sw is not None:
            want = sw() + self.message_size
        else:
            want = max(0, min(conn.cwnd, conn.peer_wnd) - conn.flight_size) + self.message_size
        while conn.unsent_bytes < want and not self.exhausted:
            self.write(conn, now)


class PacedSource(_Source):
    """Writes one message every ``message_size * 8 / rate`` seconds."""

    def __init__(self, message_size, rate_bps, streams=1, limit=None, payload=None):
        super().__init__(message_size, streams, limit, payload)
        self.rate = rate_bps
        self.gap = max(1, int(round(message_size * 8 / rate_bps * 1e9)))

    def attach(self, conn, driver, now):
        self._conn, self._driver = conn, driver
        driver.sim.schedule(now, EventKind.APP_SEND, self._tick)

    def _tick(self):
        conn, driver = self._conn, self._driver
        if self.exhausted or not _open(conn):
            return
        now = driver.sim.now
        self.write(conn, now)
        driver.dispatch(driver.endpoint.kick(conn, now))
        driver.sim.schedule(now + self.gap, EventKind.APP_SEND, self._tick)


class OnOffSource(PacedSource):
    """Paced source that sends for ``on_time`` seconds, then pauses for ``off_time``."""

    def __init__(self, message_size, rate_bps, on_time, off_time, streams=1, limit=None):
        super().__init__(message_size, rate_bps, streams, limit)
        self.on_ns = int(round(on_time * 1e9))
        self.off_ns = int(round(off_time * 1e9))
        self._start = None

    def _tick(self):
        conn, driver = self._conn, self._driver
        now = driver.sim.now
        if self._start is None:
            self._start = now
        period = self.on_ns + self.off_ns
        phase = (now - self._start) % period if period else 0
        if phase >= self.on_ns:
            if not self.exhausted and _open(conn):
                driver.sim.schedule(now + period - phase, EventKind.APP_SEND, self._tick)
            return
        super()._tick()


def _open(conn):
    return conn.state.value == "ESTABLISHED"
