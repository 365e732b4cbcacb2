"""SCTP-lite association state machine and endpoint.

An :class:`SctpEndpoint` owns the listening socket: it answers INIT with a
signed cookie without allocating anything, and only creates an
:class:`Association` when a valid COOKIE_ECHO returns. Associations are pure
state machines: every call takes the current time (integer ns) and leaves the
packets to send in an outbox, together with timer deadlines the driver is
expected to honour (see :meth:`Association.deadlines`).
"""

import hashlib
import hmac
import struct
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from itertools import count
from typing import NamedTuple

from . import wire
from .errors import (BadCookieSignature, BadStream, NoAddresses, NotEstablished,
                     StaleCookie)
from .pipeline import CopyAccount, CopyStage, SendPipeline, reassemble
from .rtt import rto_step
from .seqnum import MASK16, MASK32, unwrap

NS = 1_000_000_000
FAST_RTX_THRESHOLD = 4


class State(Enum):
    CLOSED = "CLOSED"
    COOKIE_WAIT = "COOKIE_WAIT"
    COOKIE_ECHOED = "COOKIE_ECHOED"
    ESTABLISHED = "ESTABLISHED"
    SHUTDOWN_PENDING = "SHUTDOWN_PENDING"
    CLOSED_FINAL = "CLOSED_FINAL"


@dataclass
class AssocConfig:
    """Association parameters; defaults are the tuned simulator values."""

    rto_initial: float = 4.0
    rto_min: float = 1.0
    rto_max: float = 60.0
    rto_alpha: Fraction = Fraction(1, 8)
    rto_beta: Fraction = Fraction(1, 4)
    assoc_max_retrans: int = 10
    path_max_retrans: int = 6
    max_init_retransmits: int = 9
    valid_cookie_life: float = 50.0
    hb_interval: float = 25.0
    heartbeat_enabled: bool = False
    initial_rwnd: int = 65536
    out_streams: int = 1
    mtu: int = 1500
    chunk_size: int = 1468
    rtx_cwnd: int = 4           # initial cwnd cap, in MTUs
    cmt_cwnd: int = 1           # stored only
    cmt_delayed_ack: int = 1    # stored only
    sack_delay: float = 0.2
    sack_every: int = 2
    receiver_copies: bool = True

    def initial_cwnd(self):
        return min(self.rtx_cwnd * self.mtu, max(2 * self.mtu, 4380))


@dataclass(slots=True, eq=False)
class PathState:
    address: int
    local_address: int
    rto: float
    cwnd: int
    ssthresh: int
    active: bool = True
    error_count: int = 0
    srtt: float = None
    rttvar: float = None
    flight_size: int = 0
    partial_bytes_acked: int = 0
    hb_due_at: int = None
    t3_deadline: int = None
    last_sent_at: int = 0
    hb_outstanding: bool = False
    rtt_probe: object = None


@dataclass(slots=True, eq=False)
class StreamState:
    stream_id: int
    next_ssn_out: int = 0
    next_ssn_expect_in: int = 0
    reorder_buffer: dict = field(default_factory=dict)
    unordered_ready: list = field(default_factory=list)


def update_rto(path, rtt_sample, config):
    """Fold an RTT sample (seconds) into ``path`` and return the new RTO."""
    path.srtt, path.rttvar, path.rto = rto_step(
        path.srtt, path.rttvar, rtt_sample, float(config.rto_alpha), float(config.rto_beta),
        config.rto_min, config.rto_max)
    return path.rto


class Emission(NamedTuple):
    src: int
    dst: int
    dst_port: int
    packet: wire.Packet
    is_data: bool = False


_assoc_ids = count()


class Association:
    def __init__(self, config, local_port, peer_port, local_addresses, peer_addresses,
                 local_tag, initial_tsn, account=None, stats=None):
        if not peer_addresses:
            raise NoAddresses("an association needs at least one peer address")
        self.id = next(_assoc_ids)
        self.config = config
        self.local_port = local_port
        self.peer_port = peer_port
        self.state = State.CLOSED
        self.local_tag = local_tag
        self.peer_tag = 0
        self.initial_tsn = initial_tsn
        self.next_tsn = initial_tsn
        self.cumulative_tsn_acked = initial_tsn - 1
        self.mtu = config.mtu
        cw = config.initial_cwnd()
        self.paths = [
            PathState(addr, local_addresses[i] if i < len(local_addresses) else local_addresses[0],
                      rto=config.rto_initial, cwnd=cw, ssthresh=config.initial_rwnd)
            for i, addr in enumerate(peer_addresses)
        ]
        self._path_of = {p.address: i for i, p in enumerate(self.paths)}
        self.primary = 0
        self.streams = [StreamState(i) for i in range(config.out_streams)]
        self.pipeline = SendPipeline(config.chunk_size, account)
        self.stats = stats
        self.counters = Counter()
        self.assoc_error_count = 0
        self.peer_rwnd = config.initial_rwnd
        self.peer_out_streams = 1
        self._sent = deque()       # transmitted, not cumulatively acked, TSN order
        self._unsent = deque()
        self.unsent_bytes = 0
        self._total_flight = 0
        self._rtx_pending = 0
        self.in_fast_recovery = False
        self.fast_recovery_exit = None
        self._ctrl_deadline = None   # INIT / COOKIE_ECHO / SHUTDOWN retransmission
        self._ctrl_packet = None
        self._ctrl_retransmits = 0
        self._ctrl_rto = config.rto_initial
        self._shutdown_requested = False
        self.abort_reason = None
        self._out = []
        self._header = wire.CommonHeader(local_port, peer_port, 0)
        self._pumping = False
        self.data_source = None      # callable(assoc, now) topping up the send queue
        self.on_message = None       # callable(assoc, stream_id, bytes, now)
        self.on_state_change = None  # callable(assoc, state, now)
        self.cwnd_trace = None       # list of (now, [cwnd per path]) when enabled
        # receiver side
        self.cum_tsn_in = None
        self._above = set()
        self._frags = {}
        self.in_streams = {}
        self._held_bytes = 0
        self._sack_deadline = None
        self._pkts_since_sack = 0
        self._sack_now = False
        self._sack_path = 0
        self.receiver_account = CopyAccount(account.interval if account else None) \
            if config.receiver_copies else None
        self.established_at = None

    # ------------------------------------------------------------------ misc
    @property
    def rtx_queue(self):
        """Transmitted chunks not yet acknowledged, in TSN order."""
        return [d for d in self._sent if not d.acked]

    @property
    def flight_size(self):
        return self._total_flight

    @property
    def association_records(self):
        return 1

    def path_index(self, address):
        return self._path_of.get(address, 0)

    def _set_state(self, state, now):
        self.state = state
        if state is State.ESTABLISHED and self.established_at is None:
            self.established_at = now
        if self.on_state_change:
            self.on_state_change(self, state, now)

    def drain(self):
        out, self._out = self._out, []
        return out

    def _emit(self, pidx, chunks, is_data=False):
        self._out.append((pidx, wire.Packet(self._header, tuple(chunks)), is_data))

    def _send_path(self):
        p = self.paths[self.primary]
        if p.active:
            return self.primary
        for i, q in enumerate(self.paths):
            if q.active:
                return i
        return self.primary

    def deadlines(self):
        """List ``(key, deadline_ns_or_None)`` for every timer this association uses."""
        out = [(("ctrl",), self._ctrl_deadline), (("sack",), self._sack_deadline)]
        hb = self.config.heartbeat_enabled
        for i, p in enumerate(self.paths):
            out.append((("t3", i), p.t3_deadline))
            if hb:
                out.append((("hb", i), p.hb_due_at))
        return out

    def on_timer(self, key, now):
        kind = key[0]
        if kind == "t3":
            self._on_timeout(key[1], now)
        elif kind == "sack":
            self.on_sack_timer(now)
        elif kind == "ctrl":
            self.on_ctrl_timeout(now)
        elif kind == "hb":
            self._heartbeat_tick(key[1], now)
        return self.drain()

    # ------------------------------------------------------------- handshake
    def start_init(self, now, addresses=()):
        self.state = State.COOKIE_WAIT
        init = wire.InitChunk(self.local_tag, self.initial_tsn & MASK32, self.config.initial_rwnd,
                              self.config.out_streams, tuple(addresses))
        pkt = wire.Packet(wire.CommonHeader(self.local_port, self.peer_port, 0), (init,))
        self._ctrl_packet = pkt
        self._ctrl_retransmits = 0
        self._ctrl_rto = self.config.rto_initial
        self._ctrl_deadline = now + int(round(self._ctrl_rto * NS))
        self._out.append((0, pkt, False))
        return self.drain()

    def on_ctrl_timeout(self, now):
        self._ctrl_deadline = None
        if self._ctrl_packet is None:
            return
        self._ctrl_retransmits += 1
        limit = (self.config.max_init_retransmits
                 if self.state in (State.COOKIE_WAIT, State.COOKIE_ECHOED)
                 else self.config.assoc_max_retrans)
        if self._ctrl_retransmits > limit:
            self._abort(now, "ctrl retransmissions exhausted", notify_peer=False)
            return
        self._ctrl_rto = min(2 * self._ctrl_rto, self.config.rto_max)
        self._ctrl_deadline = now + int(round(self._ctrl_rto * NS))
        self.counters["ctrl_retransmits"] += 1
        self._out.append((self._send_path(), self._ctrl_packet, False))

    def _on_init_ack(self, c, from_path, now):
        if self.state is not State.COOKIE_WAIT:
            self.counters["unexpected_init_ack"] += 1
            return
        self.peer_tag = c.initiate_tag
        self._header = wire.CommonHeader(self.local_port, self.peer_port, self.peer_tag)
        self._set_peer_params(c.initial_tsn, c.rwnd, c.out_streams)
        pkt = wire.Packet(self._header, (wire.CookieEchoChunk(c.cookie),))
        self._ctrl_packet = pkt
        self._ctrl_retransmits = 0
        self._ctrl_deadline = now + int(round(self._ctrl_rto * NS))
        self.state = State.COOKIE_ECHOED
        self._out.append((from_path, pkt, False))

    def _set_peer_params(self, peer_initial_tsn, peer_rwnd, peer_out_streams):
        self.cum_tsn_in = peer_initial_tsn - 1
        self.peer_rwnd = peer_rwnd
        self.peer_out_streams = peer_out_streams
        for p in self.paths:
            p.ssthresh = peer_rwnd

    def _on_cookie_ack(self, now):
        if self.state is not State.COOKIE_ECHOED:
            return
        self._ctrl_packet = None
        self._ctrl_deadline = None
        self._enter_established(now)

    def _enter_established(self, now):
        self._set_state(State.ESTABLISHED, now)
        if self.config.heartbeat_enabled:
            iv = int(round(self.config.hb_interval * NS))
            for p in self.paths:
                p.hb_due_at = now + iv
                p.last_sent_at = now
        self._transmit(now)

    # --------------------------------------------------------------- inbound
    def handle_packet(self, packet, from_path, now):
        """Process every chunk of a tag-verified packet; return emissions."""
        had_data = False
        acct = self.receiver_account
        for c in packet.chunks:
            if c.kind is wire.ChunkKind.DATA:
                had_data = True
                self._on_data(c, from_path, now)
            else:
                self._handle_chunk(c, from_path, now)
            if self.state is State.CLOSED_FINAL:
                break
        if had_data and self.state is not State.CLOSED_FINAL:
            if acct is not None:
                size = wire.packet_size(packet.chunks)
                acct.record(CopyStage.NIC_DMA, size, now)
                acct.record(CopyStage.BUNDLE_TO_NIC, size, now)
            self._after_data(from_path, now)
        return self.drain()

    def _handle_chunk(self, c, from_path, now):
        k = c.kind
        if k is wire.ChunkKind.SACK:
            if self.state in (State.ESTABLISHED, State.SHUTDOWN_PENDING):
                self._on_sack(c, now)
        elif k is wire.ChunkKind.DATA:
            self._on_data(c, from_path, now)
            self._after_data(from_path, now)
        elif k is wire.ChunkKind.INIT_ACK:
            self._on_init_ack(c, from_path, now)
        elif k is wire.ChunkKind.COOKIE_ACK:
            self._on_cookie_ack(now)
        elif k is wire.ChunkKind.HEARTBEAT:
            self._emit(from_path, [wire.HeartbeatAckChunk(c.info)])
        elif k is wire.ChunkKind.HEARTBEAT_ACK:
            self._on_heartbeat_ack(c, now)
        elif k is wire.ChunkKind.ABORT:
            self._abort(now, f"peer abort (cause {c.cause})", notify_peer=False)
        elif k is wire.ChunkKind.SHUTDOWN:
            self._on_shutdown(c, from_path, now)
        elif k is wire.ChunkKind.COOKIE_ECHO:
            # duplicate echo after establishment; the endpoint re-acks
            self._emit(from_path, [wire.CookieAckChunk()])

    # ------------------------------------------------------------ receiving
    def _on_data(self, c, from_path, now):
        if self.cum_tsn_in is None:
            self.counters["data_before_setup"] += 1
            return
        self._sack_path = from_path
        tsn = unwrap(c.tsn, self.cum_tsn_in, 32)
        if tsn <= self.cum_tsn_in or tsn in self._above:
            self.counters["duplicate_tsns"] += 1
            self._sack_now = True
            return
        if tsn == self.cum_tsn_in + 1:
            cum = tsn
            above = self._above
            while cum + 1 in above:
                cum += 1
                above.discard(cum)
            self.cum_tsn_in = cum
            if above:
                self._sack_now = True
        else:
            self._above.add(tsn)
            self._sack_now = True
        if c.fragment_begin and c.fragment_end:
            self._complete(c.stream_id, c.ssn, c.ordered, c.user_bytes, now)
            return
        frags = self._frags
        frags[tsn] = c
        self._held_bytes += len(c.user_bytes)
        start = tsn
        while not frags[start].fragment_begin:
            start -= 1
            if start not in frags:
                return
        end = tsn
        while not frags[end].fragment_end:
            end += 1
            if end not in frags:
                return
        pieces = [frags.pop(t) for t in range(start, end + 1)]
        data = reassemble(pieces)
        self._held_bytes -= len(data)
        self._complete(c.stream_id, c.ssn, c.ordered, data, now)

    def _complete(self, sid, wire_ssn, ordered, data, now):
        st = self.in_streams.get(sid)
        if st is None:
            st = self.in_streams[sid] = StreamState(sid)
        if not ordered:
            st.unordered_ready.append(data)
        else:
            ssn = unwrap(wire_ssn, st.next_ssn_expect_in, 16)
            if ssn < st.next_ssn_expect_in or ssn in st.reorder_buffer:
                self.counters["duplicate_ssns"] += 1
                return
            st.reorder_buffer[ssn] = data
        self._held_bytes += len(data)
        if self.on_message is not None:
            for msg in self.deliver(sid):
                self.on_message(self, sid, msg, now)
                if self.receiver_account is not None:
                    self.receiver_account.record(CopyStage.USER_TO_MESSAGE, len(msg), now)

    def deliver(self, stream_id):
        """Pop every message of ``stream_id`` that may be handed to the application."""
        st = self.in_streams.get(stream_id)
        if st is None:
            return []
        out = st.unordered_ready
        st.unordered_ready = []
        buf = st.reorder_buffer
        nxt = st.next_ssn_expect_in
        while nxt in buf:
            out.append(buf.pop(nxt))
            nxt += 1
        st.next_ssn_expect_in = nxt
        for m in out:
            self._held_bytes -= len(m)
        return out

    def _after_data(self, from_path, now):
        self._pkts_since_sack += 1
        if self._sack_now or self._pkts_since_sack >= self.config.sack_every:
            self._send_sack(now)
        elif self._sack_deadline is None:
            self._sack_deadline = now + int(round(self.config.sack_delay * NS))

    def on_sack_timer(self, now):
        self._sack_deadline = None
        if self._pkts_since_sack:
            self._send_sack(now)

    def build_sack(self):
        cum = self.cum_tsn_in
        gaps = ()
        if self._above:
            blocks = []
            run_start = prev = None
            for t in sorted(self._above):
                if prev is not None and t == prev + 1:
                    prev = t
                    continue
                if run_start is not None:
                    blocks.append((run_start - cum, prev - cum))
                run_start = prev = t
            blocks.append((run_start - cum, prev - cum))
            gaps = tuple(blocks)
        rwnd = max(0, self.config.initial_rwnd - self._held_bytes)
        return wire.SackChunk(cum & MASK32, rwnd, gaps)

    def _send_sack(self, now):
        self._sack_deadline = None
        self._pkts_since_sack = 0
        self._sack_now = False
        self._emit(self._sack_path, [self.build_sack()])

    # -------------------------------------------------------------- sending
    def send_message(self, stream_id, payload, ordered=True, now=0):
        """Queue a user message on ``stream_id``.

        Packets it triggers stay in the outbox until the owner drains it.
        """
        if self.state is not State.ESTABLISHED:
            raise NotEstablished(f"association is {self.state.value}")
        if not 0 <= stream_id < len(self.streams):
            raise BadStream(f"stream {stream_id} outside 0..{len(self.streams) - 1}")
        st = self.streams[stream_id]
        ssn = st.next_ssn_out if ordered else 0
        msg = self.pipeline.fragment(payload, stream_id, ssn, ordered, now=now)
        if ordered:
            st.next_ssn_out += 1
        self.next_tsn = self.pipeline.assign_tsns(msg, self.next_tsn)
        self._unsent.extend(msg.chunk_list)
        self.unsent_bytes += msg.nbytes
        if not self._pumping:
            self._transmit(now)
        return msg

    def send_window(self):
        """Bytes the primary path could still put in flight right now."""
        p = self.paths[self._send_path()]
        return max(0, min(p.cwnd - p.flight_size, self.peer_rwnd))

    def _transmit(self, now):
        if self.state is not State.ESTABLISHED and self.state is not State.SHUTDOWN_PENDING:
            return
        if self.data_source is not None and not self._pumping and not self._shutdown_requested:
            self._pumping = True
            try:
                self.data_source(self, now)
            finally:
                self._pumping = False
        pidx = self._send_path()
        path = self.paths[pidx]
        room = self.mtu - wire.COMMON_HEADER_LEN
        while self._rtx_pending and path.flight_size < path.cwnd:
            batch = self._collect_rtx(room)
            if not batch:
                break
            self._send_batch(batch, pidx, now)
        unsent = self._unsent
        while unsent and path.flight_size < path.cwnd and (self.peer_rwnd > 0 or self._total_flight == 0):
            batch = []
            left = room
            rwnd = self.peer_rwnd
            while unsent:
                d = unsent[0]
                sz = (wire.DATA_HEADER_LEN + d.nbytes + 3) & ~3
                if sz > left:
                    break
                if d.nbytes > rwnd and (batch or self._total_flight > 0):
                    break
                batch.append(unsent.popleft())
                left -= sz
                rwnd -= d.nbytes
            if not batch:
                break
            for d in batch:
                self.unsent_bytes -= d.nbytes
            self._sent.extend(batch)
            self._send_batch(batch, pidx, now)
        if self._shutdown_requested and self.state is State.SHUTDOWN_PENDING:
            self._maybe_send_shutdown(now)

    def _collect_rtx(self, room):
        batch = []
        for d in self._sent:
            if d.needs_rtx:
                sz = (wire.DATA_HEADER_LEN + d.nbytes + 3) & ~3
                if sz > room:
                    break
                batch.append(d)
                room -= sz
        return batch

    def _send_batch(self, batch, pidx, now):
        path = self.paths[pidx]
        pipe = self.pipeline
        packets = pipe.stage_for_transmit(batch, self.mtu, self._header, now)
        pipe.dma_transmit(packets, now, pipe.staged_bytes)
        paths = self.paths
        for d in batch:
            if d.needs_rtx:
                d.needs_rtx = False
                self._rtx_pending -= 1
                old = paths[d.path]
                if old.rtt_probe is d:
                    old.rtt_probe = None
                self.counters["retransmitted_chunks"] += 1
            d.path = pidx
            d.in_flight = True
            path.flight_size += d.nbytes
            self._total_flight += d.nbytes
            self.peer_rwnd = max(0, self.peer_rwnd - d.nbytes)
            if d.transmit_count == 1 and path.rtt_probe is None:
                path.rtt_probe = d
        path.last_sent_at = now
        if path.t3_deadline is None:
            path.t3_deadline = now + int(round(path.rto * NS))
        for p in packets:
            self._out.append((pidx, p, True))

    # ---------------------------------------------------------------- acks
    def _on_sack(self, sack, now):
        cum = unwrap(sack.cumulative_tsn_ack, self.cumulative_tsn_acked, 32)
        highest_sent = self._sent[-1].tsn if self._sent else self.cumulative_tsn_acked
        if cum < self.cumulative_tsn_acked or cum > highest_sent:
            self.counters["stale_sacks"] += 1
            return
        acked = {}
        sent = self._sent
        new_cum = cum > self.cumulative_tsn_acked
        while sent and sent[0].tsn <= cum:
            d = sent.popleft()
            if not d.acked:
                self._ack(d, now, acked)
        self.cumulative_tsn_acked = cum
        highest_gap = None
        if sack.gap_blocks and sent:
            base = sent[0].tsn
            n = len(sent)
            for s, e in sack.gap_blocks:
                for tsn in range(cum + s, cum + e + 1):
                    i = tsn - base
                    if 0 <= i < n:
                        d = sent[i]
                        if not d.acked:
                            self._ack(d, now, acked)
                if highest_gap is None or cum + e > highest_gap:
                    highest_gap = cum + e
        self.peer_rwnd = max(0, sack.advertised_rwnd - self._total_flight)
        if self.in_fast_recovery and cum >= self.fast_recovery_exit:
            self.in_fast_recovery = False
        mtu = self.mtu
        if new_cum and not self.in_fast_recovery:
            for pidx, nbytes in acked.items():
                p = self.paths[pidx]
                if p.cwnd <= p.ssthresh:
                    p.cwnd += min(nbytes, mtu)
                else:
                    p.partial_bytes_acked += nbytes
                    if p.partial_bytes_acked >= p.cwnd:
                        p.partial_bytes_acked -= p.cwnd
                        p.cwnd += mtu
        if acked:
            self.assoc_error_count = 0
        for pidx in acked:
            p = self.paths[pidx]
            p.error_count = 0
        for p in self.paths:
            if p.flight_size == 0:
                p.t3_deadline = None
        for pidx in acked:
            p = self.paths[pidx]
            if p.flight_size > 0:
                p.t3_deadline = now + int(round(p.rto * NS))
        if highest_gap is not None:
            self._miss_indications(highest_gap, now)
        if self.cwnd_trace is not None:
            self.cwnd_trace.append((now, [p.cwnd for p in self.paths]))
        self._transmit(now)

    def _ack(self, d, now, acked):
        d.acked = True
        p = self.paths[d.path]
        if d.in_flight:
            d.in_flight = False
            p.flight_size -= d.nbytes
            self._total_flight -= d.nbytes
        elif d.needs_rtx:
            d.needs_rtx = False
            self._rtx_pending -= 1
        acked[d.path] = acked.get(d.path, 0) + d.nbytes
        if p.rtt_probe is d:
            p.rtt_probe = None
            if d.transmit_count == 1:
                update_rto(p, (now - d.first_sent_at) / NS, self.config)
        if self.stats is not None:
            self.stats.segment_acked(d.first_sent_at, d.transmit_count, d.nbytes, now, p.srtt)
        self.pipeline.release_acked(d.message, d)

    def _miss_indications(self, highest_gap, now):
        marked = []
        for d in self._sent:
            if d.tsn >= highest_gap:
                break
            if d.acked or not d.in_flight:
                continue
            d.miss_count += 1
            if d.miss_count == FAST_RTX_THRESHOLD and not d.fast_retransmitted:
                d.fast_retransmitted = True
                d.in_flight = False
                p = self.paths[d.path]
                p.flight_size -= d.nbytes
                self._total_flight -= d.nbytes
                d.needs_rtx = True
                self._rtx_pending += 1
                marked.append(d)
        if not marked:
            return
        self.counters["fast_retransmits"] += 1
        if not self.in_fast_recovery:
            for pidx in sorted({d.path for d in marked}):
                p = self.paths[pidx]
                p.ssthresh = max(p.cwnd // 2, 2 * self.mtu)
                p.cwnd = p.ssthresh
                p.partial_bytes_acked = 0
            self.in_fast_recovery = True
            self.fast_recovery_exit = self._sent[-1].tsn
        # one packet of fast retransmissions goes out regardless of cwnd
        batch = self._collect_rtx(self.mtu - wire.COMMON_HEADER_LEN)
        if batch:
            self._send_batch(batch, self._send_path(), now)

    # ------------------------------------------------------------- timeouts
    def _on_timeout(self, pidx, now):
        p = self.paths[pidx]
        p.t3_deadline = None
        outstanding = [d for d in self._sent if d.in_flight and d.path == pidx]
        if not outstanding:
            return
        cfg = self.config
        p.rto = min(2 * p.rto, cfg.rto_max)
        p.ssthresh = max(p.cwnd // 2, 2 * self.mtu)
        p.cwnd = self.mtu
        p.partial_bytes_acked = 0
        p.rtt_probe = None
        self.counters["timeouts"] += 1
        self._path_error(pidx, now)
        self.assoc_error_count += 1
        if self.assoc_error_count > cfg.assoc_max_retrans:
            self._abort(now, "association error threshold exceeded")
            return
        for d in outstanding:
            d.in_flight = False
            p.flight_size -= d.nbytes
            self._total_flight -= d.nbytes
            d.needs_rtx = True
            self._rtx_pending += 1
        self.in_fast_recovery = False
        if self.cwnd_trace is not None:
            self.cwnd_trace.append((now, [q.cwnd for q in self.paths]))
        batch = self._collect_rtx(self.mtu - wire.COMMON_HEADER_LEN)
        if batch:
            self._send_batch(batch, self._send_path(), now)
        self._transmit(now)

    def _path_error(self, pidx, now):
        p = self.paths[pidx]
        p.error_count += 1
        if p.active and p.error_count > self.config.path_max_retrans:
            p.active = False
            self.counters["path_failures"] += 1
            if pidx == self.primary:
                for i, q in enumerate(self.paths):
                    if q.active:
                        self.primary = i
                        break

    # ------------------------------------------------------------ heartbeat
    def _heartbeat_tick(self, pidx, now):
        p = self.paths[pidx]
        iv = int(round(self.config.hb_interval * NS))
        if self.state is not State.ESTABLISHED:
            p.hb_due_at = None
            return
        if p.hb_outstanding:
            self._path_error(pidx, now)
            p.hb_outstanding = False
        elif p.active and now - p.last_sent_at < iv:
            p.hb_due_at = p.last_sent_at + iv
            return
        info = struct.pack("!HQ", pidx, now)
        self._emit(pidx, [wire.HeartbeatChunk(info)])
        p.hb_outstanding = True
        p.hb_due_at = now + iv
        self.counters["heartbeats"] += 1

    def _on_heartbeat_ack(self, c, now):
        if len(c.info) != 10:
            return
        pidx, sent = struct.unpack("!HQ", c.info)
        if pidx >= len(self.paths) or sent > now:
            return
        p = self.paths[pidx]
        if now > sent:
            update_rto(p, (now - sent) / NS, self.config)
        p.error_count = 0
        p.hb_outstanding = False
        if not p.active:
            p.active = True
            self.counters["path_restored"] += 1
            if not self.paths[self.primary].active:
                self.primary = pidx

    # public entry points; each returns the emissions it produced
    def handle_chunk(self, c, from_path, now):
        """Process one chunk of a tag-verified packet."""
        self._handle_chunk(c, from_path, now)
        return self.drain()

    def on_sack(self, sack, now):
        """Apply a SACK: release acked chunks, grow or cut cwnd, fast retransmit."""
        self._on_sack(sack, now)
        return self.drain()

    def on_timeout(self, pidx, now):
        """Retransmission timer expiry on path ``pidx``."""
        self._on_timeout(pidx, now)
        return self.drain()

    def heartbeat_tick(self, pidx, now):
        """Heartbeat timer for path ``pidx``: probe it if idle."""
        self._heartbeat_tick(pidx, now)
        return self.drain()

    # ------------------------------------------------------ close and abort
    def shutdown(self, now):
        """Graceful close: SHUTDOWN once all queued data is acknowledged."""
        if self.state is not State.ESTABLISHED:
            raise NotEstablished(f"association is {self.state.value}")
        self._shutdown_requested = True
        self.state = State.SHUTDOWN_PENDING
        self._maybe_send_shutdown(now)
        return self.drain()

    def _maybe_send_shutdown(self, now):
        if self._unsent or self._sent or self._ctrl_packet is not None:
            return
        pkt = wire.Packet(self._header, (wire.ShutdownChunk(self.cum_tsn_in & MASK32),))
        self._ctrl_packet = pkt
        self._ctrl_retransmits = 0
        self._ctrl_rto = self.paths[self._send_path()].rto
        self._ctrl_deadline = now + int(round(self._ctrl_rto * NS))
        self._out.append((self._send_path(), pkt, False))

    def _on_shutdown(self, c, from_path, now):
        if c.is_ack:
            if self._shutdown_requested:
                self._close(now)
            return
        self._emit(from_path, [wire.ShutdownChunk(self.cum_tsn_in & MASK32, wire.FLAG_SHUTDOWN_ACK)])
        self._close(now)

    def _close(self, now):
        self._ctrl_packet = None
        self._ctrl_deadline = None
        self._sack_deadline = None
        for p in self.paths:
            p.t3_deadline = None
            p.hb_due_at = None
        self._set_state(State.CLOSED_FINAL, now)

    def _abort(self, now, reason, notify_peer=True):
        self.abort_reason = reason
        if notify_peer and self.peer_tag:
            self._emit(self._send_path(), [wire.AbortChunk(wire.CAUSE_USER_ABORT)])
        self._close(now)


# ---------------------------------------------------------------- cookies
_COOKIE_FIXED = struct.Struct("!QIIIIIHHH")
_MAC_LEN = 16


@dataclass(frozen=True)
class CookieContents:
    created_at: int
    local_tag: int
    peer_tag: int
    local_initial_tsn: int
    peer_initial_tsn: int
    peer_rwnd: int
    peer_out_streams: int
    peer_port: int
    peer_addresses: tuple


def make_cookie(key, contents):
    body = _COOKIE_FIXED.pack(contents.created_at, contents.local_tag, contents.peer_tag,
                              contents.local_initial_tsn, contents.peer_initial_tsn,
                              contents.peer_rwnd, contents.peer_out_streams, contents.peer_port,
                              len(contents.peer_addresses))
    body += struct.pack(f"!{len(contents.peer_addresses)}I", *contents.peer_addresses)
    return body + hmac.new(key, body, hashlib.sha256).digest()[:_MAC_LEN]


def open_cookie(key, cookie, now, valid_life):
    """Verify and unpack a cookie; raise BadCookieSignature or StaleCookie."""
    if len(cookie) < _COOKIE_FIXED.size + _MAC_LEN:
        raise BadCookieSignature("cookie too short")
    body, mac = cookie[:-_MAC_LEN], cookie[-_MAC_LEN:]
    if not hmac.compare_digest(mac, hmac.new(key, body, hashlib.sha256).digest()[:_MAC_LEN]):
        raise BadCookieSignature("cookie signature mismatch")
    fields = _COOKIE_FIXED.unpack_from(body)
    n = fields[-1]
    addrs = struct.unpack_from(f"!{n}I", body, _COOKIE_FIXED.size)
    c = CookieContents(*fields[:-1], peer_addresses=tuple(addrs))
    age = now - c.created_at
    if age > int(round(valid_life * NS)):
        raise StaleCookie(f"cookie is {age / NS:.3f} s old (life {valid_life} s)")
    return c


# ---------------------------------------------------------------- endpoint
class SctpEndpoint:
    """A (possibly multi-homed) SCTP endpoint bound to one port.

    Packets to send accumulate in ``outbox`` as :class:`Emission` tuples;
    :meth:`receive` and :meth:`on_timer` return them drained.
    """

    def __init__(self, addresses, port, config=None, rng=None, listening=True,
                 account_interval=None):
        import numpy as np
        self.addresses = list(addresses)
        self.port = port
        self.config = config or AssocConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.secret = self.rng.bytes(32)
        self.listening = listening
        self.account_interval = account_interval
        self.associations = {}       # (peer address, peer port) -> Association
        self._by_id = {}
        self.stats = Counter()
        self.outbox = []
        self._dirty = {}
        self._keys = {}
        self.on_association = None   # callable(assoc) for associations created by COOKIE_ECHO

    # tags are never 0
    def _rand32(self, nonzero=False):
        lo = 1 if nonzero else 0
        return int(self.rng.integers(lo, 1 << 32))

    def _register(self, assoc):
        for p in assoc.paths:
            self.associations[(p.address, assoc.peer_port)] = assoc
        self._by_id[assoc.id] = assoc

    def _forget(self, assoc):
        self._keys.pop(assoc, None)
        for p in assoc.paths:
            if self.associations.get((p.address, assoc.peer_port)) is assoc:
                del self.associations[(p.address, assoc.peer_port)]
        self._by_id.pop(assoc.id, None)

    @property
    def association_count(self):
        return len(self._by_id)

    def _new_assoc(self, peer_addresses, peer_port, local_tag, initial_tsn):
        acct = CopyAccount(self.account_interval)
        return Association(self.config, self.port, peer_port, self.addresses, list(peer_addresses),
                           local_tag, initial_tsn, account=acct)

    def connect(self, peer_addresses, peer_port, now=0):
        """Start the four-way handshake; the INIT is left in ``outbox``."""
        if not peer_addresses:
            raise NoAddresses("initiate needs at least one peer address")
        assoc = self._new_assoc(peer_addresses, peer_port, self._rand32(True), self._rand32())
        self._register(assoc)
        self._flush(assoc, assoc.start_init(now, self.addresses))
        return assoc

    def _flush(self, assoc, emissions):
        self._dirty[assoc] = None
        for pidx, pkt, is_data in emissions:
            p = assoc.paths[pidx]
            self.outbox.append(Emission(p.local_address, p.address, assoc.peer_port, pkt, is_data))
        if assoc.state is State.CLOSED_FINAL:
            self._forget(assoc)

    def drain(self):
        out, self.outbox = self.outbox, []
        return out

    def receive(self, packet, src, dst, now):
        """Demultiplex a packet that arrived at local address ``dst`` from ``src``."""
        chunks = packet.chunks
        if not chunks:
            return self.drain()
        if packet.header.dst_port != self.port:
            self.stats["wrong_port"] += 1
            return self.drain()
        peer_port = packet.header.src_port
        first = chunks[0].kind
        if first is wire.ChunkKind.INIT:
            if not wire.verify_tag(packet, 0, self.stats) or len(chunks) != 1:
                return self.drain()
            if not self.listening or (src, peer_port) in self.associations:
                self.stats["init_ignored"] += 1
                return self.drain()
            self._answer_init(chunks[0], src, dst, peer_port, now)
            return self.drain()
        if first is wire.ChunkKind.COOKIE_ECHO and (src, peer_port) not in self.associations:
            self._cookie_echo(packet, src, dst, peer_port, now)
            return self.drain()
        assoc = self.associations.get((src, peer_port))
        if assoc is None:
            self.stats["out_of_the_blue"] += 1
            return self.drain()
        if not wire.verify_tag(packet, assoc.local_tag, self.stats):
            return self.drain()
        self._flush(assoc, assoc.handle_packet(packet, assoc.path_index(src), now))
        return self.drain()

    def _answer_init(self, init, src, dst, peer_port, now):
        local_tag = self._rand32(True)
        local_itsn = self._rand32()
        addrs = tuple(init.addresses) or (src,)
        contents = CookieContents(now, local_tag, init.initiate_tag, local_itsn, init.initial_tsn,
                                  init.rwnd, init.out_streams, peer_port, addrs)
        ack = wire.InitAckChunk(local_tag, local_itsn, self.config.initial_rwnd,
                                self.config.out_streams, tuple(self.addresses),
                                make_cookie(self.secret, contents))
        pkt = wire.Packet(wire.CommonHeader(self.port, peer_port, init.initiate_tag), (ack,))
        self.stats["init_acks"] += 1
        self.outbox.append(Emission(dst, src, peer_port, pkt))

    def _cookie_echo(self, packet, src, dst, peer_port, now):
        try:
            c = open_cookie(self.secret, packet.chunks[0].cookie, now, self.config.valid_cookie_life)
        except BadCookieSignature:
            self.stats["bad_cookies"] += 1
            return
        except StaleCookie:
            self.stats["stale_cookies"] += 1
            tag = _COOKIE_FIXED.unpack_from(packet.chunks[0].cookie)[2]
            pkt = wire.Packet(wire.CommonHeader(self.port, peer_port, tag),
                              (wire.AbortChunk(wire.CAUSE_STALE_COOKIE),))
            self.outbox.append(Emission(dst, src, peer_port, pkt))
            return
        if not wire.verify_tag(packet, c.local_tag, self.stats):
            return
        peers = list(c.peer_addresses)
        assoc = self._new_assoc(peers, peer_port, c.local_tag, c.local_initial_tsn)
        if src in peers:
            # answer on the path the echo came from
            assoc.primary = peers.index(src)
        assoc.peer_tag = c.peer_tag
        assoc._header = wire.CommonHeader(self.port, peer_port, c.peer_tag)
        assoc._set_peer_params(c.peer_initial_tsn, c.peer_rwnd, c.peer_out_streams)
        self._register(assoc)
        if self.on_association is not None:
            self.on_association(assoc)
        assoc._emit(assoc.primary, [wire.CookieAckChunk()])
        assoc._enter_established(now)
        self._flush(assoc, assoc.drain())

    def on_timer(self, key, now):
        assoc = self._by_id.get(key[0])
        if assoc is not None:
            self._flush(assoc, assoc.on_timer(key[1:], now))
        return self.drain()

    def deadlines(self):
        for aid, assoc in self._by_id.items():
            for key, dl in assoc.deadlines():
                yield (aid,) + key, dl

    def touched_deadlines(self):
        """Deadlines of associations touched since the previous call only."""
        dirty, self._dirty = self._dirty, {}
        out = []
        keys = self._keys
        for assoc in dirty:
            dls = assoc.deadlines()
            ks = keys.get(assoc)
            if ks is None or len(ks) != len(dls):
                ks = keys[assoc] = [(assoc.id,) + k for k, _ in dls]
            out.extend(zip(ks, [d for _, d in dls]))
        return out

    def send(self, assoc, stream_id, payload, ordered=True, now=0):
        assoc.send_message(stream_id, payload, ordered, now)
        self._flush(assoc, assoc.drain())
        return self.drain()

    def kick(self, assoc, now):
        """Let an association pull from its data source and transmit."""
        assoc._transmit(now)
        self._flush(assoc, assoc.drain())
        return self.drain()

    def shutdown(self, assoc, now):
        self._flush(assoc, assoc.shutdown(now))
        return self.drain()
