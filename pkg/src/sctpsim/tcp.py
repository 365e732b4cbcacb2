"""Minimal TCP Reno baseline: one ordered byte stream per connection.

Mirrors the SCTP side's shape: a :class:`TcpEndpoint` demultiplexes
segments to :class:`TcpConnection` objects, which leave emissions in an
outbox and expose their timer deadlines.
"""

from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from itertools import count

from .errors import NotEstablished
from .pipeline import CopyAccount, CopyStage
from .rtt import rto_step
from .sctp import Emission
from .seqnum import MASK32, unwrap

NS = 1_000_000_000
TCP_IP_HEADER = 40
TCP_HEADER = 20
SYN, ACK, FIN = 0x02, 0x10, 0x01


class TcpState(Enum):
    CLOSED = "CLOSED"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    CLOSING = "CLOSING"


@dataclass
class TcpConfig:
    mss: int = 1460
    rto_initial: float = 4.0
    rto_min: float = 1.0
    rto_max: float = 60.0
    rto_alpha: float = 0.125
    rto_beta: float = 0.25
    max_init_retransmits: int = 9
    max_retrans: int = 10
    initial_cwnd: int = None   # bytes; None means min(4*MSS, max(2*MSS, 4380))
    initial_ssthresh: int = 65536
    rwnd: int = 65536
    delayed_ack: bool = False
    ack_delay: float = 0.2

    def cwnd0(self):
        if self.initial_cwnd is not None:
            return self.initial_cwnd
        return min(4 * self.mss, max(2 * self.mss, 4380))


@dataclass(frozen=True, slots=True)
class TcpSegment:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    window: int
    data: bytes = b""

    @property
    def size(self):
        """Transport bytes: TCP header plus payload (no IP header)."""
        return TCP_HEADER + len(self.data)


_conn_ids = count()


class TcpConnection:
    def __init__(self, config, local_addr, local_port, peer_addr, peer_port, iss,
                 account=None, stats=None):
        self.id = next(_conn_ids)
        self.config = config
        self.local_addr, self.local_port = local_addr, local_port
        self.peer_addr, self.peer_port = peer_addr, peer_port
        self.state = TcpState.CLOSED
        self.iss = iss
        # unbounded sequence numbers; masked on the wire
        self.snd_una = iss
        self.snd_nxt = iss
        self.snd_max = iss
        self.rcv_nxt = None
        self.mss = config.mss
        self.cwnd = config.cwnd0()
        self.ssthresh = config.initial_ssthresh
        self.srtt = None
        self.rttvar = None
        self.rto = config.rto_initial
        self.dup_ack_count = 0
        self.in_recovery = False
        self.peer_wnd = config.rwnd
        self.send_buffer = bytearray()   # bytes from snd_una onward (after the SYN)
        self._buf_base = iss + 1
        self._segs = deque()             # [start, end, first_sent_at, transmit_count]
        self._rtx_next = 0               # go-back-N cursor into _segs
        self.reorder_buffer = {}
        self._ooo_bytes = 0
        self.t_deadline = None
        self._ack_deadline = None
        self._unacked_segments = 0
        self._probe = None               # (end_seq, sent_at)
        self._ctrl_retransmits = 0
        self.error_count = 0
        self.account = account if account is not None else CopyAccount()
        self.stats = stats
        self.counters = Counter()
        self._out = []
        self._close_requested = False
        self.fin_sent = False
        self.on_data = None             # callable(conn, bytes, now)
        self.on_state_change = None
        self.data_source = None         # callable(conn, now) topping up the send buffer
        self._pumping = False
        self.cwnd_trace = None          # list of (now, cwnd, ssthresh) when enabled
        self.established_at = None

    # ---------------------------------------------------------------- utils
    @property
    def flight_size(self):
        return self.snd_nxt - self.snd_una

    @property
    def unsent_bytes(self):
        return self._buf_base + len(self.send_buffer) - self.snd_max

    def _set_state(self, state, now):
        self.state = state
        if state is TcpState.ESTABLISHED and self.established_at is None:
            self.established_at = now
        if self.on_state_change:
            self.on_state_change(self, state, now)

    def drain(self):
        out, self._out = self._out, []
        return out

    def _seg(self, seq, flags, data=b""):
        ack = self.rcv_nxt & MASK32 if self.rcv_nxt is not None else 0
        wnd = max(0, self.config.rwnd - self._ooo_bytes)
        seg = TcpSegment(self.local_port, self.peer_port, seq & MASK32, ack, flags, wnd, data)
        self._out.append(Emission(self.local_addr, self.peer_addr, self.peer_port, seg, bool(data)))
        return seg

    def _arm(self, now):
        self.t_deadline = now + int(round(self.rto * NS))

    def _trace(self, now):
        if self.cwnd_trace is not None:
            self.cwnd_trace.append((now, self.cwnd, self.ssthresh))

    def deadlines(self):
        yield ("rtx",), self.t_deadline
        yield ("ack",), self._ack_deadline

    def on_timer(self, key, now):
        if key[0] == "rtx":
            self.t_deadline = None
            if self.state in (TcpState.SYN_SENT, TcpState.SYN_RCVD):
                self._handshake_timeout(now)
            else:
                tcp_on_timeout(self, now)
        elif key[0] == "ack":
            self._ack_deadline = None
            if self._unacked_segments:
                self._send_ack()
        return self.drain()

    # ------------------------------------------------------------ handshake
    def open_active(self, now):
        self.state = TcpState.SYN_SENT
        self._seg(self.iss, SYN)
        self.snd_nxt = self.snd_max = self.iss + 1
        self._arm(now)

    def _handshake_timeout(self, now):
        self._ctrl_retransmits += 1
        if self._ctrl_retransmits > self.config.max_init_retransmits:
            self._set_state(TcpState.CLOSED, now)
            return
        self.rto = min(2 * self.rto, self.config.rto_max)
        self.counters["syn_retransmits"] += 1
        self._seg(self.iss, SYN if self.state is TcpState.SYN_SENT else SYN | ACK)
        self._arm(now)

    def _accept_syn(self, seg, now):
        self.rcv_nxt = seg.seq + 1
        self.state = TcpState.SYN_RCVD
        self._seg(self.iss, SYN | ACK)
        self.snd_nxt = self.snd_max = self.iss + 1
        self._arm(now)

    # -------------------------------------------------------------- inbound
    def handle_segment(self, seg, now):
        st = self.state
        if st is TcpState.SYN_SENT:
            if seg.flags & SYN and seg.flags & ACK and seg.ack == (self.iss + 1) & MASK32:
                self.rcv_nxt = seg.seq + 1
                self.snd_una = self.iss + 1
                self.peer_wnd = seg.window
                self.t_deadline = None
                self.rto = self.config.rto_initial
                self._seg(self.snd_nxt, ACK)
                self._set_state(TcpState.ESTABLISHED, now)
                self._send_more(now)
            return self.drain()
        if seg.flags & SYN:
            # our SYN-ACK or final ACK was lost; repeat it
            if st is TcpState.SYN_RCVD:
                self._seg(self.iss, SYN | ACK)
            elif seg.flags & ACK:
                self._seg(self.snd_nxt, ACK)
            return self.drain()
        if st is TcpState.SYN_RCVD:
            if not seg.flags & ACK or unwrap(seg.ack, self.snd_una, 32) != self.iss + 1:
                return self.drain()
            self.snd_una = self.iss + 1
            self.t_deadline = None
            self.rto = self.config.rto_initial
            self._set_state(TcpState.ESTABLISHED, now)
        if seg.data:
            self._on_data(seg, now)
        if seg.flags & FIN:
            self._on_fin(seg, now)
        if seg.flags & ACK:
            tcp_on_ack(self, unwrap(seg.ack, self.snd_una, 32), now, seg.window, bool(seg.data))
        return self.drain()

    def _on_data(self, seg, now):
        seq = unwrap(seg.seq, self.rcv_nxt, 32)
        n = len(seg.data)
        if seq + n <= self.rcv_nxt:
            self.counters["duplicate_segments"] += 1
            self._send_ack()
            return
        if seq > self.rcv_nxt:
            if seq not in self.reorder_buffer:
                self.reorder_buffer[seq] = seg.data
                self._ooo_bytes += n
            self._send_ack()
            return
        data = seg.data[self.rcv_nxt - seq:]
        self.rcv_nxt += len(data)
        chunks = [data]
        buf = self.reorder_buffer
        while buf:
            hit = None
            for s in buf:
                if s <= self.rcv_nxt:
                    hit = s
                    break
            if hit is None:
                break
            d = buf.pop(hit)
            self._ooo_bytes -= len(d)
            if hit + len(d) > self.rcv_nxt:
                d = d[self.rcv_nxt - hit:]
                chunks.append(d)
                self.rcv_nxt += len(d)
        out_of_order_left = bool(buf)
        if self.on_data is not None:
            self.on_data(self, chunks[0] if len(chunks) == 1 else b"".join(chunks), now)
        if not self.config.delayed_ack or out_of_order_left or len(chunks) > 1:
            self._send_ack()
        else:
            self._unacked_segments += 1
            if self._unacked_segments >= 2:
                self._send_ack()
            elif self._ack_deadline is None:
                self._ack_deadline = now + int(round(self.config.ack_delay * NS))

    def _send_ack(self):
        self._unacked_segments = 0
        self._ack_deadline = None
        self._seg(self.snd_nxt, ACK)

    def _on_fin(self, seg, now):
        # no half-close: the receiving side acknowledges and is done
        self.rcv_nxt += 1
        self._seg(self.snd_nxt, ACK)
        self._set_state(TcpState.CLOSED, now)

    # -------------------------------------------------------------- sending
    def write(self, data, now=0):
        """Append application bytes to the send buffer and try to send."""
        if self.state is not TcpState.ESTABLISHED:
            raise NotEstablished(f"connection is {self.state.value}")
        self.send_buffer += data
        self.account.record(CopyStage.USER_TO_MESSAGE, len(data), now)
        self.account.record_call(now)
        if not self._pumping:
            self._send_more(now)

    def _send_more(self, now):
        if self.state is not TcpState.ESTABLISHED:
            return
        if self.data_source is not None and not self._pumping:
            self._pumping = True
            try:
                self.data_source(self, now)
            finally:
                self._pumping = False
        mss = self.mss
        window = min(self.cwnd, self.peer_wnd)
        segs = self._segs
        buf_end = self._buf_base + len(self.send_buffer)
        while True:
            room = self.snd_una + window - self.snd_nxt
            if self._rtx_next < len(segs):
                rec = segs[self._rtx_next]
                if rec[1] - rec[0] > room and self.snd_nxt > self.snd_una:
                    break
                self._transmit(rec, now)
                self._rtx_next += 1
                self.snd_nxt = rec[1]
                continue
            avail = buf_end - self.snd_max
            if avail <= 0:
                break
            n = min(mss, avail)
            if n > room and self.snd_nxt > self.snd_una:
                break
            rec = [self.snd_max, self.snd_max + n, now, 0]
            segs.append(rec)
            self._rtx_next = len(segs)
            self._transmit(rec, now)
            self.snd_nxt = self.snd_max = rec[1]
        if self._close_requested and not self.fin_sent and self.snd_una == buf_end:
            self._send_fin(now)

    def _transmit(self, rec, now):
        off = rec[0] - self._buf_base
        data = bytes(self.send_buffer[off:off + rec[1] - rec[0]])
        if rec[3] == 0:
            rec[2] = now
            if self._probe is None:
                self._probe = (rec[1], now)
        else:
            self.counters["retransmitted_segments"] += 1
            if self._probe is not None and self._probe[0] >= rec[0]:
                self._probe = None
        rec[3] += 1
        self._seg(rec[0], ACK, data)
        self.account.record(CopyStage.NIC_DMA, TCP_HEADER + len(data), now)
        if self.t_deadline is None:
            self._arm(now)

    def _retransmit_head(self, now):
        if self._segs:
            self._transmit(self._segs[0], now)

    def close(self, now):
        if self.state is not TcpState.ESTABLISHED:
            raise NotEstablished(f"connection is {self.state.value}")
        self._close_requested = True
        self._send_more(now)
        return self.drain()

    def _send_fin(self, now):
        self.fin_sent = True
        self._seg(self.snd_max, FIN | ACK)
        self._arm(now)
        self._set_state(TcpState.CLOSING, now)


def tcp_connect(endpoint, peer_addr, peer_port, now=0):
    """Open a connection from ``endpoint``; the SYN is left in the endpoint outbox."""
    return endpoint.connect(peer_addr, peer_port, now)


def tcp_on_ack(conn, ack_seq, now, window=None, carries_data=False):
    """Reno reaction to a cumulative ACK (``ack_seq`` already unwrapped)."""
    if window is not None:
        conn.peer_wnd = window
    if conn.fin_sent and ack_seq == conn.snd_max + 1:
        conn.t_deadline = None
        conn._set_state(TcpState.CLOSED, now)
        return
    if ack_seq < conn.snd_una or ack_seq > conn.snd_max:
        conn.counters["ignored_acks"] += 1
        return
    mss = conn.mss
    if ack_seq == conn.snd_una:
        if carries_data or conn.snd_max == conn.snd_una:
            return
        conn.dup_ack_count += 1
        if conn.dup_ack_count == 3:
            conn.ssthresh = max(conn.flight_size // 2, 2 * mss)
            conn.cwnd = conn.ssthresh + 3 * mss
            conn.in_recovery = True
            conn.counters["fast_retransmits"] += 1
            conn._retransmit_head(now)
            conn._trace(now)
        elif conn.dup_ack_count > 3 and conn.in_recovery:
            conn.cwnd += mss
            conn._trace(now)
            conn._send_more(now)
        return
    # new data acknowledged
    conn.dup_ack_count = 0
    conn.error_count = 0
    if conn._probe is not None and ack_seq >= conn._probe[0]:
        sample = (now - conn._probe[1]) / NS
        conn._probe = None
        if sample > 0:
            cfg = conn.config
            conn.srtt, conn.rttvar, conn.rto = rto_step(conn.srtt, conn.rttvar, sample,
                                                        cfg.rto_alpha, cfg.rto_beta,
                                                        cfg.rto_min, cfg.rto_max)
    if conn.in_recovery:
        conn.in_recovery = False
        conn.cwnd = conn.ssthresh
    elif conn.cwnd <= conn.ssthresh:
        conn.cwnd += mss
    else:
        conn.cwnd += max(1, mss * mss // conn.cwnd)
    conn._trace(now)
    segs = conn._segs
    stats = conn.stats
    released = 0
    while segs and segs[0][1] <= ack_seq:
        rec = segs.popleft()
        released += 1
        if stats is not None:
            stats.segment_acked(rec[2], rec[3], rec[1] - rec[0], now, conn.srtt)
    conn._rtx_next = max(0, conn._rtx_next - released)
    drop = ack_seq - conn._buf_base
    if drop > 0:
        del conn.send_buffer[:min(drop, len(conn.send_buffer))]
        conn._buf_base += drop
    conn.snd_una = ack_seq
    if conn.snd_nxt < ack_seq:
        conn.snd_nxt = ack_seq
    if conn.snd_una == conn.snd_max:
        conn.t_deadline = None
    else:
        conn._arm(now)
    conn._send_more(now)


def tcp_on_timeout(conn, now):
    """Retransmission timeout: collapse cwnd and go back to ``snd_una``."""
    if conn.snd_una == conn.snd_max:
        return
    mss = conn.mss
    conn.ssthresh = max(conn.flight_size // 2, 2 * mss)
    conn.cwnd = mss
    conn.rto = min(2 * conn.rto, conn.config.rto_max)
    conn.dup_ack_count = 0
    conn.in_recovery = False
    conn._probe = None
    conn.error_count += 1
    conn.counters["timeouts"] += 1
    conn._trace(now)
    if conn.error_count > conn.config.max_retrans:
        conn._set_state(TcpState.CLOSED, now)
        conn.t_deadline = None
        return
    conn.snd_nxt = conn.snd_una
    conn._rtx_next = 0
    if conn.fin_sent and not conn._segs:
        conn._seg(conn.snd_max, FIN | ACK)
        conn._arm(now)
        return
    conn._send_more(now)
    if conn.t_deadline is None:
        conn._arm(now)


class TcpEndpoint:
    """One TCP host address/port; stateful on SYN, unlike the SCTP listener."""

    def __init__(self, address, port, config=None, rng=None, listening=True,
                 account_interval=None):
        import numpy as np
        self.address = address
        self.addresses = [address]
        self.port = port
        self.config = config or TcpConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.listening = listening
        self.account_interval = account_interval
        self.connections = {}
        self._by_id = {}
        self.stats = Counter()
        self.outbox = []
        self._dirty = {}
        self.on_connection = None

    def _new(self, peer_addr, peer_port):
        iss = int(self.rng.integers(0, 1 << 32))
        conn = TcpConnection(self.config, self.address, self.port, peer_addr, peer_port, iss,
                             account=CopyAccount(self.account_interval))
        self.connections[(peer_addr, peer_port)] = conn
        self._by_id[conn.id] = conn
        return conn

    def connect(self, peer_addr, peer_port, now=0):
        conn = self._new(peer_addr, peer_port)
        conn.open_active(now)
        self._flush(conn)
        return conn

    def _flush(self, conn):
        self._dirty[conn] = None
        self.outbox.extend(conn.drain())
        if conn.state is TcpState.CLOSED:
            self.connections.pop((conn.peer_addr, conn.peer_port), None)
            self._by_id.pop(conn.id, None)

    def drain(self):
        out, self.outbox = self.outbox, []
        return out

    def receive(self, seg, src, dst, now):
        if seg.dst_port != self.port:
            self.stats["wrong_port"] += 1
            return self.drain()
        conn = self.connections.get((src, seg.src_port))
        if conn is None:
            if seg.flags & SYN and not seg.flags & ACK and self.listening:
                conn = self._new(src, seg.src_port)
                if self.on_connection is not None:
                    self.on_connection(conn)
                conn._accept_syn(seg, now)
                self._flush(conn)
            else:
                self.stats["out_of_the_blue"] += 1
            return self.drain()
        self.outbox.extend(conn.handle_segment(seg, now))
        self._flush(conn)
        return self.drain()

    def on_timer(self, key, now):
        conn = self._by_id.get(key[0])
        if conn is not None:
            self.outbox.extend(conn.on_timer(key[1:], now))
            self._flush(conn)
        return self.drain()

    def deadlines(self):
        for cid, conn in self._by_id.items():
            for key, dl in conn.deadlines():
                yield (cid,) + key, dl

    def touched_deadlines(self):
        """Deadlines of connections touched since the previous call only."""
        dirty, self._dirty = self._dirty, {}
        for conn in dirty:
            for key, dl in conn.deadlines():
                yield (conn.id,) + key, dl

    def send(self, conn, data, now=0):
        conn.write(data, now)
        self._flush(conn)
        return self.drain()

    def kick(self, conn, now):
        conn._send_more(now)
        self._flush(conn)
        return self.drain()
