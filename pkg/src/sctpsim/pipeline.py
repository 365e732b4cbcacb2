"""LK-SCTP style message path: fragmentation, chunk bookkeeping and copy accounting.

A user message becomes an :class:`OutboundMessage` owning a list of
:class:`ChunkDescriptor` objects, each pointing at a :class:`ChunkBuffer`
holding the chunk header and a slice of the user data. Three memory-to-memory
copy stages are accounted in a :class:`CopyAccount`:

* ``USER_TO_MESSAGE`` -- user buffer into the message structure (once per message),
* ``BUNDLE_TO_NIC``   -- chunks bundled into an MTU packet (every transmission),
* ``NIC_DMA``         -- DMA of the packet into the NIC buffers (every transmission).
"""

from dataclasses import dataclass, field
from enum import Enum
from itertools import count

from . import wire
from .errors import DoubleRelease, EmptyMessage, IncompleteFragments
from .seqnum import MASK16, MASK32


class CopyStage(str, Enum):
    USER_TO_MESSAGE = "USER_TO_MESSAGE"
    BUNDLE_TO_NIC = "BUNDLE_TO_NIC"
    NIC_DMA = "NIC_DMA"


class CopyAccount:
    """Per-association ledger of copy stages.

    ``copies`` maps a stage to ``[count, bytes]`` and only holds stages that
    were actually recorded. When ``interval`` (ns) is set, bytes and send calls
    are also tallied per time bucket for the CPU model.
    """

    def __init__(self, interval=None):
        self.copies = {}
        self.interval = interval
        self.bucket_bytes = {}
        self.bucket_calls = {}
        self.calls = 0

    def record(self, stage, nbytes, now=0):
        entry = self.copies.get(stage)
        if entry is None:
            entry = self.copies[stage] = [0, 0]
        entry[0] += 1
        entry[1] += nbytes
        iv = self.interval
        if iv:
            b = now // iv
            per = self.bucket_bytes.get(b)
            if per is None:
                per = self.bucket_bytes[b] = {}
            per[stage] = per.get(stage, 0) + nbytes

    def record_call(self, now=0):
        self.calls += 1
        if self.interval:
            b = now // self.interval
            self.bucket_calls[b] = self.bucket_calls.get(b, 0) + 1

    @classmethod
    def merged(cls, accounts, interval=None):
        """One account summing several, e.g. every association on a host."""
        out = cls(interval)
        for a in accounts:
            for stage, (c, b) in a.copies.items():
                e = out.copies.setdefault(stage, [0, 0])
                e[0] += c
                e[1] += b
            for bk, per in a.bucket_bytes.items():
                dst = out.bucket_bytes.setdefault(bk, {})
                for stage, b in per.items():
                    dst[stage] = dst.get(stage, 0) + b
            for bk, n in a.bucket_calls.items():
                out.bucket_calls[bk] = out.bucket_calls.get(bk, 0) + n
            out.calls += a.calls
        return out

    def bytes(self, stage):
        entry = self.copies.get(stage)
        return entry[1] if entry else 0

    def count(self, stage):
        entry = self.copies.get(stage)
        return entry[0] if entry else 0

    def stages(self):
        return set(self.copies)

    def as_dict(self):
        return {s.value: {"count": c, "bytes": b} for s, (c, b) in self.copies.items()}


@dataclass(slots=True)
class ChunkBuffer:
    header_bytes: bytes
    payload_bytes: bytes


@dataclass(slots=True, eq=False)
class ChunkDescriptor:
    buffer_ref: ChunkBuffer
    stream_id: int
    ssn: int
    ordered: bool
    fragment_begin: bool
    fragment_end: bool
    message: "OutboundMessage" = None
    tsn: int = None
    chunk: wire.DataChunk = None
    transmit_count: int = 0
    first_sent_at: int = None
    last_sent_at: int = None
    # transport bookkeeping
    nbytes: int = 0
    path: int = -1
    in_flight: bool = False
    acked: bool = False
    needs_rtx: bool = False
    miss_count: int = 0
    fast_retransmitted: bool = False
    released: bool = False


@dataclass(slots=True, eq=False)
class OutboundMessage:
    message_id: int
    stream_id: int
    chunk_list: list = field(default_factory=list)
    unacked_count: int = 0
    freed: bool = False
    nbytes: int = 0


class SendPipeline:
    """Builds and releases the per-message structures and records the copies."""

    def __init__(self, chunk_size, account=None):
        self.chunk_size = chunk_size
        self.account = account if account is not None else CopyAccount()
        self.live_messages = {}
        self.freed_messages = 0
        self.staged_bytes = 0
        self._ids = count()

    def fragment(self, message_bytes, stream_id, ssn, ordered=True, chunk_size=None, now=0):
        """Split a user message into chunk-sized buffers (first copy stage)."""
        size = chunk_size or self.chunk_size
        n = len(message_bytes)
        if n == 0:
            raise EmptyMessage("cannot send an empty message")
        msg = OutboundMessage(next(self._ids), stream_id, nbytes=n)
        descs = msg.chunk_list
        for off in range(0, n, size):
            piece = message_bytes[off:off + size]
            descs.append(ChunkDescriptor(ChunkBuffer(b"", piece), stream_id, ssn, ordered,
                                         off == 0, off + size >= n, msg, nbytes=len(piece)))
        msg.unacked_count = len(descs)
        self.live_messages[msg.message_id] = msg
        self.account.record(CopyStage.USER_TO_MESSAGE, n, now)
        self.account.record_call(now)
        return msg

    @staticmethod
    def assign_tsns(msg, first_tsn):
        """Give the message's chunks consecutive TSNs starting at ``first_tsn``."""
        tsn = first_tsn
        for d in msg.chunk_list:
            d.tsn = tsn
            buf = d.buffer_ref
            payload = buf.payload_bytes
            wtsn, wssn = tsn & MASK32, d.ssn & MASK16
            buf.header_bytes = wire.encode_data_header(
                wtsn, d.stream_id, wssn, d.ordered, d.fragment_begin, d.fragment_end,
                wire.DATA_HEADER_LEN + len(payload))
            d.chunk = wire.DataChunk(wtsn, d.stream_id, wssn, payload, d.ordered,
                                     d.fragment_begin, d.fragment_end)
            tsn += 1
        return tsn

    def stage_for_transmit(self, descriptors, mtu, header=None, now=0):
        """Bundle the descriptors' chunks into packets (second copy stage)."""
        if not descriptors:
            return []
        packets = wire.bundle_chunks([d.chunk for d in descriptors], mtu, header)
        total = 0
        for p in packets:
            total += wire.packet_size(p.chunks)
        self.staged_bytes = total
        self.account.record(CopyStage.BUNDLE_TO_NIC, total, now)
        for d in descriptors:
            d.transmit_count += 1
            if d.first_sent_at is None:
                d.first_sent_at = now
            d.last_sent_at = now
        return packets

    def dma_transmit(self, packets, now=0, nbytes=None):
        """Account the DMA of staged packets into the NIC (third copy stage).

        ``nbytes`` skips re-measuring packets whose total size is already known.
        """
        if packets:
            total = nbytes
            if total is None:
                total = 0
                for p in packets:
                    total += wire.packet_size(p.chunks)
            self.account.record(CopyStage.NIC_DMA, total, now)
        return packets

    def release_acked(self, message, descriptor):
        """Drop one acknowledged chunk; free the message once none remain."""
        if descriptor.released:
            raise DoubleRelease(f"TSN {descriptor.tsn} released twice")
        descriptor.released = True
        message.unacked_count -= 1
        if message.unacked_count == 0:
            for d in message.chunk_list:
                d.buffer_ref = None
                d.chunk = None
                d.message = None
            message.chunk_list = []
            message.freed = True
            del self.live_messages[message.message_id]
            self.freed_messages += 1


def reassemble(fragments):
    """Concatenate one message's fragments, given in TSN order.

    Raises IncompleteFragments unless the list runs from a begin fragment to
    an end fragment with consecutive TSNs.
    """
    if not fragments:
        raise IncompleteFragments("no fragments")
    first, last = fragments[0], fragments[-1]
    if not first.fragment_begin or not last.fragment_end:
        raise IncompleteFragments("missing first or last fragment")
    prev = None
    for f in fragments:
        if prev is not None and (f.tsn - prev) & MASK32 != 1:
            raise IncompleteFragments(f"gap after TSN {prev}")
        if f is not first and f.fragment_begin:
            raise IncompleteFragments("unexpected begin flag mid-message")
        if f is not last and f.fragment_end:
            raise IncompleteFragments("unexpected end flag mid-message")
        prev = f.tsn
    if len(fragments) == 1:
        return first.user_bytes
    return b"".join(f.user_bytes for f in fragments)
