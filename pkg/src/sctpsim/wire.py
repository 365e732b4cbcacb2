"""Chunk and packet types with a bit-exact, big-endian byte encoding.

Layout (all multi-byte integers big-endian)::

    common header   src_port u16 | dst_port u16 | verification_tag u32 | checksum u32
    chunk header    type u8 | flags u8 | length u16        (length excludes padding)
    DATA            tsn u32 | stream_id u16 | ssn u16 | ppid u32 | user bytes
    INIT, INIT_ACK  initiate_tag u32 | a_rwnd u32 | out_streams u16 | n_addr u16 |
                    initial_tsn u32 | n_addr * address u32 | cookie (INIT_ACK only)
    SACK            cum_tsn u32 | a_rwnd u32 | n_gaps u16 | n_dups u16 | gaps (u16, u16)*
    HEARTBEAT(_ACK) opaque info
    ABORT           cause u16
    SHUTDOWN        cum_tsn u32
    COOKIE_ECHO     cookie
    COOKIE_ACK      (empty)

Every chunk is padded with zero bytes to a multiple of 4. The checksum is
CRC-32 over the whole packet with the checksum field zeroed.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar

from .errors import BadChecksum, OversizeChunk, Truncated

log = logging.getLogger(__name__)

COMMON_HEADER_LEN = 12
CHUNK_HEADER_LEN = 4
DATA_HEADER_LEN = 16
INIT_FIXED_LEN = 20
SACK_FIXED_LEN = 16

FLAG_UNORDERED = 0x04
FLAG_BEGIN = 0x02
FLAG_END = 0x01
FLAG_SHUTDOWN_ACK = 0x01

_HDR = struct.Struct("!HHII")
_CHUNK_HDR = struct.Struct("!BBH")
_DATA = struct.Struct("!BBHIHHI")
_INIT = struct.Struct("!IIHHI")
_SACK = struct.Struct("!IIHH")
_GAP = struct.Struct("!HH")
_U16 = struct.Struct("!H")
_U32 = struct.Struct("!I")


class ChunkKind(IntEnum):
    DATA = 0
    INIT = 1
    INIT_ACK = 2
    SACK = 3
    HEARTBEAT = 4
    HEARTBEAT_ACK = 5
    ABORT = 6
    SHUTDOWN = 7
    COOKIE_ECHO = 10
    COOKIE_ACK = 11


def _pad(n):
    return (n + 3) & ~3


@dataclass(frozen=True, slots=True)
class CommonHeader:
    src_port: int = 0
    dst_port: int = 0
    verification_tag: int = 0
    # excluded from equality: the encoder always recomputes it
    checksum: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class DataChunk:
    tsn: int
    stream_id: int
    ssn: int
    user_bytes: bytes
    ordered: bool = True
    fragment_begin: bool = True
    fragment_end: bool = True
    kind: ClassVar[ChunkKind] = ChunkKind.DATA

    @property
    def flags(self):
        return ((0 if self.ordered else FLAG_UNORDERED)
                | (FLAG_BEGIN if self.fragment_begin else 0)
                | (FLAG_END if self.fragment_end else 0))

    @property
    def length(self):
        return DATA_HEADER_LEN + len(self.user_bytes)


@dataclass(frozen=True, slots=True)
class InitChunk:
    initiate_tag: int
    initial_tsn: int
    rwnd: int
    out_streams: int
    addresses: tuple = ()
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.INIT

    @property
    def length(self):
        return INIT_FIXED_LEN + 4 * len(self.addresses)


@dataclass(frozen=True, slots=True)
class InitAckChunk:
    initiate_tag: int
    initial_tsn: int
    rwnd: int
    out_streams: int
    addresses: tuple = ()
    cookie: bytes = b""
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.INIT_ACK

    @property
    def length(self):
        return INIT_FIXED_LEN + 4 * len(self.addresses) + len(self.cookie)


@dataclass(frozen=True, slots=True)
class SackChunk:
    cumulative_tsn_ack: int
    advertised_rwnd: int
    gap_blocks: tuple = ()
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.SACK

    @property
    def length(self):
        return SACK_FIXED_LEN + 4 * len(self.gap_blocks)


@dataclass(frozen=True, slots=True)
class HeartbeatChunk:
    info: bytes = b""
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.HEARTBEAT

    @property
    def length(self):
        return CHUNK_HEADER_LEN + len(self.info)


@dataclass(frozen=True, slots=True)
class HeartbeatAckChunk:
    info: bytes = b""
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.HEARTBEAT_ACK

    @property
    def length(self):
        return CHUNK_HEADER_LEN + len(self.info)


@dataclass(frozen=True, slots=True)
class AbortChunk:
    cause: int = 0
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.ABORT

    @property
    def length(self):
        return CHUNK_HEADER_LEN + 2


@dataclass(frozen=True, slots=True)
class ShutdownChunk:
    cumulative_tsn_ack: int = 0
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.SHUTDOWN

    @property
    def is_ack(self):
        return bool(self.flags & FLAG_SHUTDOWN_ACK)

    @property
    def length(self):
        return CHUNK_HEADER_LEN + 4


@dataclass(frozen=True, slots=True)
class CookieEchoChunk:
    cookie: bytes
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.COOKIE_ECHO

    @property
    def length(self):
        return CHUNK_HEADER_LEN + len(self.cookie)


@dataclass(frozen=True, slots=True)
class CookieAckChunk:
    flags: int = 0
    kind: ClassVar[ChunkKind] = ChunkKind.COOKIE_ACK

    @property
    def length(self):
        return CHUNK_HEADER_LEN


# stale-cookie error cause carried in ABORT
CAUSE_STALE_COOKIE = 3
CAUSE_USER_ABORT = 12


@dataclass(frozen=True, slots=True)
class Packet:
    header: CommonHeader
    chunks: tuple = ()

    @property
    def first_kind(self):
        return self.chunks[0].kind if self.chunks else None

    @property
    def size(self):
        return packet_size(self.chunks)


def padded_length(chunk):
    return (chunk.length + 3) & ~3


def packet_size(chunks):
    """Encoded size in bytes of a packet carrying ``chunks``."""
    total = COMMON_HEADER_LEN
    for c in chunks:
        total += (c.length + 3) & ~3
    return total


def encode_data_header(tsn, stream_id, ssn, ordered=True, begin=True, end=True, length=0):
    flags = ((0 if ordered else FLAG_UNORDERED) | (FLAG_BEGIN if begin else 0)
             | (FLAG_END if end else 0))
    return _DATA.pack(ChunkKind.DATA, flags, length, tsn, stream_id, ssn, 0)


def _encode_chunk(c, out):
    kind = c.kind
    start = len(out)
    if kind is ChunkKind.DATA:
        out += _DATA.pack(kind, c.flags, c.length, c.tsn, c.stream_id, c.ssn, 0)
        out += c.user_bytes
    elif kind is ChunkKind.INIT or kind is ChunkKind.INIT_ACK:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += _INIT.pack(c.initiate_tag, c.rwnd, c.out_streams, len(c.addresses), c.initial_tsn)
        for a in c.addresses:
            out += _U32.pack(a)
        if kind is ChunkKind.INIT_ACK:
            out += c.cookie
    elif kind is ChunkKind.SACK:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += _SACK.pack(c.cumulative_tsn_ack, c.advertised_rwnd, len(c.gap_blocks), 0)
        for s, e in c.gap_blocks:
            out += _GAP.pack(s, e)
    elif kind is ChunkKind.HEARTBEAT or kind is ChunkKind.HEARTBEAT_ACK:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += c.info
    elif kind is ChunkKind.ABORT:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += _U16.pack(c.cause)
    elif kind is ChunkKind.SHUTDOWN:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += _U32.pack(c.cumulative_tsn_ack)
    elif kind is ChunkKind.COOKIE_ECHO:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
        out += c.cookie
    elif kind is ChunkKind.COOKIE_ACK:
        out += _CHUNK_HDR.pack(kind, c.flags, c.length)
    else:  # pragma: no cover - closed set of dataclasses
        raise TypeError(f"cannot encode {c!r}")
    pad = (-(len(out) - start)) & 3
    if pad:
        out += b"\0" * pad


def encode_packet(p, mtu=None):
    """Serialize ``p``; the checksum field is computed, never taken from ``p``.

    With ``mtu`` given, a chunk whose padded length exceeds ``mtu - 12``
    raises OversizeChunk.
    """
    if mtu is not None:
        limit = mtu - COMMON_HEADER_LEN
        for c in p.chunks:
            if padded_length(c) > limit:
                raise OversizeChunk(f"{c.kind.name} chunk of {padded_length(c)} bytes exceeds mtu {mtu}")
    h = p.header
    out = bytearray(_HDR.pack(h.src_port, h.dst_port, h.verification_tag, 0))
    for c in p.chunks:
        _encode_chunk(c, out)
    out[8:12] = _U32.pack(zlib.crc32(out))
    return bytes(out)


def _decode_chunk(kind, flags, body):
    if kind == ChunkKind.DATA:
        if len(body) < DATA_HEADER_LEN - CHUNK_HEADER_LEN + 1:
            raise Truncated("DATA chunk shorter than its header plus one user byte")
        tsn, sid, ssn, _ppid = struct.unpack_from("!IHHI", body)
        return DataChunk(tsn, sid, ssn, bytes(body[12:]),
                         ordered=not flags & FLAG_UNORDERED,
                         fragment_begin=bool(flags & FLAG_BEGIN),
                         fragment_end=bool(flags & FLAG_END))
    if kind in (ChunkKind.INIT, ChunkKind.INIT_ACK):
        if len(body) < INIT_FIXED_LEN - CHUNK_HEADER_LEN:
            raise Truncated("INIT chunk too short")
        tag, rwnd, out_streams, n_addr, itsn = _INIT.unpack_from(body)
        end = 16 + 4 * n_addr
        if len(body) < end:
            raise Truncated("INIT address list exceeds chunk length")
        addrs = tuple(struct.unpack_from(f"!{n_addr}I", body, 16))
        if kind == ChunkKind.INIT:
            return InitChunk(tag, itsn, rwnd, out_streams, addrs, flags)
        return InitAckChunk(tag, itsn, rwnd, out_streams, addrs, bytes(body[end:]), flags)
    if kind == ChunkKind.SACK:
        if len(body) < SACK_FIXED_LEN - CHUNK_HEADER_LEN:
            raise Truncated("SACK chunk too short")
        cum, rwnd, n_gaps, _n_dups = _SACK.unpack_from(body)
        if len(body) < 12 + 4 * n_gaps:
            raise Truncated("SACK gap list exceeds chunk length")
        flat = struct.unpack_from(f"!{2 * n_gaps}H", body, 12)
        gaps = tuple(zip(flat[0::2], flat[1::2]))
        return SackChunk(cum, rwnd, gaps, flags)
    if kind == ChunkKind.HEARTBEAT:
        return HeartbeatChunk(bytes(body), flags)
    if kind == ChunkKind.HEARTBEAT_ACK:
        return HeartbeatAckChunk(bytes(body), flags)
    if kind == ChunkKind.ABORT:
        cause = _U16.unpack_from(body)[0] if len(body) >= 2 else 0
        return AbortChunk(cause, flags)
    if kind == ChunkKind.SHUTDOWN:
        if len(body) < 4:
            raise Truncated("SHUTDOWN chunk too short")
        return ShutdownChunk(_U32.unpack_from(body)[0], flags)
    if kind == ChunkKind.COOKIE_ECHO:
        return CookieEchoChunk(bytes(body), flags)
    if kind == ChunkKind.COOKIE_ACK:
        return CookieAckChunk(flags)
    return None


def decode_packet(data, stats=None):
    """Parse bytes produced by :func:`encode_packet`.

    Unknown chunk types are skipped; when ``stats`` (a Counter) is given,
    ``stats["unknown_chunks"]`` is incremented for each.
    """
    data = memoryview(bytes(data))
    if len(data) < COMMON_HEADER_LEN:
        raise Truncated(f"{len(data)} bytes is shorter than the common header")
    src, dst, vtag, checksum = _HDR.unpack_from(data)
    zeroed = bytearray(data)
    zeroed[8:12] = b"\0\0\0\0"
    if zlib.crc32(zeroed) != checksum:
        raise BadChecksum(f"checksum mismatch (carried {checksum:#010x})")
    chunks = []
    off = COMMON_HEADER_LEN
    n = len(data)
    while off < n:
        if n - off < CHUNK_HEADER_LEN:
            raise Truncated("trailing bytes shorter than a chunk header")
        kind, flags, length = _CHUNK_HDR.unpack_from(data, off)
        if length < CHUNK_HEADER_LEN or off + length > n:
            raise Truncated(f"chunk length {length} exceeds remaining {n - off} bytes")
        body = data[off + CHUNK_HEADER_LEN: off + length]
        try:
            kind = ChunkKind(kind)
        except ValueError:
            log.debug("skipping unknown chunk type %d", kind)
            if stats is not None:
                stats["unknown_chunks"] += 1
            off += _pad(length)
            continue
        chunks.append(_decode_chunk(kind, flags, body))
        off += _pad(length)
    return Packet(CommonHeader(src, dst, vtag, checksum), tuple(chunks))


def bundle_chunks(chunks, mtu, header=None):
    """Greedy first-fit, order-preserving packing of ``chunks`` into packets of at most ``mtu`` bytes.

    An INIT chunk always travels alone.
    """
    header = header if header is not None else CommonHeader()
    limit = mtu - COMMON_HEADER_LEN
    packets = []
    current = []
    used = 0
    for c in chunks:
        size = (c.length + 3) & ~3
        if size > limit:
            raise OversizeChunk(f"{c.kind.name} chunk of {size} bytes cannot fit mtu {mtu}")
        lone = c.kind is ChunkKind.INIT
        if current and (lone or used + size > limit or current[0].kind is ChunkKind.INIT):
            packets.append(Packet(header, tuple(current)))
            current = []
            used = 0
        current.append(c)
        used += size
    if current:
        packets.append(Packet(header, tuple(current)))
    return packets


def verify_tag(p, expected, stats=None):
    """Accept ``p`` iff its verification tag matches.

    Packets whose first chunk is INIT are judged by a different rule: they are
    accepted only with tag 0, whatever ``expected`` is. Discards bump
    ``stats["tag_discards"]`` when a Counter is supplied.
    """
    tag = p.header.verification_tag
    if p.chunks and p.chunks[0].kind is ChunkKind.INIT:
        ok = tag == 0
    else:
        ok = tag == expected
    if not ok and stats is not None:
        stats["tag_discards"] += 1
    return ok
