import zlib
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctpsim import wire
from sctpsim.errors import BadChecksum, OversizeChunk, Truncated
from sctpsim.wire import (AbortChunk, CommonHeader, CookieAckChunk, CookieEchoChunk, DataChunk,
                          HeartbeatAckChunk, HeartbeatChunk, InitAckChunk, InitChunk, Packet,
                          SackChunk, ShutdownChunk)

u32 = st.integers(0, 2**32 - 1)
u16 = st.integers(0, 2**16 - 1)


def data_chunk(n, tsn=1, sid=0, ssn=0):
    return DataChunk(tsn, sid, ssn, bytes(range(256)) * (n // 256) + bytes(n % 256))


def brute_force_pack(sizes, limit):
    """Reference packer: walk the padded sizes and open a new bin when one would overflow."""
    bins = []
    for s in sizes:
        if bins and sum(bins[-1]) + s <= limit:
            bins[-1].append(s)
        else:
            bins.append([s])
    return bins


# ----------------------------------------------------------- strategies
data_chunks = st.builds(DataChunk, u32, u16, u16, st.binary(min_size=1, max_size=300),
                        st.booleans(), st.booleans(), st.booleans())
control_chunks = st.one_of(
    st.builds(SackChunk, u32, u32, st.lists(st.tuples(u16, u16), max_size=6).map(tuple)),
    st.builds(HeartbeatChunk, st.binary(max_size=40)),
    st.builds(HeartbeatAckChunk, st.binary(max_size=40)),
    st.builds(AbortChunk, u16),
    st.builds(ShutdownChunk, u32, st.sampled_from([0, wire.FLAG_SHUTDOWN_ACK])),
    st.builds(CookieEchoChunk, st.binary(max_size=80)),
    st.builds(CookieAckChunk),
    st.builds(InitAckChunk, u32, u32, u32, u16, st.lists(u32, max_size=3).map(tuple),
              st.binary(max_size=80)),
)
headers = st.builds(CommonHeader, u16, u16, u32)


@st.composite
def packets(draw):
    if draw(st.booleans()) and draw(st.booleans()):
        init = draw(st.builds(InitChunk, u32, u32, u32, u16, st.lists(u32, max_size=3).map(tuple)))
        return Packet(CommonHeader(draw(u16), draw(u16), 0), (init,))
    chunks = draw(st.lists(st.one_of(data_chunks, control_chunks), max_size=5))
    return Packet(draw(headers), tuple(chunks))


# -------------------------------------------------------------- layout
def test_full_chunk_fills_mtu():
    p = Packet(CommonHeader(1, 2, 3), (data_chunk(1468),))
    assert len(wire.encode_packet(p)) == 1496
    assert wire.packet_size(p.chunks) == 1496


def test_empty_packet_is_header_only():
    assert len(wire.encode_packet(Packet(CommonHeader(1, 2, 3)))) == 12


def test_data_chunk_padding():
    # 16 + 5 = 21, padded to 24
    p = Packet(CommonHeader(1, 2, 3), (data_chunk(5),))
    assert len(wire.encode_packet(p)) == 36
    assert wire.padded_length(p.chunks[0]) == 24


def test_encoding_is_big_endian():
    raw = wire.encode_packet(Packet(CommonHeader(0x0102, 0x0304, 0x05060708)))
    assert raw[:8] == bytes([1, 2, 3, 4, 5, 6, 7, 8])


def test_checksum_is_crc_with_field_zeroed():
    raw = bytearray(wire.encode_packet(Packet(CommonHeader(9, 10, 11), (data_chunk(40),))))
    carried = int.from_bytes(raw[8:12], "big")
    raw[8:12] = bytes(4)
    assert zlib.crc32(raw) == carried


def test_oversize_chunk_rejected_by_encoder():
    with pytest.raises(OversizeChunk):
        wire.encode_packet(Packet(CommonHeader(), (data_chunk(1473),)), mtu=1500)


# -------------------------------------------------------------- decode
def test_decode_short_input():
    with pytest.raises(Truncated):
        wire.decode_packet(bytes(11))


def test_decode_flipped_bit():
    raw = bytearray(wire.encode_packet(Packet(CommonHeader(1, 2, 3), (data_chunk(100),))))
    raw[40] ^= 0x10
    with pytest.raises(BadChecksum):
        wire.decode_packet(bytes(raw))


def test_decode_length_past_end():
    raw = bytearray(wire.encode_packet(Packet(CommonHeader(1, 2, 3), (data_chunk(8),))))
    raw[14:16] = (200).to_bytes(2, "big")
    raw[8:12] = bytes(4)
    raw[8:12] = zlib.crc32(raw).to_bytes(4, "big")
    with pytest.raises(Truncated):
        wire.decode_packet(bytes(raw))


def test_unknown_chunk_skipped_and_counted():
    raw = bytearray(wire.encode_packet(Packet(CommonHeader(1, 2, 3), (CookieAckChunk(),))))
    raw += bytes([0x40, 0, 0, 6, 0xAA, 0xBB, 0, 0])   # kind 64, length 6, padded to 8
    raw += wire.encode_packet(Packet(CommonHeader(), (HeartbeatChunk(b"hi"),)))[12:]
    raw[8:12] = bytes(4)
    raw[8:12] = zlib.crc32(raw).to_bytes(4, "big")
    stats = Counter()
    p = wire.decode_packet(bytes(raw), stats)
    assert [c.kind for c in p.chunks] == [wire.ChunkKind.COOKIE_ACK, wire.ChunkKind.HEARTBEAT]
    assert stats["unknown_chunks"] == 1


@settings(max_examples=300, deadline=None)
@given(packets())
def test_round_trip(p):
    raw = wire.encode_packet(p)
    assert len(raw) == wire.packet_size(p.chunks)
    assert wire.decode_packet(raw) == p


# ------------------------------------------------------------- bundling
def test_bundle_24_by_512():
    chunks = [data_chunk(512, tsn=i) for i in range(24)]
    pkts = wire.bundle_chunks(chunks, 1500)
    assert len(pkts) == 12
    assert all(len(p.chunks) == 2 and wire.packet_size(p.chunks) == 1068 for p in pkts)


def test_bundle_single_full_chunk():
    pkts = wire.bundle_chunks([data_chunk(1468)], 1500)
    assert len(pkts) == 1 and wire.packet_size(pkts[0].chunks) == 1496


def test_bundle_empty():
    assert wire.bundle_chunks([], 1500) == []


def test_bundle_oversize():
    with pytest.raises(OversizeChunk):
        wire.bundle_chunks([data_chunk(1473)], 1500)


def test_init_travels_alone():
    init = InitChunk(5, 6, 65536, 1)
    pkts = wire.bundle_chunks([CookieAckChunk(), init, CookieAckChunk()], 1500)
    assert [len(p.chunks) for p in pkts] == [1, 1, 1]
    assert pkts[1].chunks == (init,)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 1468), max_size=40), st.sampled_from([600, 1500, 9000]))
def test_bundle_matches_reference_packer(sizes, mtu):
    sizes = [s for s in sizes if ((16 + s + 3) & ~3) <= mtu - 12]
    chunks = [data_chunk(s, tsn=i) for i, s in enumerate(sizes)]
    pkts = wire.bundle_chunks(chunks, mtu)
    expected = brute_force_pack([(16 + s + 3) & ~3 for s in sizes], mtu - 12)
    assert [len(p.chunks) for p in pkts] == [len(b) for b in expected]
    assert [c for p in pkts for c in p.chunks] == chunks
    assert all(wire.packet_size(p.chunks) <= mtu for p in pkts)


# ---------------------------------------------------------- verify_tag
def test_verify_tag_match():
    p = Packet(CommonHeader(1, 2, 77), (CookieAckChunk(),))
    assert wire.verify_tag(p, 77)


def test_verify_tag_mismatch_counted():
    stats = Counter()
    p = Packet(CommonHeader(1, 2, 78), (CookieAckChunk(),))
    assert not wire.verify_tag(p, 77, stats)
    assert stats["tag_discards"] == 1


def test_init_needs_zero_tag():
    init = InitChunk(5, 6, 65536, 1)
    assert wire.verify_tag(Packet(CommonHeader(1, 2, 0), (init,)), 1234)
    assert not wire.verify_tag(Packet(CommonHeader(1, 2, 9), (init,)), 9)
