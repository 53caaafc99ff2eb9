import random
import struct
from pathlib import Path

import pytest

from srv6sim.packet import (
    InvariantViolation,
    NoTransport,
    Packet,
    ParseError,
    SegmentRoutingHeader,
    Tlv,
    Udp,
    decode_packet,
    encode_packet,
    encode_tlvs,
    make_udp_packet,
    parse_hex_dump,
    pton,
    udp_checksum,
    validate_srh,
    walk_tlvs,
)
from util import random_packet

VECTOR_DIR = Path(__file__).parent / "vectors"

S1 = pton("2001:db8:1::1")
S2 = pton("2001:db8:2::1")


def reference_checksum(pseudo_and_data: bytes) -> int:
    """Independent ones-complement reference, folded byte pair by byte
    pair; kept deliberately separate from the implementation under test."""
    data = pseudo_and_data
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        total = (total & 0xFFFF) + (total >> 16)
    c = (~total) & 0xFFFF
    return c if c else 0xFFFF


def reference_udp_checksum(p: Packet) -> int:
    inner = p.headers[-1][0]
    udp = p.transport
    ulen = 8 + len(udp.payload)
    blob = (
        inner.src
        + inner.dst
        + struct.pack(">IHBB", ulen, 0, 0, 17)
        + struct.pack(">HHHH", udp.src_port, udp.dst_port, ulen, 0)
        + udp.payload
    )
    return reference_checksum(blob)


# ---------------------------------------------------------------------------
# Sizes and field arithmetic.

def test_srh_sizes_two_segments_no_tlv():
    srh = SegmentRoutingHeader(segments=[S1, S2], segments_left=1)
    assert srh.wire_length == 40
    assert srh.hdr_ext_len == 4
    assert srh.last_entry == 1


def test_srh_sizes_with_tlv_region():
    srh = SegmentRoutingHeader(segments=[S1, S2], segments_left=1, tlv_bytes=b"\x04\x06" + b"\x00" * 6)
    assert srh.wire_length == 48
    assert srh.hdr_ext_len == 5


def test_active_segment_is_reverse_indexed():
    srh = SegmentRoutingHeader(segments=[S2, S1], segments_left=1)
    assert srh.active_segment == S1
    srh.segments_left = 0
    assert srh.active_segment == S2


# ---------------------------------------------------------------------------
# Golden vectors (offset-prefixed hex dumps built by an independent encoder).

def _vector(name: str) -> bytes:
    return parse_hex_dump((VECTOR_DIR / f"{name}.hex").read_text())


def test_hex_dump_roundtrip():
    from srv6sim.packet import format_hex_dump

    rng = random.Random(2)
    blob = rng.randbytes(77)
    assert parse_hex_dump(format_hex_dump(blob)) == blob


def test_vector_plain_udp():
    raw = _vector("plain-udp")
    p = decode_packet(raw)
    hdr = p.outer_header
    assert (hdr.src, hdr.dst, hdr.next_header, hdr.hop_limit) == (S1, S2, 17, 64)
    assert hdr.payload_length == 13
    assert p.transport == Udp(0x1234, 0x5678, b"hello", 13, 0xF7DE)
    assert udp_checksum(p) == 0xF7DE
    assert encode_packet(p) == raw


def test_vector_srh_two_segments():
    raw = _vector("srh-two-segments")
    p = decode_packet(raw)
    srh = p.outer_srh
    assert srh is not None
    assert srh.segments == [S2, pton("fd00:72::e")]
    assert (srh.segments_left, srh.last_entry, srh.tag) == (1, 1, 5)
    assert srh.hdr_ext_len == 8
    assert validate_srh(srh) is None
    tlvs = [t for _, t in walk_tlvs(srh.tlv_bytes)]
    assert [t.type for t in tlvs] == [1, 2, 4]
    assert tlvs[0].value == struct.pack(">Q", 1_500_000)
    assert p.transport.checksum == 0xB6BB
    assert encode_packet(p) == raw


def test_vector_encap_two_headers():
    raw = _vector("encap-two-headers")
    p = decode_packet(raw)
    assert len(p.headers) == 2
    outer, inner = p.headers[0][0], p.headers[1][0]
    assert outer.next_header == 43
    assert p.headers[0][1][0].next_header == 41
    assert inner.src == S1 and inner.dst == S2
    assert p.transport.checksum == 0x07D2
    assert encode_packet(p) == raw


# ---------------------------------------------------------------------------
# Round-trip property.

def test_roundtrip_seeded_random_packets():
    rng = random.Random(0xC0DEC)
    for _ in range(1000):
        p = random_packet(rng)
        raw = encode_packet(p)
        back = decode_packet(raw)
        assert back == p
        assert p.wire_size() == len(raw)


def test_roundtrip_checksum_stable():
    rng = random.Random(7)
    p = random_packet(rng)
    while not isinstance(p.transport, Udp):
        p = random_packet(rng)
    raw = encode_packet(p)
    back = decode_packet(raw)
    assert udp_checksum(back) == udp_checksum(p)


# ---------------------------------------------------------------------------
# Decode errors.

def test_decode_truncated_header():
    with pytest.raises(ParseError):
        decode_packet(b"\x60" + b"\x00" * 20)


def test_decode_bad_version():
    raw = bytearray(encode_packet(make_udp_packet(S1, S2, b"x")))
    raw[0] = 0x40
    with pytest.raises(ParseError, match="version"):
        decode_packet(bytes(raw))


def test_decode_bad_routing_type():
    p = make_udp_packet(S1, S2, b"x")
    srh = SegmentRoutingHeader(segments=[S2], segments_left=0, next_header=17)
    p.headers[0][0].next_header = 43
    p.headers[0][1].append(srh)
    raw = bytearray(encode_packet(p))
    raw[42] = 99  # routing_type octet
    with pytest.raises(ParseError, match="routing_type"):
        decode_packet(bytes(raw))


def test_decode_hdr_ext_len_smaller_than_segment_list():
    p = make_udp_packet(S1, S2, b"x")
    p.headers[0][0].next_header = 43
    p.headers[0][1].append(
        SegmentRoutingHeader(segments=[S1, S2], segments_left=0, next_header=17)
    )
    raw = bytearray(encode_packet(p))
    raw[41] = 2  # hdr_ext_len: implies 24 octets < 8 + 32
    with pytest.raises(ParseError):
        decode_packet(bytes(raw))


def test_decode_tlv_walk_overrun():
    p = make_udp_packet(S1, S2, b"x")
    tlv = encode_tlvs(Tlv(9, b"\x01\x02\x03\x04\x05\x06"))
    p.headers[0][0].next_header = 43
    p.headers[0][1].append(
        SegmentRoutingHeader(segments=[S2], segments_left=0, next_header=17, tlv_bytes=tlv)
    )
    raw = bytearray(encode_packet(p))
    # corrupt the TLV length so the value runs past the region end
    raw[40 + 8 + 16 + 1] = 200
    with pytest.raises(ParseError):
        decode_packet(bytes(raw))


def test_mutation_corpus_never_crashes():
    rng = random.Random(0xF00D)
    base = encode_packet(random_packet(rng))
    for _ in range(300):
        raw = bytearray(base)
        for _ in range(rng.randrange(1, 6)):
            raw[rng.randrange(len(raw))] = rng.randrange(256)
        try:
            decode_packet(bytes(raw))
        except ParseError:
            pass


# ---------------------------------------------------------------------------
# validate_srh.

def test_validate_fresh_decode_ok():
    rng = random.Random(3)
    for _ in range(50):
        p = random_packet(rng)
        srh = p.outer_srh
        if srh is not None:
            assert validate_srh(srh) is None


def test_validate_zero_filled_growth_rejected():
    srh = SegmentRoutingHeader(
        segments=[S1], segments_left=0, tlv_bytes=b"\x00" * 8
    )
    bad = validate_srh(srh)
    assert bad is not None and bad.code == "RawFillInvalid"


def test_validate_single_pad1_ok():
    srh = SegmentRoutingHeader(
        segments=[S1], segments_left=0,
        tlv_bytes=encode_tlvs(Tlv(9, b"\x01\x02\x03\x04\x05")),
    )
    assert srh.tlv_bytes[-1:] == b"\x00"  # ends in one Pad1
    assert validate_srh(srh) is None


def test_validate_segments_left_out_of_range():
    srh = SegmentRoutingHeader(segments=[S1, S2], segments_left=2)
    bad = validate_srh(srh)
    assert bad is not None and bad.code == "SegmentsLeftOutOfRange"


def test_validate_misaligned_tlv_region():
    srh = SegmentRoutingHeader(segments=[S1], segments_left=0, tlv_bytes=b"\x04\x01\x00")
    bad = validate_srh(srh)
    assert bad is not None and bad.code == "TlvRegionMisaligned"


def test_encode_rejects_invalid_srh():
    p = make_udp_packet(S1, S2, b"x")
    p.headers[0][0].next_header = 43
    p.headers[0][1].append(
        SegmentRoutingHeader(segments=[S2], segments_left=3, next_header=17)
    )
    with pytest.raises(InvariantViolation):
        encode_packet(p)


# ---------------------------------------------------------------------------
# UDP checksum.

def test_checksum_matches_reference_on_fixed_packet():
    p = make_udp_packet(S1, S2, b"\x00" * 32, src_port=1000, dst_port=2000)
    assert udp_checksum(p) == reference_udp_checksum(p)


def test_checksum_matches_reference_on_random_packets():
    rng = random.Random(11)
    for _ in range(200):
        p = random_packet(rng)
        if isinstance(p.transport, Udp):
            assert udp_checksum(p) == reference_udp_checksum(p)


def test_checksum_depends_on_destination():
    p = make_udp_packet(S1, S2, b"payload")
    before = udp_checksum(p)
    p.headers[0][0].dst = pton("2001:db8:2::2")
    assert udp_checksum(p) != before


def test_checksum_no_transport():
    p = make_udp_packet(S1, S2, b"x")
    p.transport = b"\x01\x02"
    p.headers[0][0].next_header = 58
    with pytest.raises(NoTransport):
        udp_checksum(p)
