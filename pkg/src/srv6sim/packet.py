"""IPv6/SRH packet model, byte codec and validation.

Packets are stacks of IPv6 headers, each optionally followed by one or
more Segment Routing Headers (routing type 4), terminated by a UDP
transport or an opaque payload. Segment lists are stored in reverse path
order: ``segments[0]`` is the final segment and the active segment is
``segments[segments_left]``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

Address = bytes  # 16 octets, network order

PROTO_HOPOPT = 0
PROTO_UDP = 17
PROTO_IPV6 = 41
PROTO_ROUTING = 43
PROTO_ICMPV6 = 58

ROUTING_TYPE_SRH = 4

TLV_PAD1 = 0
TLV_PADN = 4

_V6_HDR = struct.Struct(">IHBB16s16s")
_UDP_HDR = struct.Struct(">HHHH")


class PacketError(Exception):
    pass


class InvariantViolation(PacketError):
    pass


class ParseError(PacketError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class NoTransport(PacketError):
    pass


def pton(text: str) -> Address:
    """Parse an IPv6 address string into 16 octets."""
    import socket

    return socket.inet_pton(socket.AF_INET6, text)


def ntop(addr: Address) -> str:
    """Render 16 octets as a compressed IPv6 address string."""
    import socket

    return socket.inet_ntop(socket.AF_INET6, addr)


@dataclass(slots=True)
class Ipv6Header:
    src: Address
    dst: Address
    next_header: int = PROTO_UDP
    hop_limit: int = 64
    traffic_class: int = 0
    flow_label: int = 0
    payload_length: int = 0
    version: int = 6

    def check(self) -> None:
        if self.version != 6:
            raise InvariantViolation("IPv6 version must be 6")
        if not (0 <= self.traffic_class <= 0xFF):
            raise InvariantViolation("traffic_class out of range")
        if not (0 <= self.flow_label <= 0xFFFFF):
            raise InvariantViolation("flow_label out of range")
        if not (0 <= self.hop_limit <= 0xFF):
            raise InvariantViolation("hop_limit out of range")
        if len(self.src) != 16 or len(self.dst) != 16:
            raise InvariantViolation("addresses must be 16 octets")


@dataclass(slots=True)
class SegmentRoutingHeader:
    segments: list[Address]
    segments_left: int
    next_header: int = PROTO_UDP
    flags: int = 0
    tag: int = 0
    tlv_bytes: bytes = b""
    routing_type: int = ROUTING_TYPE_SRH

    @property
    def last_entry(self) -> int:
        return len(self.segments) - 1

    @property
    def hdr_ext_len(self) -> int:
        # length in 8-octet units, excluding the first 8 octets
        return 2 * len(self.segments) + len(self.tlv_bytes) // 8

    @property
    def wire_length(self) -> int:
        return 8 + 16 * len(self.segments) + len(self.tlv_bytes)

    @property
    def active_segment(self) -> Address:
        return self.segments[self.segments_left]

    def copy(self) -> "SegmentRoutingHeader":
        return SegmentRoutingHeader(
            segments=list(self.segments),
            segments_left=self.segments_left,
            next_header=self.next_header,
            flags=self.flags,
            tag=self.tag,
            tlv_bytes=self.tlv_bytes,
            routing_type=self.routing_type,
        )


@dataclass(slots=True)
class Tlv:
    type: int
    value: bytes = b""

    @property
    def length(self) -> int:
        return len(self.value)

    def encode(self) -> bytes:
        if self.type == TLV_PAD1:
            return b"\x00"
        return bytes((self.type, len(self.value))) + self.value


def encode_tlvs(*tlvs: Tlv, pad: bool = True) -> bytes:
    """Serialize TLVs, optionally padding the region to a multiple of 8."""
    raw = b"".join(t.encode() for t in tlvs)
    if pad:
        short = (-len(raw)) % 8
        if short == 1:
            raw += Tlv(TLV_PAD1).encode()
        elif short > 1:
            raw += Tlv(TLV_PADN, b"\x00" * (short - 2)).encode()
    return raw


def walk_tlvs(region: bytes):
    """Yield (offset, Tlv) for each record; raises ParseError on overrun."""
    off = 0
    end = len(region)
    while off < end:
        t = region[off]
        if t == TLV_PAD1:
            yield off, Tlv(TLV_PAD1)
            off += 1
            continue
        if off + 2 > end:
            raise ParseError(off, "TLV header truncated")
        length = region[off + 1]
        if off + 2 + length > end:
            raise ParseError(off, "TLV value runs past region end")
        yield off, Tlv(t, bytes(region[off + 2 : off + 2 + length]))
        off += 2 + length


def find_tlv(srh: SegmentRoutingHeader, tlv_type: int) -> Tlv | None:
    """First TLV of the given type, or None (also None on a broken walk)."""
    try:
        for _, tlv in walk_tlvs(srh.tlv_bytes):
            if tlv.type == tlv_type:
                return tlv
    except ParseError:
        return None
    return None


@dataclass(slots=True)
class SrhViolation:
    code: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}" if self.detail else self.code


def validate_srh(srh: SegmentRoutingHeader) -> SrhViolation | None:
    """Full SRH check; returns the first violation found, or None.

    The TLV region must parse as a terminating walk and multi-octet
    padding must use PadN: a run of two or more Pad1 octets (e.g. space
    grown but never filled) is rejected as RawFillInvalid.
    """
    if not srh.segments:
        return SrhViolation("NoSegments")
    for seg in srh.segments:
        if len(seg) != 16:
            return SrhViolation("BadSegment", "segment not 16 octets")
    if not (0 <= srh.segments_left <= srh.last_entry):
        return SrhViolation(
            "SegmentsLeftOutOfRange",
            f"segments_left {srh.segments_left} > last_entry {srh.last_entry}",
        )
    if srh.routing_type != ROUTING_TYPE_SRH:
        return SrhViolation("BadRoutingType", str(srh.routing_type))
    if not (0 <= srh.flags <= 0xFF) or not (0 <= srh.tag <= 0xFFFF):
        return SrhViolation("FieldOutOfRange", "flags or tag")
    if srh.hdr_ext_len > 0xFF:
        return SrhViolation("SizeOverflow", "hdr_ext_len > 255")
    if len(srh.tlv_bytes) % 8 != 0:
        return SrhViolation("TlvRegionMisaligned", str(len(srh.tlv_bytes)))
    pad1_run = 0
    try:
        for _, tlv in walk_tlvs(srh.tlv_bytes):
            if tlv.type == TLV_PAD1:
                pad1_run += 1
                if pad1_run > 1:
                    return SrhViolation(
                        "RawFillInvalid", "run of Pad1 octets; use PadN"
                    )
            else:
                pad1_run = 0
    except ParseError as exc:
        return SrhViolation("TlvWalkOverrun", exc.reason)
    return None


Transport = "Udp | bytes"


@dataclass(slots=True)
class Udp:
    src_port: int
    dst_port: int
    payload: bytes = b""
    length: int = 0
    checksum: int = 0

    @property
    def wire_length(self) -> int:
        return 8 + len(self.payload)


@dataclass(slots=True, eq=False)
class PacketMeta:
    pending_destination: Address | None = None
    pending_link: str | None = None
    pending_table: int | None = None
    rx_timestamp_ns: int = 0
    ingress_node: str | None = None
    srh_dirty: bool = False


# One header layer: an IPv6 header followed by zero or more routing
# headers (End.B6 stacks a second SRH under the same IPv6 header).
Layer = "tuple[Ipv6Header, list[SegmentRoutingHeader]]"


@dataclass(slots=True)
class Packet:
    headers: list[tuple[Ipv6Header, list[SegmentRoutingHeader]]]
    transport: Udp | bytes
    meta: PacketMeta = field(default_factory=PacketMeta, compare=False)

    @property
    def outer_header(self) -> Ipv6Header:
        return self.headers[0][0]

    @property
    def outer_srh(self) -> SegmentRoutingHeader | None:
        srhs = self.headers[0][1]
        return srhs[0] if srhs else None

    @property
    def inner_udp(self) -> Udp | None:
        return self.transport if isinstance(self.transport, Udp) else None

    def wire_size(self) -> int:
        n = 0
        for hdr, srhs in self.headers:
            n += 40 + sum(s.wire_length for s in srhs)
        if isinstance(self.transport, Udp):
            n += self.transport.wire_length
        else:
            n += len(self.transport)
        return n

    def copy(self) -> "Packet":
        headers = []
        for hdr, srhs in self.headers:
            h = Ipv6Header(
                src=hdr.src, dst=hdr.dst, next_header=hdr.next_header,
                hop_limit=hdr.hop_limit, traffic_class=hdr.traffic_class,
                flow_label=hdr.flow_label, payload_length=hdr.payload_length,
                version=hdr.version,
            )
            headers.append((h, [s.copy() for s in srhs]))
        if isinstance(self.transport, Udp):
            tp: Udp | bytes = Udp(
                self.transport.src_port, self.transport.dst_port,
                self.transport.payload, self.transport.length,
                self.transport.checksum,
            )
        else:
            tp = self.transport
        return Packet(headers=headers, transport=tp)


def make_udp_packet(
    src: Address,
    dst: Address,
    payload: bytes = b"",
    src_port: int = 49152,
    dst_port: int = 33434,
    hop_limit: int = 64,
    flow_label: int = 0,
    traffic_class: int = 0,
) -> Packet:
    """Plain single-header UDP packet with a consistent header chain."""
    udp = Udp(src_port, dst_port, payload, length=8 + len(payload))
    hdr = Ipv6Header(
        src=src, dst=dst, next_header=PROTO_UDP, hop_limit=hop_limit,
        flow_label=flow_label, traffic_class=traffic_class,
        payload_length=udp.length,
    )
    return Packet(headers=[(hdr, [])], transport=udp)


def _ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for (word,) in struct.iter_unpack(">H", data):
        total += word
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def udp_checksum(p: Packet) -> int:
    """UDP checksum over the IPv6 pseudo-header, header and payload.

    Computed against the innermost IPv6 header; a zero result is encoded
    as 0xFFFF per the UDP-over-IPv6 rules.
    """
    udp = p.inner_udp
    if udp is None:
        raise NoTransport("packet has no UDP transport")
    inner = p.headers[-1][0]
    ulen = udp.wire_length
    pseudo = inner.src + inner.dst + struct.pack(">IHBB", ulen, 0, 0, PROTO_UDP)
    hdr = _UDP_HDR.pack(udp.src_port, udp.dst_port, ulen, 0)
    total = _ones_complement_sum(pseudo + hdr + udp.payload)
    csum = (~total) & 0xFFFF
    return csum if csum else 0xFFFF


def _expected_next(layer_idx: int, p: Packet) -> int | None:
    if layer_idx + 1 < len(p.headers):
        return PROTO_IPV6
    if isinstance(p.transport, Udp):
        return PROTO_UDP
    return None  # opaque transport: any protocol code is carried as-is


def check_packet(p: Packet) -> None:
    """Raise InvariantViolation on any broken type or chain invariant."""
    if not p.headers:
        raise InvariantViolation("packet needs at least one IPv6 header")
    for i, (hdr, srhs) in enumerate(p.headers):
        hdr.check()
        expected = _expected_next(i, p)
        if srhs:
            if hdr.next_header != PROTO_ROUTING:
                raise InvariantViolation(
                    f"header {i} next_header {hdr.next_header} != 43 before SRH"
                )
            for j, srh in enumerate(srhs):
                bad = validate_srh(srh)
                if bad is not None and bad.code != "RawFillInvalid":
                    raise InvariantViolation(f"SRH {i}.{j}: {bad}")
                want = PROTO_ROUTING if j + 1 < len(srhs) else expected
                if want is not None and srh.next_header != want:
                    raise InvariantViolation(
                        f"SRH {i}.{j} next_header {srh.next_header} != {want}"
                    )
        elif expected is not None and hdr.next_header != expected:
            raise InvariantViolation(
                f"header {i} next_header {hdr.next_header} != {expected}"
            )


def encode_packet(p: Packet) -> bytes:
    """Serialize to wire bytes; recomputes payload_length, UDP length and
    checksum fields in place so that decode(encode(p)) == p."""
    check_packet(p)
    if isinstance(p.transport, Udp):
        udp = p.transport
        udp.length = udp.wire_length
        udp.checksum = udp_checksum(p)
        tail = _UDP_HDR.pack(udp.src_port, udp.dst_port, udp.length, udp.checksum)
        tail += udp.payload
    else:
        tail = bytes(p.transport)

    out = tail
    for hdr, srhs in reversed(p.headers):
        for srh in reversed(srhs):
            seg_blob = b"".join(srh.segments)
            out = (
                struct.pack(
                    ">BBBBBBH",
                    srh.next_header,
                    srh.hdr_ext_len,
                    srh.routing_type,
                    srh.segments_left,
                    srh.last_entry,
                    srh.flags,
                    srh.tag,
                )
                + seg_blob
                + srh.tlv_bytes
                + out
            )
        hdr.payload_length = len(out)
        out = (
            _V6_HDR.pack(
                (hdr.version << 28) | (hdr.traffic_class << 20) | hdr.flow_label,
                hdr.payload_length,
                hdr.next_header,
                hdr.hop_limit,
                hdr.src,
                hdr.dst,
            )
            + out
        )
    return out


def _parse_srh(buf: bytes, off: int) -> tuple[SegmentRoutingHeader, int]:
    if off + 8 > len(buf):
        raise ParseError(off, "SRH truncated")
    nh, hel, rtype, sl, le, flags, tag = struct.unpack_from(">BBBBBBH", buf, off)
    if rtype != ROUTING_TYPE_SRH:
        raise ParseError(off + 2, f"bad routing_type {rtype}")
    total = 8 * (hel + 1)
    if off + total > len(buf):
        raise ParseError(off, "SRH length exceeds buffer")
    nseg = le + 1
    if 8 + 16 * nseg > total:
        raise ParseError(off, "hdr_ext_len too small for segment list")
    if sl > le:
        raise ParseError(off + 3, f"segments_left {sl} > last_entry {le}")
    segs = [
        bytes(buf[off + 8 + 16 * i : off + 24 + 16 * i]) for i in range(nseg)
    ]
    tlv_region = bytes(buf[off + 8 + 16 * nseg : off + total])
    for _ in walk_tlvs(tlv_region):
        pass
    srh = SegmentRoutingHeader(
        segments=segs, segments_left=sl, next_header=nh,
        flags=flags, tag=tag, tlv_bytes=tlv_region,
    )
    return srh, off + total


def decode_packet(b: bytes) -> Packet:
    """Parse wire bytes into a Packet with a fresh PacketMeta.

    UDP checksums are verified warn-only (logged), so replayed or fuzzed
    byte streams stay usable.
    """
    headers: list[tuple[Ipv6Header, list[SegmentRoutingHeader]]] = []
    off = 0
    while True:
        if off + 40 > len(b):
            raise ParseError(off, "IPv6 header truncated")
        vtf, plen, nh, hlim, src, dst = _V6_HDR.unpack_from(b, off)
        version = vtf >> 28
        if version != 6:
            raise ParseError(off, f"bad version {version}")
        hdr = Ipv6Header(
            src=bytes(src), dst=bytes(dst), next_header=nh, hop_limit=hlim,
            traffic_class=(vtf >> 20) & 0xFF, flow_label=vtf & 0xFFFFF,
            payload_length=plen,
        )
        off += 40
        if plen != len(b) - off:
            raise ParseError(off - 36, f"payload_length {plen} != {len(b) - off}")
        srhs: list[SegmentRoutingHeader] = []
        while nh == PROTO_ROUTING:
            srh, off = _parse_srh(b, off)
            srhs.append(srh)
            nh = srh.next_header
        headers.append((hdr, srhs))
        if nh == PROTO_IPV6:
            continue
        if nh == PROTO_UDP:
            if off + 8 > len(b):
                raise ParseError(off, "UDP header truncated")
            sport, dport, ulen, csum = _UDP_HDR.unpack_from(b, off)
            if ulen != len(b) - off:
                raise ParseError(off + 4, f"UDP length {ulen} != {len(b) - off}")
            payload = bytes(b[off + 8 :])
            udp = Udp(sport, dport, payload, ulen, csum)
            pkt = Packet(headers=headers, transport=udp)
            ref = udp_checksum(pkt)
            if csum not in (0, ref):
                log.warning("UDP checksum mismatch: got %#06x want %#06x", csum, ref)
            return pkt
        # opaque transport, carried as raw octets
        return Packet(headers=headers, transport=bytes(b[off:]))


def format_hex_dump(data: bytes) -> str:
    """Offset-prefixed hex lines, 16 octets per line."""
    lines = []
    for base in range(0, len(data), 16):
        chunk = data[base : base + 16]
        lines.append(f"{base:04x}: " + " ".join(f"{x:02x}" for x in chunk))
    return "\n".join(lines) + "\n"


def parse_hex_dump(text: str) -> bytes:
    """Inverse of format_hex_dump; ignores blank and comment lines."""
    out = bytearray()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        _, _, rest = line.partition(":")
        out.extend(int(tok, 16) for tok in rest.split())
    return bytes(out)
