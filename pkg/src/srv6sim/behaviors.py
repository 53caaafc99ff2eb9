"""Native SRv6 endpoint functions and transit behaviours.

Each body mutates the packet in place and returns it; failures raise
BehaviorError carrying the drop reason the pipeline should report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .packet import (
    Address,
    InvariantViolation,
    Ipv6Header,
    PROTO_IPV6,
    PROTO_ROUTING,
    Packet,
    SegmentRoutingHeader,
    validate_srh,
)

DEFAULT_HOP_LIMIT = 64


class DropReason(Enum):
    HOP_LIMIT_EXCEEDED = "hop_limit_exceeded"
    NO_ROUTE = "no_route"
    NO_SRH = "no_srh"
    SEGMENTS_EXHAUSTED = "segments_exhausted"
    NOT_LAST_SEGMENT = "not_last_segment"
    NO_INNER_HEADER = "no_inner_header"
    INVALID_SRH_AFTER_PROGRAM = "invalid_srh_after_program"
    REDIRECT_WITHOUT_DESTINATION = "redirect_without_destination"
    PROGRAM_DROP = "program_drop"
    PROGRAM_ERROR = "program_error"
    INVARIANT = "invariant_violation"


@dataclass(frozen=True)
class Forward:
    link: str
    nexthop: Address


@dataclass(frozen=True)
class Drop:
    reason: DropReason
    detail: str = field(default="", compare=False)


@dataclass(frozen=True)
class LocalDeliver:
    pass


ForwardingDecision = Forward | Drop | LocalDeliver


class BehaviorError(Exception):
    def __init__(self, reason: DropReason, detail: str = ""):
        super().__init__(detail or reason.value)
        self.reason = reason
        self.detail = detail


# ---------------------------------------------------------------------------
# Behaviour descriptors, as bound to local SIDs / transit routes.

@dataclass(frozen=True)
class End:
    pass


@dataclass(frozen=True)
class EndX:
    nexthop: Address
    link: str


@dataclass(frozen=True)
class EndT:
    table: int


@dataclass(frozen=True)
class EndB6:
    srh: SegmentRoutingHeader


@dataclass(frozen=True)
class EndB6Encaps:
    srh: SegmentRoutingHeader
    src: Address


@dataclass(frozen=True)
class EndDT6:
    table: int


@dataclass(frozen=True)
class EndProgram:
    program: str


@dataclass(frozen=True)
class TransitInsert:
    srh: SegmentRoutingHeader


@dataclass(frozen=True)
class TransitEncaps:
    srh: SegmentRoutingHeader
    src: Address


@dataclass(frozen=True)
class TransitProgram:
    program: str


Behavior = (
    End | EndX | EndT | EndB6 | EndB6Encaps | EndDT6 | EndProgram
)
TransitBehavior = TransitInsert | TransitEncaps | TransitProgram


# ---------------------------------------------------------------------------
# Endpoint bodies.

def end(p: Packet) -> Packet:
    """Advance to the next segment: segments_left -= 1, dst = new active."""
    srh = p.outer_srh
    if srh is None:
        raise BehaviorError(DropReason.NO_SRH)
    if srh.segments_left == 0:
        raise BehaviorError(DropReason.SEGMENTS_EXHAUSTED)
    srh.segments_left -= 1
    p.outer_header.dst = srh.segments[srh.segments_left]
    return p


def end_x(p: Packet, nexthop: Address, link: str) -> Packet:
    end(p)
    p.meta.pending_destination = nexthop
    p.meta.pending_link = link
    return p


def end_t(p: Packet, table: int) -> Packet:
    end(p)
    p.meta.pending_table = table
    return p


def _checked(srh: SegmentRoutingHeader) -> SegmentRoutingHeader:
    bad = validate_srh(srh)
    if bad is not None:
        raise InvariantViolation(str(bad))
    return srh.copy()


def insert_srh(p: Packet, new_srh: SegmentRoutingHeader) -> Packet:
    """Splice an SRH directly after the outer IPv6 header (no advance)."""
    new = _checked(new_srh)
    hdr, srhs = p.headers[0]
    new.next_header = PROTO_ROUTING if srhs else hdr.next_header
    srhs.insert(0, new)
    hdr.next_header = PROTO_ROUTING
    hdr.dst = new.active_segment
    hdr.payload_length = p.wire_size() - 40
    return p


def end_b6(p: Packet, new_srh: SegmentRoutingHeader) -> Packet:
    end(p)
    return insert_srh(p, new_srh)


def encapsulate(
    p: Packet,
    outer_srh: SegmentRoutingHeader,
    outer_src: Address,
    hop_limit: int = DEFAULT_HOP_LIMIT,
) -> Packet:
    """Wrap the whole packet in a fresh IPv6 header carrying outer_srh."""
    new = _checked(outer_srh)
    new.next_header = PROTO_IPV6
    hdr = Ipv6Header(
        src=outer_src,
        dst=new.active_segment,
        next_header=PROTO_ROUTING,
        hop_limit=hop_limit,
        payload_length=new.wire_length + p.wire_size(),
    )
    p.headers.insert(0, (hdr, [new]))
    return p


def end_b6_encaps(
    p: Packet, outer_srh: SegmentRoutingHeader, outer_src: Address
) -> Packet:
    end(p)
    return encapsulate(p, outer_srh, outer_src)


def end_dt6(p: Packet, table: int) -> Packet:
    """Decapsulate the outer IPv6 header (+SRH) at the last segment."""
    srh = p.outer_srh
    if srh is not None and srh.segments_left != 0:
        raise BehaviorError(DropReason.NOT_LAST_SEGMENT)
    if len(p.headers) < 2:
        raise BehaviorError(DropReason.NO_INNER_HEADER)
    p.headers.pop(0)
    p.meta.pending_table = table
    return p


# ---------------------------------------------------------------------------
# Transit bodies.

def t_insert(p: Packet, srh: SegmentRoutingHeader) -> Packet:
    """Insert an SRH into a plain IPv6 packet, appending the original
    destination as the final segment and activating the first configured
    segment. Packets already carrying an SRH are rejected."""
    if p.outer_srh is not None:
        raise InvariantViolation("t_insert on a packet already carrying an SRH")
    new = _checked(srh)
    orig_dst = p.outer_header.dst
    new.segments = [orig_dst] + list(new.segments)
    new.segments_left = new.last_entry
    return insert_srh(p, new)


def t_encaps(
    p: Packet,
    srh: SegmentRoutingHeader,
    src: Address,
    hop_limit: int = DEFAULT_HOP_LIMIT,
) -> Packet:
    return encapsulate(p, srh, src, hop_limit)
