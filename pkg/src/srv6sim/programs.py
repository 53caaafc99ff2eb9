"""Pluggable packet-program interface.

Programs are host-language callables registered by name. They receive a
ProgramContext with full read access to the packet and may mutate it only
through the helpers below, which enforce the same write restrictions the
in-kernel counterpart would. The returned outcome (OK / DROP / REDIRECT)
drives post-program forwarding, with the modified SRH revalidated before
the packet re-enters the pipeline.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable

from . import behaviors
from .behaviors import (
    BehaviorError,
    Drop,
    DropReason,
    EndB6,
    EndB6Encaps,
    EndDT6,
    EndT,
    EndX,
    ForwardingDecision,
)
from .packet import Address, InvariantViolation, Packet, SegmentRoutingHeader, validate_srh

if TYPE_CHECKING:
    from .dataplane import Node

EVENT_QUEUE_CAPACITY = 4096
MAX_EVENT_PAYLOAD = 256


class Outcome(Enum):
    OK = 0
    DROP = 1
    REDIRECT = 2


class Hook(Enum):
    ENDPOINT = "endpoint"
    TRANSIT = "transit"


class HelperError(Exception):
    """Raised by helpers on contract violations; programs may catch it."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


class MapStore:
    """Named key/value stores with fixed octet widths, one per node."""

    def __init__(self):
        self._maps: dict[str, tuple[int, int, dict[bytes, bytes]]] = {}

    def create(self, name: str, key_size: int, value_size: int) -> None:
        if name not in self._maps:
            self._maps[name] = (key_size, value_size, {})

    def get(self, name: str, key: bytes) -> bytes | None:
        try:
            ksize, _, data = self._maps[name]
        except KeyError:
            raise HelperError("unknown_map", name) from None
        if len(key) != ksize:
            raise HelperError("width_mismatch", f"key {len(key)} != {ksize}")
        return data.get(key)

    def put(self, name: str, key: bytes, value: bytes) -> None:
        try:
            ksize, vsize, data = self._maps[name]
        except KeyError:
            raise HelperError("unknown_map", name) from None
        if len(key) != ksize:
            raise HelperError("width_mismatch", f"key {len(key)} != {ksize}")
        if len(value) != vsize:
            raise HelperError("width_mismatch", f"value {len(value)} != {vsize}")
        data[key] = value


@dataclass(slots=True)
class EmittedEvent:
    node: str
    timestamp_ns: int
    payload: bytes


class EventQueue:
    """Bounded one-producer queue; overflow drops the oldest event."""

    def __init__(self, capacity: int = EVENT_QUEUE_CAPACITY):
        self.capacity = capacity
        self._events: deque[EmittedEvent] = deque()
        self.dropped = 0
        self.emitted = 0

    def __len__(self) -> int:
        return len(self._events)

    def emit(self, event: EmittedEvent) -> None:
        if len(self._events) >= self.capacity:
            self._events.popleft()
            self.dropped += 1
        self._events.append(event)
        self.emitted += 1

    def drain(self) -> list[EmittedEvent]:
        out = list(self._events)
        self._events.clear()
        return out


@dataclass(slots=True)
class ProgramContext:
    packet: Packet
    hook: Hook
    node: str
    now_ns: int
    event_sink: EventQueue
    maps: MapStore
    dataplane: "Node"
    pending_action_taken: bool = False


Program = Callable[[ProgramContext], Outcome]

# Program registry: name -> factory(params dict) -> Program. Scenario
# files reference these names; use cases register theirs on import.
PROGRAM_FACTORIES: dict[str, Callable[[dict], Program]] = {}


def register_program(name: str):
    def deco(factory: Callable[[dict], Program]):
        PROGRAM_FACTORIES[name] = factory
        return factory

    return deco


def make_program(name: str, params: dict | None = None) -> Program:
    try:
        factory = PROGRAM_FACTORIES[name]
    except KeyError:
        raise KeyError(f"unknown program {name!r}") from None
    return factory(params or {})


# ---------------------------------------------------------------------------
# Helpers.

_SRH_FIXED = 8  # next_header, hdr_ext_len, routing_type, sl, le, flags, tag


def _outer_srh(ctx: ProgramContext) -> SegmentRoutingHeader:
    srh = ctx.packet.outer_srh
    if srh is None:
        raise HelperError("no_srh")
    return srh


def helper_store_bytes(ctx: ProgramContext, offset: int, data: bytes) -> None:
    """Indirect write into the SRH, restricted to flags, tag and the TLV
    region; anything overlapping the structural fields or the segment
    list raises write_out_of_bounds and leaves the packet untouched."""
    srh = _outer_srh(ctx)
    if not data:
        return
    end = offset + len(data)
    seg_end = _SRH_FIXED + 16 * len(srh.segments)
    total = seg_end + len(srh.tlv_bytes)
    in_flags_tag = 5 <= offset and end <= 8
    in_tlv = seg_end <= offset and end <= total
    if not (in_flags_tag or in_tlv):
        raise HelperError(
            "write_out_of_bounds", f"[{offset}, {end}) not writable"
        )
    if in_flags_tag:
        blob = bytearray(struct.pack(">BH", srh.flags, srh.tag))
        blob[offset - 5 : end - 5] = data
        srh.flags, srh.tag = struct.unpack(">BH", bytes(blob))
    else:
        region = bytearray(srh.tlv_bytes)
        region[offset - seg_end : end - seg_end] = data
        srh.tlv_bytes = bytes(region)
    ctx.packet.meta.srh_dirty = True


def helper_adjust_srh(ctx: ProgramContext, delta_octets: int) -> None:
    """Grow (zero-filled) or shrink the TLV region at its start, keeping
    hdr_ext_len and the enclosing payload_length consistent."""
    srh = _outer_srh(ctx)
    if delta_octets % 8 != 0:
        raise HelperError("bad_delta", f"{delta_octets} not a multiple of 8")
    if delta_octets < 0 and -delta_octets > len(srh.tlv_bytes):
        raise HelperError("bad_delta", "shrink below zero TLV octets")
    new_len = len(srh.tlv_bytes) + delta_octets
    if 2 * len(srh.segments) + new_len // 8 > 0xFF:
        raise HelperError("size_overflow", "hdr_ext_len would exceed 255")
    if delta_octets >= 0:
        srh.tlv_bytes = b"\x00" * delta_octets + srh.tlv_bytes
    else:
        srh.tlv_bytes = srh.tlv_bytes[-delta_octets:]
    # the outer SRH sits directly under the outermost header
    ctx.packet.headers[0][0].payload_length += delta_octets
    ctx.packet.meta.srh_dirty = True


def helper_timestamp(ctx: ProgramContext) -> int:
    return ctx.now_ns


def helper_ecmp_nexthops(ctx: ProgramContext, addr: Address) -> list[tuple[Address, str]]:
    """All ECMP nexthops of the longest match in the default table."""
    try:
        return ctx.dataplane.fib_ecmp_list(addr, table=0)
    except BehaviorError:
        raise HelperError("no_route") from None


def _resolve_pending(ctx: ProgramContext, table: int) -> None:
    """Eagerly resolve the current destination into the packet metadata,
    mirroring the kernel helper's immediate FIB lookup. A destination
    local to the node is marked with pending_link None."""
    p = ctx.packet
    dst = p.outer_header.dst
    if dst in ctx.dataplane.local_addrs:
        p.meta.pending_destination = dst
        p.meta.pending_link = None
        return
    nh, link = ctx.dataplane.fib_lookup(dst, table, flow_key(p))
    p.meta.pending_destination = nh
    p.meta.pending_link = link


def helper_action(ctx: ProgramContext, action) -> None:
    """Apply a basic SRv6 function body (no re-advance: the endpoint hook
    already advanced the SRH). Actions needing a FIB lookup perform it now
    and store the result in the packet metadata, so a REDIRECT outcome can
    forward without the default lookup. One action per program run."""
    if ctx.hook is not Hook.ENDPOINT:
        raise HelperError("wrong_hook", "helper_action is endpoint-only")
    if ctx.pending_action_taken:
        raise HelperError("action_already_taken")
    p = ctx.packet
    meta = p.meta
    try:
        if isinstance(action, EndX):
            meta.pending_destination = action.nexthop
            meta.pending_link = action.link
        elif isinstance(action, EndT):
            meta.pending_table = action.table
            _resolve_pending(ctx, action.table)
        elif isinstance(action, EndB6):
            behaviors.insert_srh(p, action.srh)
            meta.srh_dirty = True
        elif isinstance(action, EndB6Encaps):
            behaviors.encapsulate(p, action.srh, action.src)
            meta.srh_dirty = True
        elif isinstance(action, EndDT6):
            behaviors.end_dt6(p, action.table)
            _resolve_pending(ctx, action.table)
        else:
            raise HelperError("bad_action", repr(action))
    except BehaviorError as exc:
        raise HelperError(exc.reason.value, exc.detail) from None
    except InvariantViolation as exc:
        raise HelperError("invariant_violation", str(exc)) from None
    ctx.pending_action_taken = True


def helper_push_encap(
    ctx: ProgramContext,
    mode: str,
    srh: SegmentRoutingHeader,
    outer_src: Address | None = None,
) -> None:
    """Insert an SRH or encapsulate pure IPv6 traffic (transit hook only)."""
    if ctx.hook is not Hook.TRANSIT:
        raise HelperError("wrong_hook", "helper_push_encap is transit-only")
    try:
        if mode == "insert":
            behaviors.t_insert(ctx.packet, srh)
        elif mode == "encaps":
            if outer_src is None:
                outer_src = ctx.dataplane.addresses[0]
            behaviors.t_encaps(ctx.packet, srh, outer_src)
        else:
            raise HelperError("bad_mode", mode)
    except InvariantViolation as exc:
        raise HelperError("invariant_violation", str(exc)) from None
    ctx.packet.meta.srh_dirty = True


def map_get(ctx: ProgramContext, name: str, key: bytes) -> bytes | None:
    return ctx.maps.get(name, key)


def map_put(ctx: ProgramContext, name: str, key: bytes, value: bytes) -> None:
    ctx.maps.put(name, key, value)


def emit_event(ctx: ProgramContext, payload: bytes) -> None:
    if len(payload) > MAX_EVENT_PAYLOAD:
        raise HelperError("payload_too_large", str(len(payload)))
    ctx.event_sink.emit(EmittedEvent(ctx.node, ctx.now_ns, payload))


# ---------------------------------------------------------------------------
# Execution.

def flow_key(p: Packet) -> bytes:
    """Flow identity for ECMP: outer addresses and flow label, plus the
    transport ports when the packet is plain UDP."""
    hdr = p.outer_header
    udp = p.transport
    if len(p.headers) == 1 and not isinstance(udp, bytes):
        ports = struct.pack(">HH", udp.src_port, udp.dst_port)
    else:
        ports = b"\x00\x00\x00\x00"
    return hdr.src + hdr.dst + struct.pack(">I", hdr.flow_label) + ports


def finalize(ctx: ProgramContext, outcome: Outcome) -> ForwardingDecision:
    """Turn a program outcome into a forwarding decision.

    A dirty SRH is revalidated first. OK performs the regular lookup on
    the current destination (honouring a pending table, discarding any
    pending destination); REDIRECT requires a destination already set in
    the metadata and bypasses the lookup.
    """
    p = ctx.packet
    if p.meta.srh_dirty:
        srh = p.outer_srh
        if srh is not None:
            bad = validate_srh(srh)
            if bad is not None:
                return Drop(DropReason.INVALID_SRH_AFTER_PROGRAM, str(bad))
    if outcome is Outcome.DROP:
        return Drop(DropReason.PROGRAM_DROP)
    if outcome is Outcome.REDIRECT:
        dest = p.meta.pending_destination
        if dest is None:
            return Drop(DropReason.REDIRECT_WITHOUT_DESTINATION)
        if p.meta.pending_link is None:
            if dest in ctx.dataplane.local_addrs:
                return behaviors.LocalDeliver()
            return Drop(DropReason.REDIRECT_WITHOUT_DESTINATION, "no egress link")
        return behaviors.Forward(p.meta.pending_link, dest)
    # OK: the default lookup overrides any destination a helper stored
    p.meta.pending_destination = None
    p.meta.pending_link = None
    return ctx.dataplane.finish_forwarding(p)


def _make_context(node: "Node", packet: Packet, now: int, hook: Hook) -> ProgramContext:
    return ProgramContext(
        packet=packet,
        hook=hook,
        node=node.id,
        now_ns=now,
        event_sink=node.events,
        maps=node.maps,
        dataplane=node,
    )


def run_endpoint_program(
    node: "Node", program: Program, packet: Packet, now: int
) -> ForwardingDecision:
    """End.BPF analog: advance the SRH, run the program, finalize."""
    srh = packet.outer_srh
    if srh is None:
        return Drop(DropReason.NO_SRH)
    if srh.segments_left == 0:
        return Drop(DropReason.SEGMENTS_EXHAUSTED)
    behaviors.end(packet)
    ctx = _make_context(node, packet, now, Hook.ENDPOINT)
    try:
        outcome = program(ctx)
    except HelperError as exc:
        return Drop(DropReason.PROGRAM_ERROR, str(exc))
    return finalize(ctx, outcome)


def run_transit_program(
    node: "Node", program: Program, packet: Packet, now: int
) -> ForwardingDecision:
    """LWT hook analog: no advance, then the same finalize contract."""
    ctx = _make_context(node, packet, now, Hook.TRANSIT)
    try:
        outcome = program(ctx)
    except HelperError as exc:
        return Drop(DropReason.PROGRAM_ERROR, str(exc))
    return finalize(ctx, outcome)


@register_program("noop")
def _noop_factory(params: dict) -> Program:
    """Program that does nothing: the BPF reimplementation of End."""

    def run(ctx: ProgramContext) -> Outcome:
        return Outcome.OK

    return run
