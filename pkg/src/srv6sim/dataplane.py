"""Per-node dataplane: routing tables, local SIDs, transit routes and the
ingress pipeline that ties them together."""

from __future__ import annotations

from dataclasses import dataclass

from . import behaviors, programs
from .behaviors import (
    Behavior,
    BehaviorError,
    Drop,
    DropReason,
    End,
    EndB6,
    EndB6Encaps,
    EndProgram,
    EndDT6,
    EndT,
    EndX,
    Forward,
    ForwardingDecision,
    LocalDeliver,
    TransitBehavior,
    TransitEncaps,
    TransitInsert,
    TransitProgram,
)
from .fib import FibEntry, PrefixTable, select_nexthop
from .packet import (
    Address,
    InvariantViolation,
    PROTO_ICMPV6,
    Packet,
    Ipv6Header,
    encode_packet,
)
from .programs import EventQueue, MapStore, Program, flow_key

ICMP_TIME_EXCEEDED = 3


@dataclass(frozen=True)
class LocalSidEntry:
    sid: Address
    behavior: Behavior


@dataclass(frozen=True)
class TransitEntry:
    prefix: Address
    plen: int
    behavior: TransitBehavior


class Node:
    """A router/host with static tables, mutated only during setup."""

    def __init__(self, node_id: str, addresses: list[Address], index: int = 0):
        self.id = node_id
        self.index = index
        self.addresses = list(addresses)
        self.local_addrs = set(addresses)
        self.tables: dict[int, PrefixTable] = {0: PrefixTable()}
        self.sids: dict[Address, LocalSidEntry] = {}
        self.transits = PrefixTable()
        self.programs: dict[str, Program] = {}
        self.maps = MapStore()
        self.events = EventQueue()
        self.originated: list[Packet] = []

    # -- table management ---------------------------------------------------

    def fib_insert(self, entry: FibEntry) -> None:
        entry.check()
        table = self.tables.setdefault(entry.table_id, PrefixTable())
        table.insert(entry.prefix, entry.plen, entry)

    def fib_remove(self, prefix: Address, plen: int, table: int = 0) -> bool:
        t = self.tables.get(table)
        return t.remove(prefix, plen) if t else False

    def add_sid(self, sid: Address, behavior: Behavior) -> None:
        self.sids[sid] = LocalSidEntry(sid, behavior)
        self.local_addrs.add(sid)

    def add_transit(self, prefix: Address, plen: int, behavior: TransitBehavior) -> None:
        self.transits.insert(prefix, plen, TransitEntry(prefix, plen, behavior))

    def add_program(self, name: str, program: Program) -> None:
        self.programs[name] = program

    # -- lookups ------------------------------------------------------------

    def fib_lookup(
        self, addr: Address, table: int, fkey: bytes
    ) -> tuple[Address, str]:
        t = self.tables.get(table)
        entry = t.lookup(addr) if t else None
        if entry is None:
            raise BehaviorError(DropReason.NO_ROUTE)
        return select_nexthop(entry.nexthops, fkey)

    def fib_ecmp_list(self, addr: Address, table: int = 0) -> list[tuple[Address, str]]:
        t = self.tables.get(table)
        entry = t.lookup(addr) if t else None
        if entry is None:
            raise BehaviorError(DropReason.NO_ROUTE)
        return list(entry.nexthops)

    # -- pipeline -----------------------------------------------------------

    def finish_forwarding(self, p: Packet) -> ForwardingDecision:
        """Common tail: pending destination wins, then local delivery,
        then a FIB lookup honouring a pending table."""
        meta = p.meta
        if meta.pending_destination is not None:
            return Forward(meta.pending_link, meta.pending_destination)
        dst = p.outer_header.dst
        if dst in self.local_addrs:
            return LocalDeliver()
        table = meta.pending_table if meta.pending_table is not None else 0
        try:
            nh, link = self.fib_lookup(dst, table, flow_key(p))
        except BehaviorError as exc:
            return Drop(exc.reason, exc.detail)
        return Forward(link, nh)

    def process_ingress(self, p: Packet, now: int) -> ForwardingDecision:
        """Dispatch one received packet: hop-limit handling, local SID
        match, transit match, then plain forwarding."""
        meta = p.meta
        meta.rx_timestamp_ns = now
        meta.ingress_node = self.id
        hdr = p.outer_header
        hdr.hop_limit -= 1
        if hdr.hop_limit <= 0:
            hdr.hop_limit = 0
            self._emit_time_exceeded(p)
            return Drop(DropReason.HOP_LIMIT_EXCEEDED)
        dst = hdr.dst
        sid = self.sids.get(dst)
        if sid is not None:
            return self._dispatch_sid(sid, p, now)
        entry = self.transits.lookup(dst)
        if entry is not None:
            return self._dispatch_transit(entry, p, now)
        return self.finish_forwarding(p)

    def _dispatch_sid(
        self, sid: LocalSidEntry, p: Packet, now: int
    ) -> ForwardingDecision:
        b = sid.behavior
        try:
            if isinstance(b, End):
                behaviors.end(p)
            elif isinstance(b, EndX):
                behaviors.end_x(p, b.nexthop, b.link)
            elif isinstance(b, EndT):
                behaviors.end_t(p, b.table)
            elif isinstance(b, EndB6):
                behaviors.end_b6(p, b.srh)
            elif isinstance(b, EndB6Encaps):
                behaviors.end_b6_encaps(p, b.srh, b.src)
            elif isinstance(b, EndDT6):
                behaviors.end_dt6(p, b.table)
            elif isinstance(b, EndProgram):
                program = self.programs.get(b.program)
                if program is None:
                    return Drop(DropReason.PROGRAM_ERROR, f"no program {b.program!r}")
                return programs.run_endpoint_program(self, program, p, now)
            else:
                return Drop(DropReason.PROGRAM_ERROR, f"bad behavior {b!r}")
        except BehaviorError as exc:
            return Drop(exc.reason, exc.detail)
        except InvariantViolation as exc:
            return Drop(DropReason.INVARIANT, str(exc))
        return self.finish_forwarding(p)

    def _dispatch_transit(
        self, entry: TransitEntry, p: Packet, now: int
    ) -> ForwardingDecision:
        b = entry.behavior
        try:
            if isinstance(b, TransitInsert):
                behaviors.t_insert(p, b.srh)
            elif isinstance(b, TransitEncaps):
                behaviors.t_encaps(p, b.srh, b.src)
            elif isinstance(b, TransitProgram):
                program = self.programs.get(b.program)
                if program is None:
                    return Drop(DropReason.PROGRAM_ERROR, f"no program {b.program!r}")
                return programs.run_transit_program(self, program, p, now)
            else:
                return Drop(DropReason.PROGRAM_ERROR, f"bad behavior {b!r}")
        except BehaviorError as exc:
            return Drop(exc.reason, exc.detail)
        except InvariantViolation as exc:
            return Drop(DropReason.INVARIANT, str(exc))
        return self.finish_forwarding(p)

    def _emit_time_exceeded(self, offender: Packet) -> None:
        """Queue a minimal ICMPv6 time-exceeded toward the packet source:
        a 4-octet type tag followed by the offender's first 64 octets."""
        if not self.addresses:
            return
        src = offender.outer_header.src
        if src == bytes(16):
            return
        try:
            quoted = encode_packet(offender)[:64]
        except Exception:
            quoted = b""
        hdr = Ipv6Header(
            src=self.addresses[0], dst=src, next_header=PROTO_ICMPV6, hop_limit=64
        )
        body = bytes((ICMP_TIME_EXCEEDED, 0, 0, 0)) + quoted
        self.originated.append(Packet(headers=[(hdr, [])], transport=body))
