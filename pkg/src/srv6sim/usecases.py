"""The three network functions built on the program API, with their
companion daemons: passive delay measurement, hybrid-access link
aggregation with delay compensation, and ECMP nexthop discovery."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .packet import (
    Address,
    Ipv6Header,
    PROTO_ROUTING,
    Packet,
    SegmentRoutingHeader,
    Tlv,
    Udp,
    encode_tlvs,
    find_tlv,
    make_udp_packet,
    ntop,
)
from .programs import (
    EventQueue,
    HelperError,
    Outcome,
    Program,
    ProgramContext,
    emit_event,
    helper_action,
    helper_ecmp_nexthops,
    helper_push_encap,
    helper_timestamp,
    map_get,
    map_put,
    register_program,
)
from .behaviors import EndDT6
from .sim import Daemon, Simulation

# Local experiment TLV codes; the SRH registry assigns none for these.
TLV_TYPE_DM = 1
TLV_TYPE_CONTROLLER = 2

DM_EVENT_LEN = 38  # path_id:4 tx:8 rx:8 ctrl_addr:16 ctrl_port:2


def dm_tlv(tx_ts_ns: int) -> Tlv:
    return Tlv(TLV_TYPE_DM, struct.pack(">Q", tx_ts_ns))


def controller_tlv(addr: Address, port: int) -> Tlv:
    return Tlv(TLV_TYPE_CONTROLLER, addr + struct.pack(">H", port))


def read_dm_tlv(srh: SegmentRoutingHeader) -> int | None:
    tlv = find_tlv(srh, TLV_TYPE_DM)
    if tlv is None or tlv.length != 8:
        return None
    return struct.unpack(">Q", tlv.value)[0]


def read_controller_tlv(srh: SegmentRoutingHeader) -> tuple[Address, int] | None:
    tlv = find_tlv(srh, TLV_TYPE_CONTROLLER)
    if tlv is None or tlv.length != 18:
        return None
    return bytes(tlv.value[:16]), struct.unpack(">H", tlv.value[16:])[0]


@dataclass(slots=True)
class DelayRecord:
    path_id: int
    tx_ts_ns: int
    rx_ts_ns: int
    owd_ns: int
    controller: tuple[Address, int]


def encode_dm_event(
    path_id: int, tx_ns: int, rx_ns: int, ctrl: tuple[Address, int]
) -> bytes:
    return struct.pack(">IQQ", path_id, tx_ns, rx_ns) + ctrl[0] + struct.pack(
        ">H", ctrl[1]
    )


def decode_dm_event(payload: bytes) -> DelayRecord | None:
    if len(payload) != DM_EVENT_LEN:
        return None
    path_id, tx, rx = struct.unpack_from(">IQQ", payload)
    addr = bytes(payload[20:36])
    (port,) = struct.unpack_from(">H", payload, 36)
    return DelayRecord(path_id, tx, rx, rx - tx, (addr, port))


def owd_collector_drain(queue: EventQueue) -> tuple[list[DelayRecord], int]:
    """Decode all queued delay events; returns (records, malformed count)."""
    records = []
    malformed = 0
    for ev in queue.drain():
        rec = decode_dm_event(ev.payload)
        if rec is None:
            malformed += 1
        else:
            records.append(rec)
    return records, malformed


# ---------------------------------------------------------------------------
# Delay-measurement programs.

DM_COUNTER_MAP = "dm_counter"


@register_program("dm_transit")
def dm_transit_factory(params: dict) -> Program:
    """Transit program sampling every Nth packet toward a route into a
    DM-stamped SRv6 encapsulation; all other packets pass untouched."""
    ratio = int(params.get("ratio", 100))
    if ratio < 1:
        raise ValueError("probing ratio must be >= 1")
    path_srh: SegmentRoutingHeader = params["path_srh"]
    ctrl_addr: Address = params["controller_addr"]
    ctrl_port = int(params.get("controller_port", 9000))
    route_id = int(params.get("route_id", 0))
    outer_src: Address | None = params.get("outer_src")
    key = struct.pack(">I", route_id)

    def run(ctx: ProgramContext) -> Outcome:
        ctx.maps.create(DM_COUNTER_MAP, 4, 8)
        raw = map_get(ctx, DM_COUNTER_MAP, key)
        counter = struct.unpack(">Q", raw)[0] if raw else 0
        map_put(ctx, DM_COUNTER_MAP, key, struct.pack(">Q", counter + 1))
        if counter % ratio != 0:
            return Outcome.OK
        srh = path_srh.copy()
        srh.tlv_bytes = encode_tlvs(
            dm_tlv(helper_timestamp(ctx)), controller_tlv(ctrl_addr, ctrl_port)
        )
        try:
            helper_push_encap(ctx, "encaps", srh, outer_src)
        except HelperError:
            # a failed probe must never harm the underlying traffic
            return Outcome.OK
        return Outcome.OK

    return run


@register_program("end_dm")
def end_dm_factory(params: dict) -> Program:
    """Path-end delay measurement.

    At the last segment (one-way mode) the TX/RX timestamps and the
    controller coordinates are emitted to the node's event queue, the
    outer header is decapsulated and the inner packet forwarded. With
    segments remaining (two-way mode) the probe is forwarded toward the
    next segment with its DM TLV intact.
    """
    path_id = int(params.get("path_id", 0))
    table = int(params.get("table", 0))

    def run(ctx: ProgramContext) -> Outcome:
        srh = ctx.packet.outer_srh
        if srh is None:
            return Outcome.DROP
        tx = read_dm_tlv(srh)
        ctrl = read_controller_tlv(srh)
        if tx is None or ctrl is None:
            return Outcome.DROP
        if srh.segments_left > 0:
            return Outcome.OK  # two-way probe: leave the TLVs alone
        rx = ctx.packet.meta.rx_timestamp_ns
        emit_event(ctx, encode_dm_event(path_id, tx, rx, ctrl))
        try:
            helper_action(ctx, EndDT6(table))
        except HelperError:
            return Outcome.DROP
        return Outcome.REDIRECT

    return run


class OwdCollector(Daemon):
    """Drains delay events and relays each to its controller as a UDP
    datagram with the event payload carried verbatim."""

    def __init__(self, daemon_id: str, node: str, interval_ns: int = 50_000_000):
        super().__init__(daemon_id, interval_ns)
        self.node = node
        self.malformed = 0
        self.relayed = 0

    def tick(self, sim: Simulation, now: int) -> None:
        node = sim.nodes[self.node]
        records, bad = owd_collector_drain(node.events)
        self.malformed += bad
        for rec in records:
            addr, port = rec.controller
            pkt = make_udp_packet(
                node.addresses[0], addr,
                encode_dm_event(rec.path_id, rec.tx_ts_ns, rec.rx_ts_ns, rec.controller),
                src_port=9000, dst_port=port,
            )
            self.relayed += 1
            sim.send(self.node, pkt)


class DelayCollector:
    """Controller-side socket handler accumulating DelayRecords."""

    def __init__(self):
        self.records: list[DelayRecord] = []
        self.malformed = 0

    def __call__(self, p: Packet, now: int) -> None:
        if not isinstance(p.transport, Udp):
            return
        rec = decode_dm_event(p.transport.payload)
        if rec is None:
            self.malformed += 1
        else:
            self.records.append(rec)


# ---------------------------------------------------------------------------
# Hybrid access: interleaved WRR over two paths.

WRR_STATE_MAP = "wrr_state"


def iwrr_schedule(weight_a: int, weight_b: int) -> tuple[int, ...]:
    """Interleaved WRR cycle: round r serves every path with weight >= r."""
    if weight_a < 1 or weight_b < 1:
        raise ValueError("weights must be positive")
    out = []
    for r in range(1, max(weight_a, weight_b) + 1):
        if weight_a >= r:
            out.append(0)
        if weight_b >= r:
            out.append(1)
    return tuple(out)


def reduce_weights(weight_a: int, weight_b: int) -> tuple[int, int]:
    import math

    g = math.gcd(weight_a, weight_b)
    return weight_a // g, weight_b // g


@register_program("wrr")
def wrr_factory(params: dict) -> Program:
    """Per-packet interleaved weighted round-robin across two path SRHs,
    with the cursor and per-path counts persisted in a map."""
    srh_a: SegmentRoutingHeader = params["srh_a"]
    srh_b: SegmentRoutingHeader = params["srh_b"]
    wa, wb = params.get("weights", (1, 1))
    wa, wb = reduce_weights(int(wa), int(wb))
    route_id = int(params.get("route_id", 0))
    outer_src: Address | None = params.get("outer_src")
    schedule = iwrr_schedule(wa, wb)
    key = struct.pack(">I", route_id)

    def run(ctx: ProgramContext) -> Outcome:
        ctx.maps.create(WRR_STATE_MAP, 4, 16)
        try:
            raw = map_get(ctx, WRR_STATE_MAP, key)
            if raw:
                cursor, swa, swb, count_a, count_b = struct.unpack(">IHHII", raw)
            else:
                cursor, swa, swb, count_a, count_b = 0, wa, wb, 0, 0
            pick = schedule[cursor % len(schedule)]
            cursor = (cursor + 1) % len(schedule)
            if pick == 0:
                count_a += 1
            else:
                count_b += 1
            map_put(
                ctx, WRR_STATE_MAP, key,
                struct.pack(">IHHII", cursor, swa, swb, count_a, count_b),
            )
        except HelperError:
            return Outcome.DROP
        srh = (srh_a if pick == 0 else srh_b).copy()
        try:
            helper_push_encap(ctx, "encaps", srh, outer_src)
        except HelperError:
            return Outcome.DROP
        return Outcome.OK

    return run


def wrr_counts(node, route_id: int = 0) -> tuple[int, int]:
    """Per-path packet counts accumulated by the scheduler state map."""
    raw = node.maps.get(WRR_STATE_MAP, struct.pack(">I", route_id))
    if not raw:
        return 0, 0
    _, _, _, count_a, count_b = struct.unpack(">IHHII", raw)
    return count_a, count_b


# ---------------------------------------------------------------------------
# Two-way delay probing and delay compensation.

@dataclass
class CompensatorState:
    alpha: float = 0.3
    probe_interval_ns: int = 100_000_000
    ewma: dict[str, float] = field(default_factory=dict)
    applied_delay_ns: int = 0
    fast_link: str | None = None


def compensator_update(
    state: CompensatorState, link: str, twd_sample_ns: float
) -> CompensatorState:
    """Fold one two-way-delay sample into the per-link EWMA and recompute
    the delay to apply on the faster link: half the EWMA difference."""
    if twd_sample_ns < 0:
        twd_sample_ns = 0
    prev = state.ewma.get(link)
    if prev is None:
        state.ewma[link] = float(twd_sample_ns)
    else:
        state.ewma[link] = state.alpha * twd_sample_ns + (1 - state.alpha) * prev
    if len(state.ewma) >= 2:
        fast = min(state.ewma, key=lambda k: (state.ewma[k], k))
        slow = max(state.ewma, key=lambda k: (state.ewma[k], k))
        state.fast_link = fast
        state.applied_delay_ns = max(
            0, int((state.ewma[slow] - state.ewma[fast]) / 2)
        )
    return state


@dataclass
class ProbeLink:
    link: str
    dm_sid: Address      # per-link End.DM SID on the far end
    return_addr: Address  # per-link local address the probe returns to


class TwdProber(Daemon):
    """Aggregation-box daemon: sends a two-way probe per link each
    interval, updates the EWMA difference and (when compensation is on)
    delays the faster link's egress by half the difference.

    The currently applied delay is subtracted from fast-link samples
    before the EWMA update so the measurement tracks the intrinsic link
    delay rather than the compensator's own output.
    """

    def __init__(
        self,
        daemon_id: str,
        node: str,
        links: list[ProbeLink],
        interval_ns: int = 100_000_000,
        alpha: float = 0.3,
        compensate: bool = True,
        probe_port: int = 9100,
    ):
        if len(links) != 2:
            raise ValueError("TwdProber aggregates exactly two links")
        super().__init__(daemon_id, interval_ns)
        self.node = node
        self.links = links
        self.compensate = compensate
        self.probe_port = probe_port
        self.state = CompensatorState(alpha=alpha, probe_interval_ns=interval_ns)
        self.applied: dict[str, int] = {pl.link: 0 for pl in links}
        self.history: list[tuple[int, str, int]] = []
        self.sent = 0
        self.received = 0

    def setup(self, sim: Simulation) -> None:
        for pl in self.links:
            sim.bind(pl.return_addr, self._receiver(sim, pl))

    def _receiver(self, sim: Simulation, pl: ProbeLink):
        def on_probe(p: Packet, now: int) -> None:
            srh = p.outer_srh
            if srh is None:
                return
            tx = read_dm_tlv(srh)
            if tx is None:
                return
            self.received += 1
            sample = (now - tx) - self.applied.get(pl.link, 0)
            compensator_update(self.state, pl.link, sample)
            if self.compensate and self.state.fast_link is not None:
                for other in self.links:
                    target = (
                        self.state.applied_delay_ns
                        if other.link == self.state.fast_link
                        else 0
                    )
                    if self.applied[other.link] != target:
                        sim.set_qdisc_delay(self.node, other.link, target)
                        self.applied[other.link] = target
                self.history.append(
                    (now, self.state.fast_link, self.state.applied_delay_ns)
                )

        return on_probe

    def tick(self, sim: Simulation, now: int) -> None:
        node = sim.nodes[self.node]
        final_addr = node.addresses[0]
        for pl in self.links:
            srh = SegmentRoutingHeader(
                segments=[final_addr, pl.return_addr, pl.dm_sid],
                segments_left=2,
                next_header=17,
                tlv_bytes=encode_tlvs(
                    dm_tlv(now), controller_tlv(final_addr, self.probe_port)
                ),
            )
            hdr = Ipv6Header(
                src=final_addr, dst=pl.dm_sid, next_header=PROTO_ROUTING
            )
            probe = Packet(
                headers=[(hdr, [srh])],
                transport=Udp(self.probe_port, self.probe_port, b"\x00" * 8),
            )
            self.sent += 1
            sim.send(self.node, probe)


def twd_prober_tick(daemon: TwdProber, sim: Simulation, now: int) -> None:
    """Inject one two-way probe per aggregated link."""
    daemon.tick(sim, now)


# ---------------------------------------------------------------------------
# ECMP nexthop discovery (modified traceroute support).

@register_program("end_oamp")
def end_oamp_factory(params: dict) -> Program:
    """Report the ECMP nexthops for the probe's final segment via an
    event (hop id, count, addresses); the probe itself terminates here."""

    def run(ctx: ProgramContext) -> Outcome:
        srh = ctx.packet.outer_srh
        if srh is None:
            return Outcome.DROP
        if read_controller_tlv(srh) is None:
            return Outcome.DROP
        target = srh.segments[0]
        hop_id = ctx.dataplane.index
        try:
            nexthops = helper_ecmp_nexthops(ctx, target)
        except HelperError:
            emit_event(ctx, struct.pack(">IH", hop_id, 0))
            return Outcome.DROP
        payload = struct.pack(">IH", hop_id, len(nexthops))
        for addr, _link in nexthops:
            payload += addr
        emit_event(ctx, payload)
        return Outcome.DROP

    return run


def decode_oamp_event(payload: bytes) -> tuple[int, list[Address]] | None:
    if len(payload) < 6:
        return None
    hop_id, count = struct.unpack_from(">IH", payload)
    if len(payload) != 6 + 16 * count:
        return None
    addrs = [bytes(payload[6 + 16 * i : 22 + 16 * i]) for i in range(count)]
    return hop_id, addrs


class OampResponder(Daemon):
    """Converts nexthop-discovery events into UDP replies to the prober.

    The pinned event layout carries no reply address, so the responder is
    pointed at the prober out of band (the traceroute driver sets it).
    """

    def __init__(
        self,
        daemon_id: str,
        node: str,
        interval_ns: int = 1_000_000,
        reply_addr: Address | None = None,
        reply_port: int = 33500,
    ):
        super().__init__(daemon_id, interval_ns)
        self.node = node
        self.reply_addr = reply_addr
        self.reply_port = reply_port

    def tick(self, sim: Simulation, now: int) -> None:
        if self.reply_addr is None:
            return  # leave events queued until a prober registers
        node = sim.nodes[self.node]
        for ev in node.events.drain():
            pkt = make_udp_packet(
                node.addresses[0], self.reply_addr, ev.payload,
                src_port=33500, dst_port=self.reply_port,
            )
            sim.send(self.node, pkt)


# ---------------------------------------------------------------------------
# Modified traceroute.

@dataclass
class HopResult:
    node: str
    depth: int
    method: str  # local | oamp | icmp
    nexthop_addrs: list[Address]
    nexthop_nodes: list[str]


@dataclass
class TracerouteResult:
    src: str
    target: Address
    hops: dict[str, HopResult]
    reached: bool
    unknown_probes: int = 0

    def render(self) -> str:
        lines = []
        for hop in sorted(self.hops.values(), key=lambda h: (h.depth, h.node)):
            nexthops = ", ".join(
                f"{ntop(a)} ({n})" for a, n in zip(hop.nexthop_addrs, hop.nexthop_nodes)
            )
            lines.append(f"{hop.depth:2d}  {hop.node:<12} [{hop.method}]  -> {nexthops}")
        status = "reached" if self.reached else "NOT reached"
        lines.append(f"target {ntop(self.target)}: {status}")
        return "\n".join(lines)


class _ProbeInbox:
    def __init__(self):
        self.oamp_replies: list[tuple[int, list[Address]]] = []
        self.time_exceeded: list[tuple[str, int]] = []  # (source node addr str, probe id)

    def handler(self, sim: Simulation):
        def on_packet(p: Packet, now: int) -> None:
            tp = p.transport
            if isinstance(tp, Udp):
                decoded = decode_oamp_event(tp.payload)
                if decoded is not None:
                    self.oamp_replies.append(decoded)
                return
            if isinstance(tp, bytes) and len(tp) >= 4 and tp[0] == 3:
                offender = tp[4:]
                if len(offender) >= 52:
                    (probe_id,) = struct.unpack_from(">I", offender, 48)
                    src_node = sim.addr_to_node.get(p.outer_header.src, "?")
                    self.time_exceeded.append((src_node, probe_id))

        return on_packet


def multipath_traceroute(
    sim: Simulation,
    src: str,
    target: Address,
    oamp_sids: dict[str, Address],
    flow_keys: int = 32,
    timeout_ns: int = 3_000_000_000,
    max_depth: int = 16,
    reply_port: int = 33500,
) -> TracerouteResult:
    """Breadth-first multipath discovery from src toward target.

    Hops with a nexthop-discovery SID are asked directly for their ECMP
    set with one SRH probe; other hops fall back to hop-limited probes
    over a spread of flow keys, reading the time-exceeded sources.
    """
    src_node = sim.nodes[src]
    prober_addr = src_node.addresses[0]
    inbox = _ProbeInbox()
    sim.bind(prober_addr, inbox.handler(sim))
    for node_id in oamp_sids:
        daemon_id = f"oamp_responder:{node_id}"
        if daemon_id not in sim.daemons:
            sim.add_daemon(OampResponder(daemon_id, node_id))
    for daemon in sim.daemons.values():
        if isinstance(daemon, OampResponder):
            daemon.reply_addr = prober_addr
            daemon.reply_port = reply_port

    probe_seq = [0]
    unknown = [0]

    def await_until(predicate) -> bool:
        deadline = sim.clock + timeout_ns
        while sim.clock < deadline:
            if predicate():
                return True
            step = min(1_000_000, deadline - sim.clock)
            sim.run_until(sim.clock + step)
        return predicate()

    def oamp_query(hop: str) -> list[Address] | None:
        sid = oamp_sids[hop]
        hop_id = sim.nodes[hop].index
        srh = SegmentRoutingHeader(
            segments=[target, sid], segments_left=1, next_header=17,
            tlv_bytes=encode_tlvs(controller_tlv(prober_addr, reply_port)),
        )
        hdr = Ipv6Header(src=prober_addr, dst=sid, next_header=PROTO_ROUTING)
        probe_seq[0] += 1
        probe = Packet(
            headers=[(hdr, [srh])],
            transport=Udp(reply_port, 33434, struct.pack(">I", probe_seq[0]) + b"\x00" * 4),
        )
        seen = len(inbox.oamp_replies)
        sim.send(src, probe)
        ok = await_until(
            lambda: any(r[0] == hop_id for r in inbox.oamp_replies[seen:])
        )
        if not ok:
            unknown[0] += 1
            return None
        for rid, addrs in inbox.oamp_replies[seen:]:
            if rid == hop_id:
                return addrs
        return None

    def icmp_probe(ttl: int, flow_label: int) -> str | None:
        probe_seq[0] += 1
        pid = probe_seq[0]
        # flow identity (label) stays fixed across the TTL sweep so every
        # probe of one key follows the same ECMP path; ports never vary
        probe = make_udp_packet(
            prober_addr, target, struct.pack(">I", pid) + b"\x00" * 12,
            src_port=49152, dst_port=33434,
            hop_limit=ttl, flow_label=flow_label,
        )
        seen = len(inbox.time_exceeded)
        sim.send(src, probe)
        ok = await_until(
            lambda: any(x[1] == pid for x in inbox.time_exceeded[seen:])
        )
        if not ok:
            unknown[0] += 1
            return None
        for node_id, got in inbox.time_exceeded[seen:]:
            if got == pid:
                return node_id
        return None

    target_node = sim.addr_to_node.get(target)
    icmp_paths: list[list[str | None]] | None = None

    def ensure_icmp_paths() -> list[list[str | None]]:
        nonlocal icmp_paths
        if icmp_paths is not None:
            return icmp_paths
        icmp_paths = []
        for k in range(flow_keys):
            path: list[str | None] = [src]
            for ttl in range(1, max_depth + 1):
                hop = icmp_probe(ttl, flow_label=k)
                path.append(hop)
                if hop is None or hop == target_node:
                    break
            icmp_paths.append(path)
        return icmp_paths

    hops: dict[str, HopResult] = {}
    frontier: list[tuple[str, int]] = [(src, 0)]
    visited = {src}
    reached = False
    while frontier:
        hop, depth = frontier.pop(0)
        if (target_node is not None and hop == target_node) or depth >= max_depth:
            reached = reached or hop == target_node
            continue
        if depth == 0:
            # local FIB query at the probing host
            try:
                nexthops = [a for a, _ in src_node.fib_ecmp_list(target)]
            except Exception:
                nexthops = []
            method = "local"
        elif hop in oamp_sids:
            addrs = oamp_query(hop)
            nexthops = addrs or []
            method = "oamp"
        else:
            successors = set()
            for path in ensure_icmp_paths():
                if depth < len(path) and path[depth] == hop:
                    if depth + 1 < len(path) and path[depth + 1] is not None:
                        successors.add(path[depth + 1])
            nexthops = [sim.nodes[n].addresses[0] for n in sorted(successors)]
            method = "icmp"
        nh_nodes = [sim.addr_to_node.get(a, ntop(a)) for a in nexthops]
        hops[hop] = HopResult(hop, depth, method, nexthops, nh_nodes)
        for nh in nh_nodes:
            if nh == target_node:
                reached = True
            if nh in sim.nodes and nh not in visited:
                visited.add(nh)
                frontier.append((nh, depth + 1))
    return TracerouteResult(src, target, hops, reached, unknown[0])
