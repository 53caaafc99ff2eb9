"""Deterministic discrete-event network simulator.

Single-threaded event loop over integer-nanosecond timestamps. Links add
serialization, seeded Gaussian jitter (truncated at zero) and an optional
netem-style extra delay per direction; delivery order per link direction
is FIFO. Identical (config, seed) runs produce byte-identical traces.
"""

from __future__ import annotations

import heapq
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field

from .behaviors import Drop, Forward, LocalDeliver
from .dataplane import Node
from .fib import fnv1a64
from .packet import Address, Packet, Udp, make_udp_packet

_MASK64 = 0xFFFFFFFFFFFFFFFF

# generated payloads start with this magic so traces can recover flow ids
FLOW_MAGIC = b"\x9c\x6f"


class SimError(Exception):
    pass


class UnknownLink(SimError):
    pass


class InsufficientData(SimError):
    pass


class Rng:
    """splitmix64 generator with a Box-Muller gaussian on top."""

    __slots__ = ("state", "_spare")

    def __init__(self, seed: int):
        self.state = seed & _MASK64
        self._spare = None

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def gauss(self, mu: float, sigma: float) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return mu + sigma * z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)


def stream_rng(seed: int, name: str) -> Rng:
    """Independent deterministic stream for a named component."""
    return Rng(fnv1a64(name.encode() + seed.to_bytes(8, "big")))


@dataclass(slots=True)
class TraceRecord:
    time_ns: int
    node: str
    direction: str  # ingress | egress | drop
    flow: int | None
    seq: int | None
    size: int


class _LinkDir:
    __slots__ = ("qdisc_extra_ns", "busy_until", "last_delivery")

    def __init__(self):
        self.qdisc_extra_ns = 0
        self.busy_until = 0
        self.last_delivery = 0


class Link:
    """Bidirectional link; per-direction FIFO, shared jitter stream."""

    def __init__(
        self,
        link_id: str,
        a: str,
        b: str,
        bandwidth_bps: int,
        delay_mean_ns: int,
        delay_stddev_ns: int,
        rng: Rng,
    ):
        if bandwidth_bps <= 0:
            raise SimError(f"link {link_id}: bandwidth must be positive")
        self.id = link_id
        self.a = a
        self.b = b
        self.bandwidth_bps = bandwidth_bps
        self.delay_mean_ns = delay_mean_ns
        self.delay_stddev_ns = delay_stddev_ns
        self.rng = rng
        self.dirs = {a: _LinkDir(), b: _LinkDir()}

    def peer(self, node_id: str) -> str:
        return self.b if node_id == self.a else self.a

    def serialization_ns(self, size_bytes: int) -> int:
        return size_bytes * 8 * 1_000_000_000 // self.bandwidth_bps

    def transmit(self, sender: str, size_bytes: int, now: int) -> int:
        """Occupy the sender-side direction and return the delivery time."""
        d = self.dirs[sender]
        start = now if now > d.busy_until else d.busy_until
        ser = self.serialization_ns(size_bytes)
        d.busy_until = start + ser
        if self.delay_stddev_ns > 0:
            delay = int(self.rng.gauss(self.delay_mean_ns, self.delay_stddev_ns))
            if delay < 0:
                delay = 0
        else:
            delay = self.delay_mean_ns
        delivery = start + ser + delay + d.qdisc_extra_ns
        if delivery < d.last_delivery:  # FIFO per direction
            delivery = d.last_delivery
        d.last_delivery = delivery
        return delivery


def transmit(link: Link, packet: Packet, now: int, sender: str) -> int:
    """Delivery time of a packet handed to a link by the given endpoint."""
    return link.transmit(sender, packet.wire_size(), now)


@dataclass
class UdpStream:
    """Constant-rate UDP source injected at a node."""

    src_node: str
    src: Address
    dst: Address
    rate_pps: int
    payload_size: int
    count: int
    flow: int = 1
    src_port: int = 49152
    dst_port: int = 33434
    flow_label: int = 0
    start_ns: int = 0

    def __post_init__(self):
        if self.rate_pps <= 0:
            raise SimError("rate_pps must be positive")
        if self.payload_size < 8:
            raise SimError("payload_size must be at least 8")

    @property
    def gap_ns(self) -> int:
        return 1_000_000_000 // self.rate_pps

    def build(self, seq: int) -> Packet:
        payload = FLOW_MAGIC + struct.pack(">HI", self.flow, seq)
        payload += b"\x00" * (self.payload_size - len(payload))
        return make_udp_packet(
            self.src, self.dst, payload,
            src_port=self.src_port, dst_port=self.dst_port,
            flow_label=self.flow_label,
        )


def udp_stream(
    src_node: str,
    src: Address,
    dst: Address,
    rate_pps: int,
    payload_size: int,
    count: int,
    **kwargs,
) -> UdpStream:
    return UdpStream(src_node, src, dst, rate_pps, payload_size, count, **kwargs)


def trace_ids(p: Packet) -> tuple[int | None, int | None]:
    """Recover (flow, seq) from a generated payload, if present."""
    tp = p.transport
    if isinstance(tp, Udp) and len(tp.payload) >= 8 and tp.payload[:2] == FLOW_MAGIC:
        flow, seq = struct.unpack_from(">HI", tp.payload, 2)
        return flow, seq
    return None, None


@dataclass
class Statistics:
    injected: int = 0
    delivered: dict = field(default_factory=lambda: defaultdict(int))
    forwarded: dict = field(default_factory=lambda: defaultdict(int))
    dropped: dict = field(default_factory=lambda: defaultdict(int))
    drop_reasons: dict = field(default_factory=lambda: defaultdict(int))
    link_delivered: dict = field(default_factory=lambda: defaultdict(int))
    events_emitted: dict = field(default_factory=lambda: defaultdict(int))
    events_dropped: dict = field(default_factory=lambda: defaultdict(int))

    @property
    def total_delivered(self) -> int:
        return sum(self.delivered.values())

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())

    def summary(self) -> str:
        lines = [f"injected\t{self.injected}"]
        for name, counter in (
            ("delivered", self.delivered),
            ("forwarded", self.forwarded),
            ("dropped", self.dropped),
            ("events_emitted", self.events_emitted),
            ("events_dropped", self.events_dropped),
        ):
            for key in sorted(counter):
                lines.append(f"{name}[{key}]\t{counter[key]}")
        for key in sorted(self.drop_reasons):
            lines.append(f"drop_reason[{key}]\t{self.drop_reasons[key]}")
        return "\n".join(lines) + "\n"


class Daemon:
    """Periodic in-simulation task; subclasses override tick()."""

    def __init__(self, daemon_id: str, interval_ns: int, start_ns: int = 0):
        self.id = daemon_id
        self.interval_ns = interval_ns
        self.start_ns = start_ns

    def tick(self, sim: "Simulation", now: int) -> None:  # pragma: no cover
        raise NotImplementedError


class Simulation:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.clock = 0
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}
        self.ports: dict[str, dict[str, Link]] = defaultdict(dict)
        self.daemons: dict[str, Daemon] = {}
        self.handlers: dict[Address, object] = {}
        self.trace: list[TraceRecord] = []
        self.stats = Statistics()
        self.addr_to_node: dict[Address, str] = {}
        self._heap: list = []
        self._seq = 0

    # -- construction --------------------------------------------------------

    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise SimError(f"duplicate node id {node.id!r}")
        node.index = len(self.nodes)
        self.nodes[node.id] = node
        for addr in node.addresses:
            self.addr_to_node[addr] = node.id
        return node

    def add_link(
        self,
        link_id: str,
        a: str,
        b: str,
        bandwidth_bps: int,
        delay_mean_ns: int,
        delay_stddev_ns: int = 0,
    ) -> Link:
        if link_id in self.links:
            raise SimError(f"duplicate link id {link_id!r}")
        link = Link(
            link_id, a, b, bandwidth_bps, delay_mean_ns, delay_stddev_ns,
            stream_rng(self.seed, f"link:{link_id}"),
        )
        self.links[link_id] = link
        self.ports[a][link_id] = link
        self.ports[b][link_id] = link
        return link

    def add_daemon(self, daemon: Daemon) -> None:
        if daemon.id in self.daemons:
            raise SimError(f"duplicate daemon id {daemon.id!r}")
        self.daemons[daemon.id] = daemon
        self._schedule(daemon.start_ns, ("tick", daemon.id))

    def add_stream(self, stream: UdpStream) -> None:
        if stream.count > 0:
            self._schedule(stream.start_ns, ("gen", stream, 0))

    def bind(self, addr: Address, handler) -> None:
        """Register a local-delivery handler (socket analog) for an address."""
        self.handlers[addr] = handler

    def set_qdisc_delay(self, node_id: str, link_id: str, delay_ns: int) -> None:
        link = self.links.get(link_id)
        if link is None or node_id not in link.dirs:
            raise UnknownLink(f"{link_id!r} at node {node_id!r}")
        link.dirs[node_id].qdisc_extra_ns = delay_ns

    # -- event plumbing -------------------------------------------------------

    def _schedule(self, t: int, event: tuple) -> None:
        if t < self.clock:  # externally injected past times fire now
            t = self.clock
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, event))

    def inject(self, node_id: str, packet: Packet, t: int | None = None) -> None:
        """Schedule a locally originated packet at the given time."""
        self._schedule(self.clock if t is None else t, ("inject", node_id, packet))

    def send(self, node_id: str, packet: Packet) -> None:
        """Immediately originate a packet at a node (daemon/handler use)."""
        self.stats.injected += 1
        self._local_output(self.nodes[node_id], packet)

    # -- execution ------------------------------------------------------------

    def run_until(self, t_ns: int) -> Statistics:
        """Process every event with time <= t_ns; the clock ends at t_ns."""
        if t_ns < self.clock:
            raise SimError("run_until target precedes current clock")
        heap = self._heap
        while heap and heap[0][0] <= t_ns:
            time_ns, _, event = heapq.heappop(heap)
            self.clock = time_ns
            kind = event[0]
            if kind == "deliver":
                self._process_deliver(event[1], event[2], event[3])
            elif kind == "inject":
                self.stats.injected += 1
                self._local_output(self.nodes[event[1]], event[2])
            elif kind == "gen":
                self._process_gen(event[1], event[2])
            elif kind == "tick":
                daemon = self.daemons[event[1]]
                daemon.tick(self, time_ns)
                if daemon.interval_ns > 0:
                    self._schedule(time_ns + daemon.interval_ns, ("tick", daemon.id))
        self.clock = t_ns
        self._sync_event_stats()
        return self.stats

    def _sync_event_stats(self) -> None:
        for node in self.nodes.values():
            self.stats.events_emitted[node.id] = node.events.emitted
            self.stats.events_dropped[node.id] = node.events.dropped

    def _process_gen(self, stream: UdpStream, seq: int) -> None:
        self.stats.injected += 1
        self._local_output(self.nodes[stream.src_node], stream.build(seq))
        if seq + 1 < stream.count:
            self._schedule(
                stream.start_ns + (seq + 1) * stream.gap_ns, ("gen", stream, seq + 1)
            )

    def _record(self, node_id: str, direction: str, p: Packet) -> None:
        flow, seq = trace_ids(p)
        self.trace.append(
            TraceRecord(self.clock, node_id, direction, flow, seq, p.wire_size())
        )

    def _process_deliver(self, link_id: str, node_id: str, p: Packet) -> None:
        self.stats.link_delivered[link_id] += 1
        node = self.nodes[node_id]
        self._record(node_id, "ingress", p)
        decision = node.process_ingress(p, self.clock)
        self._apply(node, p, decision)
        if node.originated:
            pending, node.originated = node.originated, []
            for out in pending:
                self.stats.injected += 1
                self._local_output(node, out)

    def _apply(self, node: Node, p: Packet, decision) -> None:
        if isinstance(decision, Forward):
            link = self.ports[node.id].get(decision.link)
            if link is None:
                self.stats.dropped[node.id] += 1
                self.stats.drop_reasons["bad_egress_link"] += 1
                self._record(node.id, "drop", p)
                return
            self.stats.forwarded[node.id] += 1
            self._record(node.id, "egress", p)
            delivery = link.transmit(node.id, p.wire_size(), self.clock)
            self._schedule(delivery, ("deliver", link.id, link.peer(node.id), p))
        elif isinstance(decision, Drop):
            self.stats.dropped[node.id] += 1
            self.stats.drop_reasons[decision.reason.value] += 1
            self._record(node.id, "drop", p)
        elif isinstance(decision, LocalDeliver):
            self.stats.delivered[node.id] += 1
            handler = self.handlers.get(p.outer_header.dst)
            if handler is not None:
                handler(p, self.clock)
        else:  # pragma: no cover
            raise SimError(f"bad decision {decision!r}")

    def _local_output(self, node: Node, p: Packet) -> None:
        """Send a packet originated at a node (no hop-limit decrement)."""
        decision = node.finish_forwarding(p)
        self._apply(node, p, decision)


# ---------------------------------------------------------------------------
# Trace analysis.

def _sink_ingress(trace: list[TraceRecord], flow: int) -> list[TraceRecord]:
    # the sink is the node where arrivals exceed departures (egress+drop):
    # transit nodes re-emit or drop everything they receive
    balance: dict[str, int] = defaultdict(int)
    for r in trace:
        if r.flow != flow:
            continue
        balance[r.node] += 1 if r.direction == "ingress" else -1
    sinks = [n for n, surplus in balance.items() if surplus > 0]
    if len(sinks) != 1:
        raise InsufficientData(
            f"flow {flow}: cannot identify a unique sink (candidates {sorted(sinks)})"
        )
    sink = sinks[0]
    return [
        r
        for r in trace
        if r.flow == flow and r.node == sink and r.direction == "ingress"
    ]


def reorder_fraction(trace: list[TraceRecord], flow: int) -> float:
    """Fraction of packets arriving at the sink after a higher sequence
    number was already seen."""
    records = _sink_ingress(trace, flow)
    if len(records) < 2:
        raise InsufficientData(f"flow {flow}: fewer than 2 sink arrivals")
    late = 0
    max_seq = -1
    for r in records:
        if r.seq < max_seq:
            late += 1
        else:
            max_seq = r.seq
    return late / len(records)


UDP_PLAIN_OVERHEAD = 48  # IPv6 + UDP headers of a decapsulated packet


def goodput_estimate(
    trace: list[TraceRecord],
    flow: int,
    gap_threshold: int = 3,
    stall_penalty_ns: int = 30_000_000,
) -> float:
    """Reorder-sensitive goodput in bits/second.

    Every arrival whose jump past the expected next sequence exceeds
    gap_threshold (triple-duplicate-ack analog) charges one stall penalty;
    delivered payload bits are divided by duration plus total penalties.
    """
    records = _sink_ingress(trace, flow)
    if len(records) < 2:
        raise InsufficientData(f"flow {flow}: fewer than 2 sink arrivals")
    bits = 0
    stalls = 0
    expected = records[0].seq  # next in-order sequence (cumulative-ack point)
    pending: set[int] = set()
    for r in records:
        bits += max(0, r.size - UDP_PLAIN_OVERHEAD) * 8
        if r.seq - expected > gap_threshold:
            stalls += 1
        pending.add(r.seq)
        while expected in pending:
            pending.discard(expected)
            expected += 1
    duration = records[-1].time_ns - records[0].time_ns
    total_ns = duration + stalls * stall_penalty_ns
    if total_ns <= 0:
        raise InsufficientData("zero observation window")
    return bits / (total_ns / 1e9)


def write_trace(trace: list[TraceRecord], path) -> None:
    """Tab-separated export: time_ns, node, direction, flow, seq, size."""
    with open(path, "w", encoding="ascii") as fh:
        for r in trace:
            flow = "-" if r.flow is None else r.flow
            seq = "-" if r.seq is None else r.seq
            fh.write(f"{r.time_ns}\t{r.node}\t{r.direction}\t{flow}\t{seq}\t{r.size}\n")
