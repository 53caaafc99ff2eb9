"""Command-line tool: scenario runner, the three experiment commands and
the forwarding microbenchmark.

Exit codes: 0 success, 1 partial result, 2 configuration error,
3 runtime anomaly (more than half of the injected packets dropped).
"""

from __future__ import annotations

import argparse
import statistics as pystats
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .behaviors import End, EndProgram, EndT
from .dataplane import Node
from .fib import FibEntry
from .packet import SegmentRoutingHeader, pton
from .programs import (
    Outcome,
    helper_adjust_srh,
    helper_action,
    helper_store_bytes,
)
from .scenario import (
    ConfigError,
    ScenarioConfig,
    apply_overrides,
    build_simulation,
    load_scenario,
)
from .sim import (
    InsufficientData,
    Simulation,
    goodput_estimate,
    reorder_fraction,
    write_trace,
)
from .usecases import DelayCollector, TwdProber, multipath_traceroute, wrr_counts

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_ANOMALY = 3


@dataclass
class Report:
    experiment: str
    scenario: str
    digest: str
    parameters: dict = field(default_factory=dict)
    metrics: list[tuple[str, object, str]] = field(default_factory=list)
    trace_path: str | None = None

    def add(self, name: str, value, unit: str = "") -> None:
        self.metrics.append((name, value, unit))

    def to_text(self) -> str:
        lines = [
            f"# srv6sim report: {self.experiment}",
            f"scenario: {self.scenario} (sha256:{self.digest[:16]})",
            "parameters: "
            + " ".join(f"{k}={v}" for k, v in sorted(self.parameters.items())),
            "",
            f"{'metric':<32} {'value':>20}  unit",
        ]
        for name, value, unit in self.metrics:
            if isinstance(value, float):
                value = f"{value:.6g}"
            lines.append(f"{name:<32} {str(value):>20}  {unit}")
        if self.trace_path:
            lines.append("")
            lines.append(f"trace: {self.trace_path}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        lines = [f"experiment\t{self.experiment}\t"]
        lines.append(f"scenario\t{self.scenario}\t")
        lines.append(f"digest\t{self.digest}\t")
        for k, v in sorted(self.parameters.items()):
            lines.append(f"param:{k}\t{v}\t")
        for name, value, unit in self.metrics:
            lines.append(f"{name}\t{value}\t{unit}")
        if self.trace_path:
            lines.append(f"trace\t{self.trace_path}\t")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path, fmt: str) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        ext = "tsv" if fmt == "tsv" else "txt"
        path = out_dir / f"{self.scenario}-{self.experiment}-report.{ext}"
        path.write_text(self.to_tsv() if fmt == "tsv" else self.to_text())
        return path


def _load(path: str, args) -> ScenarioConfig:
    cfg = load_scenario(path)
    return apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        duration_ms=getattr(args, "duration", None),
        ratio=getattr(args, "ratio", None),
        compensation={"on": True, "off": False}.get(getattr(args, "compensation", None)),
    )


def _run_common(cfg: ScenarioConfig, report: Report, out_dir: Path) -> tuple[Simulation, int]:
    sim = build_simulation(cfg)
    stats = sim.run_until(cfg.duration_ns)
    trace_file = out_dir / f"{cfg.name}-{report.experiment}-trace.tsv"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trace(sim.trace, trace_file)
    (out_dir / f"{cfg.name}-{report.experiment}-stats.txt").write_text(stats.summary())
    report.trace_path = str(trace_file)
    report.add("injected", stats.injected, "packets")
    report.add("forwarded_total", sum(stats.forwarded.values()), "packets")
    report.add("delivered_total", stats.total_delivered, "packets")
    report.add("dropped_total", stats.total_dropped, "packets")
    report.add("events_emitted", sum(stats.events_emitted.values()), "events")
    report.add("events_dropped", sum(stats.events_dropped.values()), "events")
    code = EXIT_OK
    if stats.injected > 0 and stats.total_dropped / stats.injected > 0.5:
        code = EXIT_ANOMALY
    return sim, code


def cmd_run(args) -> int:
    cfg = _load(args.scenario, args)
    out_dir = Path(args.out)
    report = Report("run", cfg.name, cfg.digest, {"seed": cfg.seed})
    sim, code = _run_common(cfg, report, out_dir)
    report.write(out_dir, args.format)
    print(report.to_text())
    return code


def cmd_owd(args) -> int:
    cfg = _load(args.scenario, args)
    dm_programs = [e for e in list(cfg.transits) + list(cfg.sids) if e.program == "dm_transit"]
    dm_endpoints = [e for e in cfg.sids if e.program == "end_dm"]
    if not dm_programs or not dm_endpoints:
        raise ConfigError("$", "scenario has no delay-measurement path (dm_transit + end_dm)")
    controller_addr = dm_programs[0].params["controller_addr"]
    controller_port = int(dm_programs[0].params.get("controller_port", 9000))
    ratio = int(dm_programs[0].params.get("ratio", 100))

    out_dir = Path(args.out)
    report = Report(
        "owd", cfg.name, cfg.digest,
        {"seed": cfg.seed, "ratio": ratio, "duration_ms": cfg.duration_ns // 1_000_000},
    )
    sim = build_simulation(cfg)
    collector = DelayCollector()
    sim.bind(controller_addr, collector)
    stats = sim.run_until(cfg.duration_ns)

    out_dir.mkdir(parents=True, exist_ok=True)
    trace_file = out_dir / f"{cfg.name}-owd-trace.tsv"
    write_trace(sim.trace, trace_file)
    report.trace_path = str(trace_file)

    owds = [r.owd_ns for r in collector.records]
    report.add("probe_count", len(owds), "probes")
    report.add("owd_mean", pystats.fmean(owds) / 1e6 if owds else 0.0, "ms")
    report.add("owd_min", min(owds) / 1e6 if owds else 0.0, "ms")
    report.add("owd_max", max(owds) / 1e6 if owds else 0.0, "ms")
    report.add("owd_p99", _p99(owds) / 1e6 if owds else 0.0, "ms")
    report.add("event_drop_count", sum(stats.events_dropped.values()), "events")
    report.add("malformed_events", collector.malformed, "events")
    report.add("injected", stats.injected, "packets")
    report.add("delivered_total", stats.total_delivered, "packets")
    report.add("dropped_total", stats.total_dropped, "packets")
    report.write(out_dir, args.format)
    print(report.to_text())
    if stats.injected > 0 and stats.total_dropped / stats.injected > 0.5:
        return EXIT_ANOMALY
    return EXIT_OK


def _p99(values: list[int]) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = max(0, int(len(ordered) * 0.99 + 0.5) - 1)
    return float(ordered[idx])


def cmd_hybrid(args) -> int:
    cfg = _load(args.scenario, args)
    wrr_route = next(
        (t for t in cfg.transits if t.program == "wrr"), None
    )
    prober_cfg = next((d for d in cfg.daemons if d.type == "twd_prober"), None)
    if wrr_route is None or prober_cfg is None:
        raise ConfigError("$", "scenario is not a hybrid-access setup (wrr + twd_prober)")
    flow = cfg.generators[0].flow if cfg.generators else 1
    route_id = int(wrr_route.params.get("route_id", 0))

    out_dir = Path(args.out)
    compensation = getattr(args, "compensation", "on") or "on"
    report = Report(
        "hybrid", cfg.name, cfg.digest,
        {"seed": cfg.seed, "compensation": compensation},
    )
    sim, code = _run_common(cfg, report, out_dir)

    box = sim.nodes[wrr_route.node]
    count_a, count_b = wrr_counts(box, route_id)
    report.add("path_a_packets", count_a, "packets")
    report.add("path_b_packets", count_b, "packets")
    try:
        report.add("reorder_fraction", reorder_fraction(sim.trace, flow), "")
        report.add("goodput_estimate", goodput_estimate(sim.trace, flow) / 1e6, "Mbps")
    except InsufficientData as exc:
        report.add("reorder_fraction", 0.0, f"insufficient data: {exc}")
        report.add("goodput_estimate", 0.0, f"insufficient data: {exc}")
    prober = next(d for d in sim.daemons.values() if isinstance(d, TwdProber))
    applied = [h[2] for h in prober.history]
    report.add("applied_delay_last", applied[-1] / 1e6 if applied else 0.0, "ms")
    report.add("applied_delay_mean", pystats.fmean(applied) / 1e6 if applied else 0.0, "ms")
    report.add("twd_probes_received", prober.received, "probes")
    if prober.history:
        series = out_dir / f"{cfg.name}-hybrid-applied.tsv"
        with open(series, "w") as fh:
            for t, link, delay in prober.history:
                fh.write(f"{t}\t{link}\t{delay}\n")
        report.add("applied_delay_series", str(series), "file")
    report.write(out_dir, args.format)
    print(report.to_text())
    return code


def cmd_traceroute(args) -> int:
    cfg = _load(args.scenario, args)
    sim = build_simulation(cfg)
    if args.src not in sim.nodes:
        raise ConfigError("$.src", f"unknown node {args.src!r}")
    target = pton(args.target)
    oamp_sids = {
        s.node: s.sid for s in cfg.sids if s.program == "end_oamp"
    }
    if args.no_oamp:
        for node in args.no_oamp.split(","):
            oamp_sids.pop(node, None)
    result = multipath_traceroute(sim, args.src, target, oamp_sids)
    print(result.render())
    return EXIT_OK if result.reached else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# Microbenchmark: in-process pipeline cost, no simulator in the loop.

BENCH_FUNCTIONS = (
    "plain",
    "end_native",
    "end_program_noop",
    "end_t_program",
    "tag_increment",
    "add_tlv",
)

_B_SRC = pton("2001:db8:1::1")
_B_DST = pton("2001:db8:2::1")
_B_NH = pton("2001:db8:2::1")
_B_SID = pton("fd00:72::b")


def _bench_node() -> Node:
    node = Node("R", [pton("2001:db8::1")])
    node.fib_insert(FibEntry(pton("2001:db8:2::"), 64, [(_B_NH, "l1")]))
    node.fib_insert(FibEntry(pton("fd00::"), 8, [(_B_NH, "l1")]))
    return node


def _bench_packet(with_srh: bool):
    from .packet import make_udp_packet, PROTO_ROUTING, PROTO_UDP

    p = make_udp_packet(_B_SRC, _B_DST, b"\x00" * 64)
    if with_srh:
        srh = SegmentRoutingHeader(
            segments=[_B_DST, _B_SID], segments_left=1, next_header=PROTO_UDP
        )
        p.headers[0][0].dst = _B_SID
        p.headers[0][0].next_header = PROTO_ROUTING
        p.headers[0][1].append(srh)
    return p


def _bench_case(name: str):
    """Returns (node, packet, reset) for one benchmarked function."""
    node = _bench_node()
    if name == "plain":
        p = _bench_packet(with_srh=False)

        def reset():
            p.headers[0][0].hop_limit = 64

        return node, p, reset

    p = _bench_packet(with_srh=True)
    hdr, srh = p.headers[0][0], p.headers[0][1][0]
    base_plen = hdr.payload_length

    def reset():
        hdr.hop_limit = 64
        hdr.dst = _B_SID
        hdr.payload_length = base_plen
        srh.segments_left = 1
        srh.tlv_bytes = b""
        m = p.meta
        m.pending_destination = None
        m.pending_link = None
        m.pending_table = None
        m.srh_dirty = False

    if name == "end_native":
        node.add_sid(_B_SID, End())
    elif name == "end_program_noop":
        def noop(ctx):
            return Outcome.OK

        node.add_program("bench", noop)
        node.add_sid(_B_SID, EndProgram("bench"))
    elif name == "end_t_program":
        def end_t_prog(ctx):
            helper_action(ctx, EndT(0))
            return Outcome.REDIRECT

        node.add_program("bench", end_t_prog)
        node.add_sid(_B_SID, EndProgram("bench"))
    elif name == "tag_increment":
        import struct as _s

        def tag_prog(ctx):
            srh_ = ctx.packet.outer_srh
            helper_store_bytes(ctx, 6, _s.pack(">H", (srh_.tag + 1) & 0xFFFF))
            return Outcome.OK

        node.add_program("bench", tag_prog)
        node.add_sid(_B_SID, EndProgram("bench"))
    elif name == "add_tlv":
        tlv = bytes((0x63, 6)) + b"\xab" * 6

        def add_tlv_prog(ctx):
            helper_adjust_srh(ctx, 8)
            off = 8 + 16 * len(ctx.packet.outer_srh.segments)
            helper_store_bytes(ctx, off, tlv)
            return Outcome.OK

        node.add_program("bench", add_tlv_prog)
        node.add_sid(_B_SID, EndProgram("bench"))
    else:
        raise ValueError(f"unknown bench function {name!r}")
    return node, p, reset


class _pinned_cpu:
    """Pin the process to one logical CPU for the duration, when possible."""

    def __enter__(self):
        self._saved = None
        try:
            import os

            self._saved = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(self._saved)})
        except (AttributeError, OSError):
            pass
        return self

    def __exit__(self, *exc):
        if self._saved:
            try:
                import os

                os.sched_setaffinity(0, self._saved)
            except OSError:
                pass
        return False


def run_bench(functions=BENCH_FUNCTIONS, count: int = 20000, repeats: int = 3) -> dict:
    """Packets/second per function, best of `repeats` timed loops.

    The process is pinned to a single logical CPU and repetitions are
    interleaved across functions, so transient contention penalizes every
    function alike instead of whichever loop happened to be running."""
    with _pinned_cpu():
        return _run_bench_pinned(functions, count, repeats)


def _run_bench_pinned(functions, count: int, repeats: int) -> dict:
    cases = {}
    for name in functions:
        node, p, reset = _bench_case(name)
        ingress = node.process_ingress
        # warmup pass also verifies the pipeline reaches a decision
        for _ in range(500):
            reset()
            ingress(p, 0)
        cases[name] = (ingress, p, reset)
    best: dict[str, int] = {}
    for _ in range(repeats):
        for name, (ingress, p, reset) in cases.items():
            t0 = time.perf_counter_ns()
            for i in range(count):
                reset()
                ingress(p, i)
            dt = time.perf_counter_ns() - t0
            if name not in best or dt < best[name]:
                best[name] = dt
    return {name: count / (best[name] / 1e9) for name in functions}


def cmd_bench(args) -> int:
    functions = args.functions.split(",") if args.functions else list(BENCH_FUNCTIONS)
    for f in functions:
        if f not in BENCH_FUNCTIONS:
            raise ConfigError("$.functions", f"unknown function {f!r}")
    results = run_bench(functions, count=args.count)
    report = Report("bench", "bench", "-" * 64, {"count": args.count})
    baseline = results.get("plain")
    for name in functions:
        report.add(f"pps_{name}", results[name], "pps")
        if baseline:
            report.add(f"normalized_{name}", results[name] / baseline, "")
    out_dir = Path(args.out)
    report.write(out_dir, args.format)
    print(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_common(sub, with_scenario=True):
    if with_scenario:
        sub.add_argument("scenario", help="scenario JSON path")
    sub.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sub.add_argument("--duration", type=float, default=None, help="override duration (ms)")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--format", choices=("text", "tsv"), default="text")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="srv6sim",
        description="SRv6 programmable dataplane simulator",
    )
    sp = ap.add_subparsers(dest="command", required=True)

    run = sp.add_parser("run", help="run a scenario and report counters")
    _add_common(run)
    run.set_defaults(func=cmd_run)

    owd = sp.add_parser("owd", help="one-way delay measurement experiment")
    _add_common(owd)
    owd.add_argument("--ratio", type=int, default=None, help="probing ratio 1:N")
    owd.set_defaults(func=cmd_owd)

    hyb = sp.add_parser("hybrid", help="hybrid-access aggregation experiment")
    _add_common(hyb)
    hyb.add_argument("--compensation", choices=("on", "off"), default="on")
    hyb.set_defaults(func=cmd_hybrid)

    tr = sp.add_parser("traceroute", help="multipath discovery toward a target")
    _add_common(tr)
    tr.add_argument("src", help="probing node id")
    tr.add_argument("target", help="target IPv6 address")
    tr.add_argument("--no-oamp", default="", help="comma-separated nodes to probe via ICMP only")
    tr.set_defaults(func=cmd_traceroute)

    bench = sp.add_parser("bench", help="pipeline microbenchmark")
    _add_common(bench, with_scenario=False)
    bench.add_argument("--functions", default="", help=f"subset of {','.join(BENCH_FUNCTIONS)}")
    bench.add_argument("--count", type=int, default=20000, help="packets per timed loop")
    bench.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
