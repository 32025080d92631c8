"""Run scenarios: build the simulation, drive the flows, measure the result."""

from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from . import metrics as m
from . import topology as topo
from .codec import NH_ICMPV6, ECHO_REQUEST_V6, EchoHeader, Ipv6Header, Packet, PacketMeta
from .config import Scenario
from .netsim import InvariantViolation, SimParams, Simulation, TraceRecord
from .traffic import FlowLog, FlowPlan, collect, generate
from .tunnels import Protocol, RefreshPolicy, TunnelState


@dataclass
class RunResult:
    scenario: str
    protocol: str
    seed: int
    trace: list[TraceRecord]
    logs: dict[int, FlowLog]
    summary: m.MetricsSummary
    refreshes: int
    events: int


def _data_packet(sim: Simulation, plan: FlowPlan, seq: int) -> Packet:
    meta = PacketMeta(sim.new_packet_id(), plan.flow_id, "data" if plan.kind == "udp_stream" else "echo_request",
                      sim.now, seq)
    src = sim.source_v6(plan.src)
    if plan.kind == "udp_stream":
        # opaque payload behind next header 17; the body is the seq so packets differ
        body = seq.to_bytes(4, "big") * (plan.payload // 4) + bytes(plan.payload % 4)
        return Packet((Ipv6Header(src, src, 17),), body, meta)
    body = bytes(plan.payload)
    return Packet((Ipv6Header(src, src, NH_ICMPV6), EchoHeader(ECHO_REQUEST_V6, 0, plan.flow_id, seq & 0xFFFF)),
                  body, meta)


def _emit(sim: Simulation, plan: FlowPlan, seq: int, name: str) -> None:
    sim.app_send(plan.src, name, _data_packet(sim, plan, seq))


def build(scn: Scenario, seed: int) -> Simulation:
    """A ready-to-run simulation with tunnel, DNS and flows scheduled."""
    sim = Simulation(scn.nodes, scn.links, SimParams(scn.protocol, seed))
    if scn.protocol != "baseline":
        proto = Protocol(scn.protocol)
        ep = topo.tunnel_endpoints(scn.protocol, scn.nodes, scn.links)
        client, server, gateway = ep["client"], ep["server"], ep["gateway"]
        relay = gateway.v4[0] if proto is not Protocol.ISATAP else None
        sim.nodes[client.id].tunnel = TunnelState(
            proto, client.v4[0], server.id, server.v4[0], RefreshPolicy(proto, random.Random(seed)), relay_v4=relay
        )
        sim.schedule(scn.setup_at_ms, sim.start_tunnel_setup, client.id)
    specs = {n.id: n for n in scn.nodes}
    asked = set()
    for plan in scn.flows:
        name = specs[plan.dst].dns_name
        if not name:
            raise InvariantViolation(f"flow {plan.name}: destination {plan.dst} has no DNS name")
        if (plan.src, name) not in asked:
            asked.add((plan.src, name))
            sim.schedule(scn.dns_at_ms, sim.dns_resolve, plan.src, name)
        for t, seq in generate(plan):
            sim.schedule(t, _emit, sim, plan, seq, name)
    return sim


def _query_delay(trace: list[TraceRecord], node: str) -> float | None:
    asked = {}
    for r in trace:
        if r.node != node:
            continue
        if r.event == "dns_query":
            asked.setdefault(r.packet_id, r.time)
        elif r.event == "dns_reply" and r.packet_id in asked:
            return r.time - asked[r.packet_id]
    return None


def check_conservation(sim: Simulation, logs: dict[int, FlowLog]) -> None:
    for fid, log in logs.items():
        injected = sim.injected.get(fid, 0)
        if log.n_received != injected:
            raise InvariantViolation(f"flow {fid}: {injected} injected, {log.n_received} delivered")
    for r in sim.trace:
        if r.event == "drop" and not r.reason:
            raise InvariantViolation(f"drop without a reason at {r.node} t={r.time}")


def run_once(scn: Scenario, seed: int, *, strict: bool = True) -> RunResult:
    sim = build(scn, seed)
    trace = sim.run()
    logs = collect(trace, scn.flows)
    if strict:
        check_conservation(sim, logs)
    stream = next((logs[f.flow_id] for f in scn.flows if f.kind == "udp_stream"), None)
    ping = next((logs[f.flow_id] for f in scn.flows if f.kind == "ping"), None)
    setup, client = 0.0, None
    if scn.protocol != "baseline":
        client = topo.tunnel_endpoints(scn.protocol, scn.nodes, scn.links)["client"].id
        log = sim.setup_log.get(client, {})
        setup = log["established"] - log["request"] if "established" in log else None
    query = _query_delay(trace, scn.flows[0].src)
    summary = m.summarize_flows(
        scn.protocol, stream, ping, setup, query, topo.count_auxiliary_devices(scn.nodes)
    )
    summary.config_hash = scn.config_hash
    summary.seeds = (seed,)
    state = sim.nodes[client].tunnel if client else None
    return RunResult(scn.name, scn.protocol, seed, trace, logs, summary,
                     state.refreshes_sent if state else 0, sim.events_processed)


def _run_job(args) -> RunResult:
    scn, seed, keep_trace = args
    res = run_once(scn, seed)
    if not keep_trace:
        res.trace = []
    return res


def replicate(scn: Scenario, reps: int | None = None, seed: int | None = None, jobs: int = 1,
              keep_trace: bool = True) -> list[RunResult]:
    """Run replications ``r = 0..R-1`` with seed ``base + r``, in order."""
    reps = scn.replications if reps is None else reps
    base = scn.seed if seed is None else seed
    work = [(scn, base + r, keep_trace) for r in range(reps)]
    if jobs <= 1 or reps == 1:
        return [_run_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=min(jobs, reps)) as ex:
        return list(ex.map(_run_job, work))
