import math
from ipaddress import IPv4Address, IPv6Address

import pytest

from tunnelsim import codec, experiment
from tunnelsim import topology as topo
from tunnelsim.codec import Ipv6Header, Packet, PacketMeta
from tunnelsim.config import Scenario
from tunnelsim.netsim import (ConfigError, InvariantViolation, LinkSpec, NodeSpec, RunawayError, SimParams,
                              Simulation, trace_to_csv)
from tunnelsim.traffic import FlowPlan

from conftest import short_scenario

PROTOS = ("isatap", "6to4", "teredo")


def zero_scenario(protocol: str, cal: topo.Calibration | None = None, flows=None) -> Scenario:
    cal = cal or topo.Calibration()
    nodes, links = topo.build_standard(protocol, cal)
    if flows is None:
        flows = [
            FlowPlan("audio", "udp_stream", "sender", "receiver", 1500, 40.0, 1.0, flow_id=1),
            FlowPlan("ping", "ping", "sender", "receiver", 56, count=3, interval_ms=100.0, start_ms=1500.0,
                     flow_id=2),
        ]
    return Scenario(f"{protocol}-zero", protocol, cal, nodes, links, flows)


def two_hosts(delay=0.5, rate=8000.0, cost=0.0):
    a = NodeSpec("a", "host", "v6", v6=(IPv6Address("2001:db8::a"),), costs={"forward": cost})
    b = NodeSpec("b", "host", "v6", v6=(IPv6Address("2001:db8::b"),))
    return Simulation([a, b], [LinkSpec("a", "b", delay, rate)])


def send_v6(sim, t, payload=100, pid=None):
    def go():
        meta = PacketMeta(pid or sim.new_packet_id(), 1, "data", sim.now, 0)
        pkt = Packet((Ipv6Header(IPv6Address("2001:db8::a"), IPv6Address("2001:db8::b"), 17),), bytes(payload),
                     meta)
        sim.host_send_v6(sim.nodes["a"], pkt)
    sim.schedule(t, go)


# -- engine --------------------------------------------------------------------------------


def test_single_link_timing():
    sim = two_hosts(delay=0.5, rate=8000.0, cost=0.25)
    send_v6(sim, 1.0, payload=960)  # 1000 bytes on the wire: 1 ms at 8000 bits/ms
    trace = sim.run()
    got = [r for r in trace if r.event == "received"]
    assert len(got) == 1
    assert got[0].time == pytest.approx(1.0 + 0.25 + 1.0 + 0.5)


def test_link_is_fifo_and_serializes():
    sim = two_hosts(delay=0.5, rate=8000.0)
    for i in range(5):
        send_v6(sim, 0.0, payload=960)
    got = [r.time for r in sim.run() if r.event == "received"]
    assert got == pytest.approx([1.5, 2.5, 3.5, 4.5, 5.5])
    ids = [r.packet_id for r in sim.trace if r.event == "received"]
    assert ids == sorted(ids)


def test_cannot_schedule_in_the_past():
    sim = two_hosts()
    sim.schedule(5.0, lambda: sim.schedule(1.0, lambda: None))
    with pytest.raises(InvariantViolation):
        sim.run()


def test_runaway_cap():
    a = NodeSpec("a", "host", "v6", v6=(IPv6Address("2001:db8::a"),))
    sim = Simulation([a], [], SimParams(max_events=100))

    def loop():
        sim.schedule(sim.now + 1.0, loop)
    sim.schedule(0.0, loop)
    with pytest.raises(RunawayError):
        sim.run()


def test_run_until_stops_early():
    sim = two_hosts()
    send_v6(sim, 10.0)
    assert sim.run(until=5.0) == [] and sim.now == 5.0


def test_empty_traffic():
    sim = Simulation(*topo.build_standard("baseline", topo.Calibration()))
    assert sim.run() == [] and sim.events_processed == 0


def test_topology_errors():
    a = NodeSpec("a", "host", "v6", v6=(IPv6Address("2001:db8::a"),))
    with pytest.raises(ConfigError):
        Simulation([a, a], [])
    with pytest.raises(ConfigError):
        Simulation([a], [LinkSpec("a", "ghost")])
    with pytest.raises(ConfigError):
        NodeSpec("x", "host", "v6", v4=(IPv4Address("192.0.2.1"),))
    with pytest.raises(ConfigError):
        NodeSpec("x", "wizard", "v6")
    with pytest.raises(ConfigError):
        LinkSpec("a", "b", delay=-1.0)


def test_mtu_drop_has_reason():
    a = NodeSpec("a", "host", "v6", v6=(IPv6Address("2001:db8::a"),))
    b = NodeSpec("b", "host", "v6", v6=(IPv6Address("2001:db8::b"),))
    sim = Simulation([a, b], [LinkSpec("a", "b", mtu=500)])
    send_v6(sim, 0.0, payload=1000)
    drops = [r for r in sim.run() if r.event == "drop"]
    assert [d.reason for d in drops] == ["mtu_exceeded"]


# -- whole scenarios -----------------------------------------------------------------------


@pytest.mark.parametrize("protocol", PROTOS + ("baseline",))
def test_deterministic(protocol):
    scn = short_scenario(f"{protocol}-default", seconds=2, pings=3)
    a, b = experiment.run_once(scn, 7), experiment.run_once(scn, 7)
    assert trace_to_csv(a.trace) == trace_to_csv(b.trace)
    assert a.summary == b.summary


def test_6to4_seed_changes_refresh_schedule():
    scn = short_scenario("6to4-default", seconds=10, pings=1)
    refresh_times = {tuple(r.time for r in experiment.run_once(scn, s).trace if r.event == "refresh")
                     for s in range(1, 6)}
    assert len(refresh_times) > 1


@pytest.mark.parametrize("protocol", PROTOS + ("baseline",))
def test_causality_and_conservation(protocol):
    res = experiment.run_once(short_scenario(f"{protocol}-default", seconds=2, pings=3), 1)
    times = [r.time for r in res.trace]
    assert times == sorted(times)
    for log in res.logs.values():
        assert log.n_received == log.n_sent
        assert all(r > s for s, r in log.pairs())
    assert all(r.reason for r in res.trace if r.event == "drop")


def test_baseline_has_no_tunnel_events():
    res = experiment.run_once(short_scenario("baseline-default", seconds=2, pings=3), 1)
    events = {r.event for r in res.trace}
    assert not events & {"encap", "decap", "refresh", "setup_msg"}
    assert res.summary.tunnel_setup_delay == 0.0


@pytest.mark.parametrize("protocol", PROTOS)
def test_every_stream_packet_is_encapsulated_once_by_the_client(protocol):
    res = experiment.run_once(short_scenario(f"{protocol}-default", seconds=2, pings=1), 1)
    enc = [r for r in res.trace if r.event == "encap" and r.node == "sender" and r.flow_id == 1]
    assert len(enc) == res.logs[1].n_sent == 80
    dec = [r for r in res.trace if r.event == "decap" and r.flow_id == 1]
    assert len(dec) == 80


@pytest.mark.parametrize("protocol", PROTOS)
def test_zero_cost_infinite_rate_gives_zero_delays(protocol):
    cal = topo.Calibration(link_rate=math.inf)
    res = experiment.run_once(zero_scenario(protocol, cal), 1)
    s = res.summary
    assert s.tunnel_setup_delay == 0.0
    assert s.query_delay == 0.0
    assert s.e2ed_mean == 0.0 and s.rtt_mean == 0.0


@pytest.mark.parametrize("protocol,aux,names", [
    ("isatap", 0, []), ("6to4", 1, ["6to4 Relay"]), ("teredo", 1, ["Teredo Server"]), ("baseline", 0, []),
])
def test_auxiliary_devices(protocol, aux, names):
    nodes, _ = topo.build_standard(protocol, topo.Calibration())
    assert topo.count_auxiliary_devices(nodes) == (aux, names)


def test_refresh_stalls_the_stream():
    res = experiment.run_once(short_scenario("isatap-default", seconds=2, pings=1), 1)
    log = res.logs[1]
    delays = [r - s for s, r in log.pairs()]
    # every 13th packet waits for the refresh round trip
    stalled = [i for i in range(len(delays)) if delays[i] > min(delays) + 0.1]
    assert stalled and all(i % 13 == 12 for i in stalled)
    assert res.refreshes == 80 // 13


def test_teredo_outside_cannot_reach_private_address():
    scn = zero_scenario("teredo")
    sim = experiment.build(scn, 1)
    sim.run()
    meta = PacketMeta(sim.new_packet_id(), 9, "data", sim.now)
    p = Packet((codec.Ipv4Header(IPv4Address("203.0.113.1"), IPv4Address("10.0.0.2"), 17),
                codec.UdpHeader(1, 2)), b"x", meta)
    sim.schedule(sim.now, sim._send_v4_safe, sim.nodes["r_border"], codec.encode(p), meta)
    sim.run()
    assert [r.reason for r in sim.trace if r.flow_id == 9 and r.event == "drop"] == ["nat_no_binding"]
