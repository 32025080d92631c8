"""Discrete-event packet simulator.

Time is a float in milliseconds. Events run in ``(time, insertion order)``
order, so a run is a pure function of its configuration and seed.

Each node is a single FIFO processor: a frame waits until the node is free,
then occupies it for the cost of the operation it needs (forward, encap,
decap, nat, dns_lookup, setup, refresh, deliver). Each link direction is a
FIFO transmitter: serialization ``bits / rate`` then propagation ``delay``.
Frames travel as encoded bytes; nodes decode only when they have to look past
the outer destination. Routers do not touch TTL / hop limit.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address, IPv6Network
from typing import Callable, Iterable, NamedTuple

import networkx as nx

from . import addressing as addr
from . import codec
from . import tunnels as tn
from .codec import (
    ECHO_REPLY_V4,
    ECHO_REPLY_V6,
    ECHO_REQUEST_V4,
    ECHO_REQUEST_V6,
    NH_ICMPV6,
    PROTO_ICMP,
    PROTO_IPV6,
    PROTO_UDP,
    ROUTER_ADVERT,
    ROUTER_SOLICIT,
    SETUP_CONFIRM,
    TEREDO_PORT,
    TUNNEL_REFRESH,
    CodecError,
    EchoHeader,
    Ipv4Header,
    Ipv6Header,
    Packet,
    PacketMeta,
    UdpHeader,
)
from .tunnels import Drop, Phase, Protocol

DNS_PORT = 53
DNS_CLIENT_PORT = 5353

ROLES = ("host", "router", "nat", "dns", "relay", "server")
STACKS = ("v4", "v6", "dual")
TUNNEL_ROLES = frozenset(
    {
        "isatap_host",
        "isatap_router",
        "6to4_host",
        "6to4_router",
        "6to4_relay",
        "teredo_client",
        "teredo_server",
        "teredo_relay",
    }
)
COST_KEYS = ("forward", "encap", "decap", "copy_per_kb", "nat", "dns_lookup", "setup", "refresh", "deliver")
EVENTS = ("sent", "received", "encap", "decap", "drop", "refresh", "setup_msg", "dns_query", "dns_reply")
TRACE_COLUMNS = ("time_ms", "node", "packet_id", "flow_id", "event", "reason", "bytes")

_CLIENT_ROLE = {Protocol.ISATAP: "isatap_host", Protocol.SIX_TO_FOUR: "6to4_host", Protocol.TEREDO: "teredo_client"}
_SERVER_ROLE = {Protocol.ISATAP: "isatap_router", Protocol.SIX_TO_FOUR: "6to4_router", Protocol.TEREDO: "teredo_server"}
_GATEWAY_ROLE = {Protocol.ISATAP: "isatap_router", Protocol.SIX_TO_FOUR: "6to4_relay", Protocol.TEREDO: "teredo_relay"}


class ConfigError(ValueError):
    pass


class RunawayError(RuntimeError):
    """Event cap exceeded."""


class InvariantViolation(RuntimeError):
    pass


@dataclass
class NodeSpec:
    id: str
    role: str
    stack: str
    v4: tuple[IPv4Address, ...] = ()
    v6: tuple[IPv6Address, ...] = ()
    tunnel_roles: frozenset[str] = frozenset()
    costs: dict[str, float] = field(default_factory=dict)
    label: str = ""
    nat_inside: str | None = None
    dns_name: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"node {self.id}: unknown role {self.role!r}")
        if self.stack not in STACKS:
            raise ConfigError(f"node {self.id}: unknown stack {self.stack!r}")
        unknown = set(self.tunnel_roles) - TUNNEL_ROLES
        if unknown:
            raise ConfigError(f"node {self.id}: unknown tunnel roles {sorted(unknown)}")
        bad = set(self.costs) - set(COST_KEYS)
        if bad:
            raise ConfigError(f"node {self.id}: unknown cost keys {sorted(bad)}")
        if self.stack == "v6" and self.v4:
            raise ConfigError(f"node {self.id}: v6-only node has IPv4 addresses")
        if self.stack == "v4" and self.v6:
            raise ConfigError(f"node {self.id}: v4-only node has IPv6 addresses")

    @property
    def has_v4(self) -> bool:
        return self.stack in ("v4", "dual")

    @property
    def has_v6(self) -> bool:
        return self.stack in ("v6", "dual")


@dataclass
class LinkSpec:
    a: str
    b: str
    delay: float = 0.0
    rate: float = 1e7  # bits per ms
    mtu: int = 1600

    def __post_init__(self):
        if self.delay < 0:
            raise ConfigError(f"link {self.a}-{self.b}: negative delay")
        if self.rate <= 0:
            raise ConfigError(f"link {self.a}-{self.b}: rate must be positive")


class TraceRecord(NamedTuple):
    time: float
    node: str
    packet_id: int
    flow_id: int
    event: str
    reason: str = ""
    size: int = 0
    seq: int = -1
    kind: str = ""


def write_trace_csv(records: Iterable[TraceRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in records:
        w.writerow((f"{r.time:.4f}", r.node, r.packet_id, r.flow_id, r.event, r.reason, r.size))


def trace_to_csv(records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace_csv(records, buf)
    return buf.getvalue()


@dataclass
class SimParams:
    protocol: str = "baseline"
    seed: int = 0
    teredo_prefix: IPv6Network = addr.TEREDO_PREFIX
    isatap_prefix: IPv6Network = IPv6Network("2001:db8:2::/64")
    max_events: int = 20_000_000
    setup_at: float = 0.0


class _Node:
    __slots__ = ("spec", "id", "busy_until", "v4", "v6", "v4_first", "v6_first", "nat", "inside", "tunnel",
                 "tq", "stalled", "costs", "app")

    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.id = spec.id
        self.busy_until = 0.0
        self.v4 = {a.packed for a in spec.v4}
        self.v6 = {a.packed for a in spec.v6}
        self.v4_first = spec.v4[0] if spec.v4 else None
        self.v6_first = spec.v6[0] if spec.v6 else None
        self.nat: tn.NatTable | None = None
        self.inside = spec.nat_inside
        self.tunnel: tn.TunnelState | None = None
        self.tq: deque = deque()  # (packet, already_counted)
        self.stalled = False
        self.costs = {k: float(spec.costs.get(k, 0.0)) for k in COST_KEYS}
        self.app: _HostApp | None = None

    def cost(self, op: str, nbytes: int) -> float:
        c = self.costs[op]
        if op in ("encap", "decap"):
            c += self.costs["copy_per_kb"] * nbytes / 1000.0
        return c


class _HostApp:
    """Per-host application state: DNS cache, pending sends, ping bookkeeping."""

    def __init__(self):
        self.resolved: dict[str, IPv6Address] = {}
        self.waiting: dict[str, list[tuple[Packet, str]]] = {}
        self.dns_pending: dict[int, tuple[str, float]] = {}


class Simulation:
    def __init__(self, nodes: list[NodeSpec], links: list[LinkSpec], params: SimParams | None = None):
        self.params = params or SimParams()
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self._pid = itertools.count(1)
        self.events_processed = 0
        self.trace: list[TraceRecord] = []
        self.rng = random.Random(self.params.seed)
        self.nodes: dict[str, _Node] = {}
        for spec in nodes:
            if spec.id in self.nodes:
                raise ConfigError(f"duplicate node {spec.id}")
            self.nodes[spec.id] = _Node(spec)
        self.links: dict[tuple[str, str], LinkSpec] = {}
        self._link_busy: dict[tuple[str, str], float] = {}
        for ln in links:
            for u, v in ((ln.a, ln.b), (ln.b, ln.a)):
                if u not in self.nodes or v not in self.nodes:
                    raise ConfigError(f"link {ln.a}-{ln.b} references an unknown node")
                self.links[(u, v)] = ln
                self._link_busy[(u, v)] = 0.0
        self.dns_records: dict[str, IPv6Address] = {}
        self.setup_log: dict[str, dict] = {}
        self.injected: dict[int, int] = {}
        self._build_routes()
        self._init_roles()

    # -- engine -------------------------------------------------------------------

    def schedule(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            raise InvariantViolation(f"event scheduled in the past ({t} < {self.now})")
        heapq.heappush(self._queue, (t, next(self._seq), fn, args))

    def run(self, until: float | None = None) -> list[TraceRecord]:
        q = self._queue
        cap = self.params.max_events
        pop = heapq.heappop
        while q:
            if until is not None and q[0][0] > until:
                break
            t, _, fn, args = pop(q)
            self.now = t
            fn(*args)
            self.events_processed += 1
            if self.events_processed > cap:
                raise RunawayError(f"more than {cap} events processed")
        if until is not None and self.now < until:
            self.now = until
        return self.trace

    def new_packet_id(self) -> int:
        return next(self._pid)

    def record(self, node: str, event: str, meta: PacketMeta, size: int = 0, reason: str = "") -> None:
        self.trace.append(
            TraceRecord(self.now, node, meta.packet_id, meta.flow_id, event, reason, size, meta.seq, meta.kind)
        )

    # -- topology -----------------------------------------------------------------

    def _build_routes(self) -> None:
        self.owner_v4: dict[bytes, str] = {}
        self.owner_v6: dict[bytes, str] = {}
        for n in self.nodes.values():
            for a in n.v4:
                self.owner_v4[a] = n.id
            for a in n.v6:
                self.owner_v6[a] = n.id
        g4, g6 = nx.Graph(), nx.Graph()
        for n in self.nodes.values():
            if n.spec.has_v4:
                g4.add_node(n.id)
            if n.spec.has_v6:
                g6.add_node(n.id)
        for (u, v) in self.links:
            if g4.has_node(u) and g4.has_node(v):
                g4.add_edge(u, v)
            if g6.has_node(u) and g6.has_node(v):
                g6.add_edge(u, v)
        self.next_v4 = _next_hops(g4)
        self.next_v6 = _next_hops(g6)
        # IPv6 prefixes reachable only through a tunnel gateway
        self.gateways: list[tuple[IPv6Network, str, Protocol]] = []
        for n in self.nodes.values():
            roles = n.spec.tunnel_roles
            if "isatap_router" in roles:
                self.gateways.append((self.params.isatap_prefix, n.id, Protocol.ISATAP))
            if "6to4_relay" in roles:
                self.gateways.append((IPv6Network("2002::/16"), n.id, Protocol.SIX_TO_FOUR))
            if "teredo_relay" in roles:
                self.gateways.append((self.params.teredo_prefix, n.id, Protocol.TEREDO))

    def _init_roles(self) -> None:
        for n in self.nodes.values():
            if n.spec.role == "nat":
                if len(n.spec.v4) < 2 or not n.inside:
                    raise ConfigError(f"NAT {n.id} needs an inside neighbour and two IPv4 addresses")
                n.nat = tn.NatTable(n.spec.v4[0])
            if n.spec.role == "host":
                n.app = _HostApp()
            if n.spec.dns_name and n.v6_first is not None:
                self.dns_records[n.spec.dns_name] = n.v6_first

    def find(self, role: str | None = None, tunnel_role: str | None = None) -> list[str]:
        out = []
        for n in self.nodes.values():
            if role is not None and n.spec.role != role:
                continue
            if tunnel_role is not None and tunnel_role not in n.spec.tunnel_roles:
                continue
            out.append(n.id)
        return out

    # -- links --------------------------------------------------------------------

    def transmit(self, u: str, v: str, data: bytes, meta: PacketMeta) -> None:
        ln = self.links.get((u, v))
        if ln is None:
            raise InvariantViolation(f"no link {u}->{v}")
        if len(data) > ln.mtu:
            self.record(u, "drop", meta, len(data), "mtu_exceeded")
            return
        start = max(self.now, self._link_busy[(u, v)])
        done = start + len(data) * 8 / ln.rate
        self._link_busy[(u, v)] = done
        self.schedule(done + ln.delay, self._arrive, v, data, meta, u)

    # -- node processing ----------------------------------------------------------

    def process(self, node: _Node, op: str, nbytes: int, fn: Callable, *args) -> None:
        start = max(self.now, node.busy_until)
        node.busy_until = start + node.cost(op, nbytes)
        self.schedule(node.busy_until, fn, *args)

    def _arrive(self, nid: str, data: bytes, meta: PacketMeta, prev: str) -> None:
        node = self.nodes[nid]
        try:
            op = self._classify(node, data, prev)
        except CodecError as exc:
            self.record(nid, "drop", meta, len(data), f"decode_error:{type(exc).__name__}")
            return
        self.process(node, op, len(data), self._handle, node, data, meta, prev)

    def _classify(self, node: _Node, data: bytes, prev: str) -> str:
        version = codec.peek_version(data)
        if node.nat is not None:
            return "nat"
        if version == 4:
            dst = codec.peek_ipv4_dst(data)
            if dst not in node.v4:
                return "forward"
            proto = codec.peek_ipv4_proto(data)
            if proto == PROTO_IPV6:
                return "decap"
            if proto == PROTO_UDP:
                sport, dport = codec.udp_ports(data)
                if TEREDO_PORT in (sport, dport):
                    return "decap"
                if dport == DNS_PORT and node.spec.role == "dns":
                    return "dns_lookup"
            return "deliver"
        if version == 6:
            dst = codec.peek_ipv6_dst(data)
            if dst in node.v6:
                return "deliver"
            if self._gateway_here(node, dst) is not None:
                return "encap"
            return "forward"
        raise codec.UnknownProtocol(f"IP version {version}")

    def _gateway_here(self, node: _Node, dst: bytes):
        if not node.spec.tunnel_roles:
            return None
        if dst in self.owner_v6 and self.owner_v6[dst] in self.next_v6.get(node.id, {}):
            return None
        a = IPv6Address(dst)
        for net, gw, proto in self.gateways:
            if gw == node.id and a in net:
                return proto
        return None

    def _handle(self, node: _Node, data: bytes, meta: PacketMeta, prev: str) -> None:
        try:
            if node.nat is not None:
                self._nat(node, data, meta, prev)
            elif data[0] >> 4 == 4:
                dst = data[16:20]
                if dst in node.v4:
                    self._local_v4(node, data, meta)
                else:
                    self._forward_v4(node, data, meta, dst)
            else:
                dst = data[24:40]
                if dst in node.v6:
                    self._local_v6(node, codec.decode(data, meta), meta)
                else:
                    proto = self._gateway_here(node, dst)
                    if proto is not None:
                        self._gateway_encap(node, data, meta, proto)
                    else:
                        self._forward_v6(node, data, meta, dst)
        except Drop as d:
            self.record(node.id, "drop", meta, len(data), d.reason)
        except CodecError as exc:
            self.record(node.id, "drop", meta, len(data), f"decode_error:{type(exc).__name__}")

    def _forward_v4(self, node: _Node, data: bytes, meta: PacketMeta, dst: bytes) -> None:
        owner = self.owner_v4.get(dst)
        if owner is None:
            raise Drop("no_route", f"no IPv4 owner for {IPv4Address(dst)}")
        hop = self.next_v4.get(node.id, {}).get(owner)
        if hop is None:
            raise Drop("no_route", f"{node.id} cannot reach {owner} over IPv4")
        self.transmit(node.id, hop, data, meta)

    def _forward_v6(self, node: _Node, data: bytes, meta: PacketMeta, dst: bytes) -> None:
        routes = self.next_v6.get(node.id, {})
        owner = self.owner_v6.get(dst)
        if owner is not None and owner in routes:
            self.transmit(node.id, routes[owner], data, meta)
            return
        a = IPv6Address(dst)
        for net, gw, _ in self.gateways:
            if a in net and gw in routes:
                self.transmit(node.id, routes[gw], data, meta)
                return
        raise Drop("no_route", f"{node.id} has no IPv6 route to {a}")

    def _send_v4(self, node: _Node, data: bytes, meta: PacketMeta) -> None:
        """Originate an IPv4 frame at ``node`` (already processed)."""
        self._forward_v4(node, data, meta, data[16:20])

    # -- NAT ------------------------------------------------------------------------

    def _nat(self, node: _Node, data: bytes, meta: PacketMeta, prev: str) -> None:
        if data[0] >> 4 != 4:
            raise Drop("nat_not_ipv4")
        if prev == node.inside:
            out = node.nat.outbound_wire(data, self.now)
            self._forward_v4(node, out, meta, out[16:20])
            return
        dst = data[16:20]
        if dst == node.nat.external_v4.packed:
            out = node.nat.inbound_wire(data, self.now)
            self._forward_v4(node, out, meta, out[16:20])
            return
        if dst in node.v4:
            raise Drop("no_listener", "NAT box is not an endpoint")
        owner = self.owner_v4.get(dst)
        if owner is not None and self.next_v4.get(node.id, {}).get(owner) == node.inside:
            raise Drop("nat_no_binding", "private address is not reachable from outside")
        self._forward_v4(node, data, meta, dst)

    # -- tunnels ----------------------------------------------------------------------

    def _decap_protocol(self, node: _Node, pkt: Packet) -> Protocol:
        roles = node.spec.tunnel_roles
        if pkt.layers[0].protocol == PROTO_IPV6:
            if roles & {"isatap_host", "isatap_router"}:
                return Protocol.ISATAP
            if roles & {"6to4_host", "6to4_router", "6to4_relay"}:
                return Protocol.SIX_TO_FOUR
            if "teredo_relay" in roles or "teredo_client" in roles or "teredo_server" in roles:
                return Protocol.TEREDO  # decap() turns this into a layering drop
        else:
            if roles & {"teredo_client", "teredo_server", "teredo_relay"}:
                return Protocol.TEREDO
            if roles:
                return Protocol.ISATAP
        raise Drop("layering_mismatch", f"{node.id} terminates no tunnel")

    def _check_decap(self, node: _Node, proto: int) -> None:
        """Layering check on the outer protocol: Teredo ends only take UDP,
        protocol-41 ends only take protocol 41."""
        roles = node.spec.tunnel_roles
        teredo = bool(roles & {"teredo_client", "teredo_server", "teredo_relay"})
        p41 = bool(roles & {"isatap_host", "isatap_router", "6to4_host", "6to4_router", "6to4_relay"})
        if proto == PROTO_IPV6 and not p41:
            raise Drop("layering_mismatch", f"{node.id} does not terminate protocol-41 tunnels")
        if proto == PROTO_UDP and not teredo:
            raise Drop("layering_mismatch", f"{node.id} does not terminate IPv6-in-UDP tunnels")

    def _gateway_encap(self, node: _Node, inner: bytes, meta: PacketMeta, proto: Protocol) -> None:
        v4, port = tn.gateway_endpoint(proto, IPv6Address(inner[24:40]), self.params.teredo_prefix)
        if proto is Protocol.TEREDO:
            data = codec.encapsulate(inner, node.v4_first, v4, TEREDO_PORT, port or TEREDO_PORT)
        else:
            data = codec.encapsulate(inner, node.v4_first, v4)
        self.record(node.id, "encap", meta, len(data), proto.value)
        self._send_v4(node, data, meta)

    def _local_v4(self, node: _Node, data: bytes, meta: PacketMeta) -> None:
        proto = data[9]
        if proto == PROTO_IPV6 or (proto == PROTO_UDP and TEREDO_PORT in codec.udp_ports(data)):
            self._check_decap(node, proto)
            inner = codec.decapsulate(data)
            self.record(node.id, "decap", meta, len(data))
            inner_dst = inner[24:40]
            # link-local and multicast control traffic terminates at the tunnel end
            if inner_dst in node.v6 or inner_dst[:2] == b"\xfe\x80" or inner_dst[0] == 0xFF:
                outer = codec.decode(data, meta)
                self._local_v6(node, tn.decap(outer, self._decap_protocol(node, outer)), meta, outer=outer)
            else:
                self._forward_v6(node, inner, meta, inner_dst)
            return
        if proto == PROTO_UDP:
            sport, dport = codec.udp_ports(data)
            if node.spec.role == "dns" and dport == DNS_PORT:
                self._dns_answer(node, codec.decode(data, meta), meta)
                return
            if sport == DNS_PORT and node.app is not None:
                self._dns_reply_in(node, codec.decode(data, meta), meta)
                return
            raise Drop("no_listener", f"UDP port {dport}")
        if proto == PROTO_ICMP:
            pkt = codec.decode(data, meta)
            echo = pkt.layers[-1]
            if echo.type == ECHO_REQUEST_V4:
                self.record(node.id, "received", meta, len(data))
                hdr = pkt.layers[0]
                reply = Packet(
                    (Ipv4Header(hdr.dst, hdr.src, PROTO_ICMP), EchoHeader(ECHO_REPLY_V4, 0, echo.ident, echo.seq)),
                    pkt.payload,
                )
                rmeta = _with_kind(meta, "echo_reply")
                out = codec.encode(reply)
                self.record(node.id, "sent", rmeta, len(out))
                self._send_v4(node, out, rmeta)
            elif echo.type == ECHO_REPLY_V4:
                self.record(node.id, "received", meta, len(data))
            return
        raise Drop("no_listener", f"IPv4 protocol {proto}")

    def _local_v6(self, node: _Node, pkt: Packet, meta: PacketMeta, outer: Packet | None = None) -> None:
        last = pkt.layers[-1]
        if not isinstance(last, EchoHeader):
            self.record(node.id, "received", meta, codec.wire_len(pkt))
            return
        t = last.type
        if t == ECHO_REQUEST_V6:
            self.record(node.id, "received", meta, codec.wire_len(pkt))
            hdr = pkt.layers[0]
            reply = Packet(
                (Ipv6Header(hdr.dst, hdr.src, NH_ICMPV6, flow_label=hdr.flow_label),
                 EchoHeader(ECHO_REPLY_V6, 0, last.ident, last.seq)),
                pkt.payload,
                _with_kind(meta, "echo_reply"),
            )
            self.host_send_v6(node, reply, already_processed=True)
        elif t == ECHO_REPLY_V6:
            self.record(node.id, "received", meta, codec.wire_len(pkt))
        elif outer is None:
            raise Drop("no_listener", f"control message type {t} outside a tunnel")
        elif t == ROUTER_SOLICIT:
            self.process(node, "setup", 0, self._server_setup, node, outer, meta)
        elif t == ROUTER_ADVERT:
            self._client_advert(node, pkt, meta)
        elif t == SETUP_CONFIRM:
            self.process(node, "setup", 0, self._server_confirm, node, pkt, meta)
        elif t == TUNNEL_REFRESH and last.code == 0:
            self.process(node, "refresh", 0, self._server_refresh, node, outer, meta)
        elif t == TUNNEL_REFRESH:
            self.record(node.id, "refresh", meta, codec.wire_len(pkt), "reply")
            node.stalled = False
            self._drain(node)
        else:
            raise Drop("no_listener", f"control message type {t}")

    # -- setup & refresh ---------------------------------------------------------------

    def start_tunnel_setup(self, client: str) -> None:
        """Begin the 3-message handshake for ``client`` at the current time."""
        node = self.nodes[client]
        state = node.tunnel
        if state is None:
            raise tn.SetupError(f"{client} has no tunnel configured")
        meta = PacketMeta(self.new_packet_id(), 0, "setup", self.now)
        req = tn.setup_request(state, meta)
        self.setup_log[client] = {"request": self.now}
        data = codec.encode(req)
        self.record(client, "setup_msg", meta, len(data), "request")
        self._send_v4(node, data, meta)

    def _server_setup(self, node: _Node, request: Packet, meta: PacketMeta) -> None:
        proto = self._server_protocol(node)
        if proto is Protocol.TEREDO and request.layers[0].protocol != PROTO_UDP:
            self.record(node.id, "drop", meta, codec.wire_len(request), "protocol_violation")
            return
        ameta = PacketMeta(self.new_packet_id(), 0, "setup", self.now)
        adv = tn.assignment(
            request, proto, node.v6_first or tn.link_local(proto, node.v4_first),
            isatap_prefix=self.params.isatap_prefix, teredo_prefix=self.params.teredo_prefix, meta=ameta,
        )
        data = codec.encode(adv)
        self.record(node.id, "setup_msg", ameta, len(data), "assign")
        self._send_v4(node, data, ameta)

    def _client_advert(self, node: _Node, adv: Packet, meta: PacketMeta) -> None:
        state = node.tunnel
        if state is None:
            raise Drop("no_listener", "prefix assignment at a node without a tunnel")
        cmeta = PacketMeta(self.new_packet_id(), 0, "setup", self.now)
        confirm = tn.complete_setup(state, adv, cmeta)
        node.v6.add(state.local_v6.packed)
        self.owner_v6[state.local_v6.packed] = node.id
        if node.spec.dns_name:
            self.dns_records[node.spec.dns_name] = state.local_v6
        data = codec.encode(confirm)
        self.record(node.id, "setup_msg", cmeta, len(data), "confirm")
        self.setup_log[node.id]["prefix"] = state.assigned_prefix
        self._send_v4(node, data, cmeta)
        self._drain(node)

    def _server_confirm(self, node: _Node, confirm: Packet, meta: PacketMeta) -> None:
        self.record(node.id, "setup_msg", meta, codec.wire_len(confirm), "established")
        client = self.owner_v6.get(confirm.layers[0].src.packed)
        if client in self.setup_log:
            self.setup_log[client].setdefault("established", self.now)

    def _server_refresh(self, node: _Node, request: Packet, meta: PacketMeta) -> None:
        reply = tn.refresh_reply(request, meta)
        data = codec.encode(reply)
        self.record(node.id, "refresh", meta, len(data), "answer")
        self._send_v4(node, data, meta)

    def _server_protocol(self, node: _Node) -> Protocol:
        roles = node.spec.tunnel_roles
        for proto, role in _SERVER_ROLE.items():
            if role in roles:
                return proto
        raise Drop("no_listener", f"{node.id} is not a tunnel server")

    # -- host send path -------------------------------------------------------------

    def host_send_v6(
        self, node: _Node, pkt: Packet, already_processed: bool = False, record_sent: bool = True
    ) -> None:
        """Send an IPv6 packet that originates at ``node``, natively when a
        route exists, otherwise through the node's tunnel."""
        dst = pkt.layers[0].dst.packed
        routes = self.next_v6.get(node.id, {})
        owner = self.owner_v6.get(dst)
        native = owner is not None and owner in routes
        if not native:
            a = pkt.layers[0].dst
            native = any(a in net and gw in routes for net, gw, _ in self.gateways)
        if native or node.tunnel is None:
            data = codec.encode(pkt)
            if record_sent:
                self.record(node.id, "sent", pkt.meta, len(data))
            if already_processed:
                self._forward_v6(node, data, pkt.meta, dst)
            else:
                self.process(node, "forward", len(data), self._forward_v6_safe, node, data, pkt.meta, dst)
            return
        if record_sent:
            self.record(node.id, "sent", pkt.meta, codec.wire_len(pkt))
        node.tq.append((pkt, False))
        self._drain(node)

    def _forward_v6_safe(self, node: _Node, data: bytes, meta: PacketMeta, dst: bytes) -> None:
        try:
            self._forward_v6(node, data, meta, dst)
        except Drop as d:
            self.record(node.id, "drop", meta, len(data), d.reason)

    def _drain(self, node: _Node) -> None:
        state = node.tunnel
        while node.tq and not node.stalled and state is not None and state.phase is Phase.ESTABLISHED:
            pkt, counted = node.tq.popleft()
            if not counted and tn.count_data(state):
                rmeta = PacketMeta(self.new_packet_id(), 0, "refresh", self.now)
                data = codec.encode(tn.refresh_packet(state, rmeta))
                node.tq.appendleft((pkt, True))
                node.stalled = True
                self.record(node.id, "refresh", rmeta, len(data), "request")
                self.process(node, "encap", len(data) - tn.OVERHEAD[state.protocol],
                             self._send_v4_safe, node, data, rmeta)
                return
            self._client_encap(node, pkt)

    def _client_encap(self, node: _Node, pkt: Packet) -> None:
        state = node.tunnel
        if state.phase is not Phase.ESTABLISHED:
            raise InvariantViolation("encapsulation outside the established phase")
        if pkt.layers[0].src != state.local_v6:
            pkt = pkt.with_layers((_replace_src(pkt.layers[0], state.local_v6),) + pkt.layers[1:])
        try:
            endpoint = tn.endpoint_for(state, pkt.layers[0].dst)
        except Drop as d:
            self.record(node.id, "drop", pkt.meta, codec.wire_len(pkt), d.reason)
            return
        inner = codec.encode(pkt)
        self.process(node, "encap", len(inner), self._client_encap_done, node, inner, endpoint, pkt.meta)

    def _client_encap_done(self, node: _Node, inner: bytes, endpoint: IPv4Address, meta: PacketMeta) -> None:
        state = node.tunnel
        if state.protocol is Protocol.TEREDO:
            data = codec.encapsulate(inner, state.local_v4, endpoint, state.local_port, TEREDO_PORT)
        else:
            data = codec.encapsulate(inner, state.local_v4, endpoint)
        self.record(node.id, "encap", meta, len(data), state.protocol.value)
        self._send_v4_safe(node, data, meta)

    def _send_v4_safe(self, node: _Node, data: bytes, meta: PacketMeta) -> None:
        try:
            self._send_v4(node, data, meta)
        except Drop as d:
            self.record(node.id, "drop", meta, len(data), d.reason)

    # -- DNS --------------------------------------------------------------------------

    def dns_resolve(self, client: str, name: str, server: str | None = None) -> None:
        """Send an AAAA query for ``name``; the answer lands in the host's cache."""
        node = self.nodes[client]
        if server is None:
            servers = self.find(role="dns")
            if not servers:
                raise ConfigError("no DNS server in the topology")
            server = servers[0]
        srv = self.nodes[server]
        meta = PacketMeta(self.new_packet_id(), 0, "dns_query", self.now)
        q = Packet(
            (Ipv4Header(node.v4_first, srv.v4_first, PROTO_UDP), UdpHeader(DNS_CLIENT_PORT, DNS_PORT)),
            _dns_query_payload(meta.packet_id, name),
            meta,
        )
        node.app.dns_pending[meta.packet_id] = (name, self.now)
        data = codec.encode(q)
        self.record(client, "dns_query", meta, len(data), name)
        self.process(node, "forward", len(data), self._send_v4_safe, node, data, meta)

    def _dns_answer(self, node: _Node, q: Packet, meta: PacketMeta) -> None:
        qid, name = _parse_dns_query(q.payload)
        self.record(node.id, "dns_query", meta, codec.wire_len(q), name)
        found = self.dns_records.get(name)
        ip, udp = q.layers[0], q.layers[1]
        rmeta = _with_kind(meta, "dns_reply")
        reply = Packet(
            (Ipv4Header(ip.dst, ip.src, PROTO_UDP), UdpHeader(udp.dst_port, udp.src_port)),
            struct.pack("!I", qid) + (found.packed if found is not None else b""),
            rmeta,
        )
        data = codec.encode(reply)
        self.record(node.id, "dns_reply", rmeta, len(data), "ok" if found is not None else "nxdomain")
        self._send_v4(node, data, rmeta)

    def _dns_reply_in(self, node: _Node, r: Packet, meta: PacketMeta) -> None:
        (qid,) = struct.unpack_from("!I", r.payload)
        pending = node.app.dns_pending.pop(qid, None)
        if pending is None:
            raise Drop("no_listener", "unexpected DNS reply")
        name, _ = pending
        if len(r.payload) < 20:
            self.record(node.id, "dns_reply", meta, codec.wire_len(r), "nxdomain")
            node.app.waiting.pop(name, None)
            return
        a = IPv6Address(r.payload[4:20])
        self.record(node.id, "dns_reply", meta, codec.wire_len(r), "ok")
        node.app.resolved[name] = a
        for pkt, _ in node.app.waiting.pop(name, []):
            self.host_send_v6(node, _retarget(pkt, a), record_sent=False)

    # -- application-level sends ------------------------------------------------------

    def app_send(self, src: str, dst_name: str, pkt: Packet) -> None:
        """Application send towards a DNS name; waits for resolution if needed."""
        node = self.nodes[src]
        if pkt.meta.kind in ("data", "echo_request"):
            self.injected[pkt.meta.flow_id] = self.injected.get(pkt.meta.flow_id, 0) + 1
        a = node.app.resolved.get(dst_name)
        if a is None:
            self.record(src, "sent", pkt.meta, codec.wire_len(pkt), "awaiting_dns")
            node.app.waiting.setdefault(dst_name, []).append((pkt, dst_name))
            return
        self.host_send_v6(node, _retarget(pkt, a))

    def source_v6(self, node_id: str) -> IPv6Address:
        node = self.nodes[node_id]
        if node.tunnel is not None and node.tunnel.local_v6 is not None:
            return node.tunnel.local_v6
        if node.v6_first is not None:
            return node.v6_first
        return IPv6Address("::")


def _next_hops(g: nx.Graph) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for src in sorted(g.nodes):
        paths = nx.single_source_shortest_path(g, src)
        out[src] = {dst: path[1] for dst, path in paths.items() if len(path) > 1}
    return out


def _with_kind(meta: PacketMeta, kind: str) -> PacketMeta:
    return PacketMeta(meta.packet_id, meta.flow_id, kind, meta.created_at, meta.seq)


def _replace_src(h: Ipv6Header, src: IPv6Address) -> Ipv6Header:
    from dataclasses import replace

    return replace(h, src=src)


def _retarget(pkt: Packet, dst: IPv6Address) -> Packet:
    from dataclasses import replace

    return pkt.with_layers((replace(pkt.layers[0], dst=dst),) + pkt.layers[1:])


def _dns_query_payload(qid: int, name: str) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("!IB", qid, len(raw)) + raw


def _parse_dns_query(payload: bytes) -> tuple[int, str]:
    qid, n = struct.unpack_from("!IB", payload)
    return qid, payload[5 : 5 + n].decode("ascii")
