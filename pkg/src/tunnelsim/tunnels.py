"""Tunnel endpoint state machines for 6to4, Teredo and ISATAP, plus a full-cone NAT.

Everything here is pure packet manipulation; timing and delivery belong to
:mod:`tunnelsim.netsim`, which owns these objects.
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address, IPv6Address, IPv6Network

from . import addressing as addr
from . import codec
from .codec import (
    NH_ICMPV6,
    PROTO_IPV6,
    PROTO_UDP,
    ROUTER_ADVERT,
    ROUTER_SOLICIT,
    SETUP_CONFIRM,
    TEREDO_PORT,
    TUNNEL_REFRESH,
    EchoHeader,
    Ipv4Header,
    Ipv6Header,
    Packet,
    PacketMeta,
    UdpHeader,
)


class Protocol(str, enum.Enum):
    SIX_TO_FOUR = "6to4"
    TEREDO = "teredo"
    ISATAP = "isatap"

    @property
    def display(self) -> str:
        return {"6to4": "6to4", "teredo": "Teredo", "isatap": "ISATAP"}[self.value]


class Phase(str, enum.Enum):
    IDLE = "idle"
    SETUP_PENDING = "setup_pending"
    ESTABLISHED = "established"


# Bytes added in front of the inner IPv6 packet.
OVERHEAD = {Protocol.SIX_TO_FOUR: 20, Protocol.ISATAP: 20, Protocol.TEREDO: 28}

# Data packets between two refreshes. 6to4 draws 18 or 19 each cycle.
REFRESH_EVERY = {Protocol.ISATAP: 13, Protocol.TEREDO: 21}
SIX_TO_FOUR_REFRESH_CHOICES = (18, 19)

TEREDO_CLIENT_PORT = 5000
ALL_ROUTERS = IPv6Address("ff02::2")
TEREDO_LINK_LOCAL = IPv6Address("fe80::ffff:ffff:ffff")


class Drop(Exception):
    """Packet must be discarded; ``reason`` ends up in the trace."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class TunnelStateError(RuntimeError):
    pass


class SetupError(RuntimeError):
    pass


@dataclass
class RefreshPolicy:
    protocol: Protocol
    rng: random.Random = field(default_factory=lambda: random.Random(0))

    def next_interval(self) -> int:
        if self.protocol is Protocol.SIX_TO_FOUR:
            return self.rng.choice(SIX_TO_FOUR_REFRESH_CHOICES)
        return REFRESH_EVERY[self.protocol]


@dataclass
class TunnelState:
    protocol: Protocol
    local_v4: IPv4Address
    server: str
    server_v4: IPv4Address
    policy: RefreshPolicy
    relay_v4: IPv4Address | None = None
    local_port: int = TEREDO_CLIENT_PORT
    phase: Phase = Phase.IDLE
    assigned_prefix: IPv6Network | None = None
    local_v6: IPv6Address | None = None
    server_v6: IPv6Address | None = None
    data_packets_since_refresh: int = 0
    refresh_interval: int = 0
    refreshes_sent: int = 0

    @property
    def established(self) -> bool:
        return self.phase is Phase.ESTABLISHED


def link_local(protocol: Protocol, v4: IPv4Address) -> IPv6Address:
    if protocol is Protocol.TEREDO:
        return TEREDO_LINK_LOCAL
    return addr.synth_isatap("fe80::/64", v4)


# -- encapsulation ----------------------------------------------------------------


def wrap(
    p: Packet,
    protocol: Protocol,
    src_v4: IPv4Address,
    dst_v4: IPv4Address,
    src_port: int = TEREDO_PORT,
    dst_port: int = TEREDO_PORT,
) -> Packet:
    """Put the outer IPv4 (and for Teredo, UDP) headers in front of ``p``."""
    if not p.layers or not isinstance(p.layers[0], Ipv6Header):
        raise ValueError("only IPv6 packets can be tunneled")
    if protocol is Protocol.TEREDO:
        outer = (Ipv4Header(src_v4, dst_v4, PROTO_UDP), UdpHeader(src_port, dst_port))
    else:
        outer = (Ipv4Header(src_v4, dst_v4, PROTO_IPV6),)
    return replace(p, layers=outer + tuple(p.layers))


def encap(p: Packet, state: TunnelState, endpoint_v4: IPv4Address) -> Packet:
    if state.phase is not Phase.ESTABLISHED:
        raise TunnelStateError(f"encapsulation attempted in phase {state.phase.value}")
    return wrap(p, state.protocol, state.local_v4, endpoint_v4, state.local_port, TEREDO_PORT)


def decap(p: Packet, protocol: Protocol) -> Packet:
    """Strip the tunnel headers. Raises :class:`Drop` on a layering mismatch."""
    layers = p.layers
    outer = layers[0] if layers else None
    if not isinstance(outer, Ipv4Header):
        raise Drop("layering_mismatch", "no outer IPv4 header")
    if protocol is Protocol.TEREDO:
        ok = (
            outer.protocol == PROTO_UDP
            and len(layers) > 2
            and isinstance(layers[1], UdpHeader)
            and TEREDO_PORT in (layers[1].src_port, layers[1].dst_port)
            and isinstance(layers[2], Ipv6Header)
        )
        n = 2
    else:
        ok = outer.protocol == PROTO_IPV6 and len(layers) > 1 and isinstance(layers[1], Ipv6Header)
        n = 1
    if not ok:
        raise Drop("layering_mismatch", f"{protocol.value} cannot decapsulate this packet")
    return replace(p, layers=layers[n:])


def endpoint_for(state: TunnelState, dst: IPv6Address) -> IPv4Address:
    """IPv4 tunnel endpoint for an IPv6 destination, seen from the client side."""
    if state.protocol is Protocol.SIX_TO_FOUR:
        if addr.is_6to4(dst):
            return addr.parse_6to4(dst)
        if state.relay_v4 is None:
            raise Drop("no_endpoint", "no 6to4 relay configured")
        return state.relay_v4
    if state.protocol is Protocol.ISATAP:
        if state.assigned_prefix is not None and dst in state.assigned_prefix and addr.is_isatap(dst):
            return addr.parse_isatap(dst)[1]
        return state.server_v4
    if state.relay_v4 is None:
        raise Drop("no_endpoint", "no Teredo relay configured")
    return state.relay_v4


def gateway_endpoint(protocol: Protocol, dst: IPv6Address, teredo_prefix=addr.TEREDO_PREFIX):
    """``(v4, port)`` a relay/router uses to reach a tunnel client address."""
    try:
        if protocol is Protocol.SIX_TO_FOUR:
            return addr.parse_6to4(dst), None
        if protocol is Protocol.ISATAP:
            return addr.parse_isatap(dst)[1], None
        f = addr.parse_teredo(dst, teredo_prefix)
        return f.mapped_v4, f.mapped_port
    except addr.NotATunnelAddress as exc:
        raise Drop("no_endpoint", str(exc)) from exc


# -- setup handshake ------------------------------------------------------------------


def _control(
    protocol: Protocol,
    src6: IPv6Address,
    dst6: IPv6Address,
    src4: IPv4Address,
    dst4: IPv4Address,
    echo_type: int,
    code: int = 0,
    body: bytes = b"",
    sport: int = TEREDO_PORT,
    dport: int = TEREDO_PORT,
    meta: PacketMeta = PacketMeta(),
) -> Packet:
    inner = Packet((Ipv6Header(src6, dst6, NH_ICMPV6, 255), EchoHeader(echo_type, code)), body, meta)
    return wrap(inner, protocol, src4, dst4, sport, dport)


def setup_request(state: TunnelState, meta: PacketMeta = PacketMeta()) -> Packet:
    """First handshake message; moves the client to ``setup_pending``."""
    if state.phase is not Phase.IDLE:
        raise SetupError(f"setup requested in phase {state.phase.value}")
    state.phase = Phase.SETUP_PENDING
    return _control(
        state.protocol,
        link_local(state.protocol, state.local_v4),
        ALL_ROUTERS,
        state.local_v4,
        state.server_v4,
        ROUTER_SOLICIT,
        sport=state.local_port,
        meta=meta,
    )


_ASSIGN = struct.Struct("!16sBH4s")


def assignment(
    request: Packet,
    protocol: Protocol,
    server_v6: IPv6Address,
    *,
    isatap_prefix: IPv6Network | None = None,
    teredo_prefix: IPv6Network = addr.TEREDO_PREFIX,
    meta: PacketMeta = PacketMeta(),
) -> Packet:
    """Server answer to a setup request: the prefix the client should use.

    For Teredo the answer also carries the address and port the request was
    seen from, i.e. the client's NAT mapping.
    """
    outer = request.layers[0]
    inner = request.layers[-2]
    if not isinstance(outer, Ipv4Header) or not isinstance(inner, Ipv6Header):
        raise Drop("layering_mismatch", "setup request is not tunneled IPv6")
    sport = dport = TEREDO_PORT
    mapped_port = 0
    if protocol is Protocol.TEREDO:
        udp = request.layers[1]
        if not isinstance(udp, UdpHeader):
            raise Drop("protocol_violation", "Teredo setup must use UDP")
        sport, dport = udp.dst_port, udp.src_port
        mapped_port = udp.src_port
        prefix = IPv6Network(((int(teredo_prefix.network_address)) | (int(outer.dst) << 64), 64))
    elif protocol is Protocol.SIX_TO_FOUR:
        prefix = addr.prefix_6to4(outer.src)
    else:
        if isatap_prefix is None:
            raise SetupError("ISATAP router has no prefix to advertise")
        prefix = isatap_prefix
    body = _ASSIGN.pack(prefix.network_address.packed, prefix.prefixlen, mapped_port, outer.src.packed)
    return _control(
        protocol, server_v6, inner.src, outer.dst, outer.src, ROUTER_ADVERT, 0, body, sport, dport, meta
    )


def complete_setup(state: TunnelState, advert: Packet, meta: PacketMeta = PacketMeta()) -> Packet:
    """Consume the prefix assignment, pick the tunnel address, return the
    confirmation. The client is ``established`` from here on."""
    if state.phase is not Phase.SETUP_PENDING:
        raise SetupError(f"prefix assignment received in phase {state.phase.value}")
    raw_prefix, plen, mapped_port, mapped_v4 = _ASSIGN.unpack(advert.payload[: _ASSIGN.size])
    prefix = IPv6Network((IPv6Address(raw_prefix), plen))
    inner = advert.layers[-2]
    state.server_v6 = inner.src
    state.assigned_prefix = prefix
    if state.protocol is Protocol.TEREDO:
        fields = addr.TeredoFields(state.server_v4, addr.TEREDO_CONE_FLAG, mapped_port, IPv4Address(mapped_v4))
        state.local_v6 = addr.synth_teredo(fields, int(prefix.network_address) >> 96)
    elif state.protocol is Protocol.SIX_TO_FOUR:
        state.local_v6 = addr.synth_6to4(state.local_v4, 0, 1)
    else:
        state.local_v6 = addr.synth_isatap(prefix, state.local_v4)
    state.phase = Phase.ESTABLISHED
    state.data_packets_since_refresh = 0
    state.refresh_interval = state.policy.next_interval()
    return _control(
        state.protocol,
        state.local_v6,
        state.server_v6,
        state.local_v4,
        state.server_v4,
        SETUP_CONFIRM,
        sport=state.local_port,
        meta=meta,
    )


# -- refresh ----------------------------------------------------------------------


def refresh_packet(state: TunnelState, meta: PacketMeta = PacketMeta()) -> Packet:
    """Keepalive to the tunnel server: 48-byte inner IPv6 (header + 8-byte body)."""
    return _control(
        state.protocol,
        state.local_v6,
        state.server_v6 or ALL_ROUTERS,
        state.local_v4,
        state.server_v4,
        TUNNEL_REFRESH,
        sport=state.local_port,
        meta=meta,
    )


def refresh_reply(request: Packet, meta: PacketMeta = PacketMeta()) -> Packet:
    """Server side: echo the refresh back along the path it came from."""
    outer = request.layers[0]
    inner = request.layers[-2]
    protocol = Protocol.TEREDO if isinstance(request.layers[1], UdpHeader) else Protocol.ISATAP
    sport = dport = TEREDO_PORT
    if protocol is Protocol.TEREDO:
        sport, dport = request.layers[1].dst_port, request.layers[1].src_port
    return _control(protocol, inner.dst, inner.src, outer.dst, outer.src, TUNNEL_REFRESH, 1, b"", sport, dport, meta)


def count_data(state: TunnelState) -> bool:
    """Count one tunneled data packet; True when a refresh is due now."""
    if state.phase is not Phase.ESTABLISHED:
        raise TunnelStateError("data sent before the tunnel is established")
    state.data_packets_since_refresh += 1
    if state.data_packets_since_refresh < state.refresh_interval:
        return False
    state.data_packets_since_refresh = 0
    state.refresh_interval = state.policy.next_interval()
    state.refreshes_sent += 1
    return True


def on_data_sent(state: TunnelState, meta: PacketMeta = PacketMeta()) -> Packet | None:
    """Count one tunneled data packet. Returns the refresh packet due now, if any.

    The refresh goes out ahead of the packet that completed the interval; the
    owner holds that packet (and everything queued behind it) until the
    server's reply comes back.
    """
    return refresh_packet(state, meta) if count_data(state) else None


# -- NAT --------------------------------------------------------------------------


@dataclass
class NatBinding:
    internal: tuple[IPv4Address, int]
    external: tuple[IPv4Address, int]
    last_used: float = 0.0


class NatTable:
    """Endpoint-independent (full-cone) mapping for UDP. Anything else that
    tries to leave is dropped, protocol 41 included."""

    def __init__(self, external_v4: IPv4Address, first_port: int = 40000):
        self.external_v4 = addr.v4(external_v4)
        self._next_port = first_port
        self.by_internal: dict[tuple[IPv4Address, int], NatBinding] = {}
        self.by_external: dict[int, NatBinding] = {}

    def outbound(self, p: Packet, now: float = 0.0) -> Packet:
        outer = p.layers[0]
        if not isinstance(outer, Ipv4Header):
            raise Drop("nat_not_ipv4")
        self._admit(outer.protocol)
        udp: UdpHeader = p.layers[1]  # type: ignore[assignment]
        b = self._bind(outer.src, udp.src_port, now)
        layers = (
            replace(outer, src=self.external_v4, header_checksum=None),
            replace(udp, src_port=b.external[1], checksum=None),
        ) + p.layers[2:]
        return replace(p, layers=layers)

    def inbound(self, p: Packet, now: float = 0.0) -> Packet:
        outer = p.layers[0]
        if not isinstance(outer, Ipv4Header) or outer.protocol != PROTO_UDP:
            raise Drop("nat_no_binding", "only UDP is translated inbound")
        udp: UdpHeader = p.layers[1]  # type: ignore[assignment]
        b = self._lookup(outer.dst, udp.dst_port, now)
        layers = (
            replace(outer, dst=b.internal[0], header_checksum=None),
            replace(udp, dst_port=b.internal[1], checksum=None),
        ) + p.layers[2:]
        return replace(p, layers=layers)

    # same translation on encoded datagrams, used on the forwarding path

    def outbound_wire(self, data: bytes, now: float = 0.0) -> bytes:
        if data[0] >> 4 != 4:
            raise Drop("nat_not_ipv4")
        self._admit(data[9])
        sport = codec.udp_ports(data)[0]
        b = self._bind(IPv4Address(data[12:16]), sport, now)
        return codec.rewrite_udp4(data, src=self.external_v4, sport=b.external[1])

    def inbound_wire(self, data: bytes, now: float = 0.0) -> bytes:
        if data[0] >> 4 != 4 or data[9] != PROTO_UDP:
            raise Drop("nat_no_binding", "only UDP is translated inbound")
        b = self._lookup(IPv4Address(data[16:20]), codec.udp_ports(data)[1], now)
        return codec.rewrite_udp4(data, dst=b.internal[0], dport=b.internal[1])

    @staticmethod
    def _admit(protocol: int) -> None:
        if protocol == PROTO_IPV6:
            raise Drop("nat_proto41", "NAT does not pass IPv6-in-IPv4")
        if protocol != PROTO_UDP:
            raise Drop("nat_unsupported_protocol", f"protocol {protocol}")

    def _bind(self, src: IPv4Address, port: int, now: float) -> NatBinding:
        key = (src, port)
        b = self.by_internal.get(key)
        if b is None:
            b = NatBinding(key, (self.external_v4, self._allocate()), now)
            self.by_internal[key] = b
            self.by_external[b.external[1]] = b
        b.last_used = now
        return b

    def _lookup(self, dst: IPv4Address, port: int, now: float) -> NatBinding:
        b = self.by_external.get(port)
        if b is None or dst != self.external_v4:
            raise Drop("nat_no_binding", f"nothing bound to port {port}")
        b.last_used = now
        return b

    def _allocate(self) -> int:
        port = self._next_port
        self._next_port += 1
        if self._next_port > 0xFFFF:
            self._next_port = 1024
        return port


def nat_apply_outbound(p: Packet, table: NatTable, now: float = 0.0) -> Packet:
    return table.outbound(p, now)


def nat_apply_inbound(p: Packet, table: NatTable, now: float = 0.0) -> Packet:
    return table.inbound(p, now)
