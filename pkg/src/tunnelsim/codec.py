"""Wire encoding of the IPv4 / IPv6 / UDP / echo header stacks used by the simulator.

A :class:`Packet` is an outermost-first tuple of header objects plus the
innermost payload. Supported stacks::

    [IPv6]                  native IPv6 (optionally + Echo when next_header=58)
    [IPv4(41), IPv6]        6to4 / ISATAP encapsulation
    [IPv4(17), UDP, IPv6]   Teredo encapsulation (one UDP port is 3544)
    [IPv4(1), Echo]         echo over plain IPv4
    [IPv4(17), UDP]         plain UDP over IPv4 (DNS, etc.)

Any stack whose innermost IP header announces echo (proto 1 / next header 58)
ends with an :class:`EchoHeader`. No IPv4 options, no IPv6 extension headers.

Length and checksum fields may be left as ``None``; :func:`encode` fills them
in and :func:`finalize` returns the packet with them filled. When they are
given, they must match what the encoder computes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address, IPv6Address

from .kernels import internet_checksum, ones_complement_sum

PROTO_ICMP = 1
PROTO_UDP = 17
PROTO_IPV6 = 41
NH_UDP = 17
NH_ICMPV6 = 58
TEREDO_PORT = 3544

IPV4_HLEN = 20
IPV6_HLEN = 40
UDP_HLEN = 8
ECHO_HLEN = 8

ECHO_REQUEST_V6, ECHO_REPLY_V6 = 128, 129
ECHO_REQUEST_V4, ECHO_REPLY_V4 = 8, 0
ROUTER_SOLICIT, ROUTER_ADVERT = 133, 134
# RFC 4443 private-experimentation types
SETUP_CONFIRM, TUNNEL_REFRESH = 200, 201

_V4 = struct.Struct("!BBHHHBBH4s4s")
_V6 = struct.Struct("!IHBB16s16s")
_UDP = struct.Struct("!HHHH")
_ECHO = struct.Struct("!BBHHH")


class CodecError(ValueError):
    """Base class for encode/decode failures."""


class TruncatedPacket(CodecError):
    pass


class ChecksumError(CodecError):
    pass


class UnknownProtocol(CodecError):
    pass


class StructuralError(CodecError):
    """Inconsistent lengths or an unsupported header stack."""


@dataclass(frozen=True)
class Ipv4Header:
    src: IPv4Address
    dst: IPv4Address
    protocol: int
    ttl: int = 64
    identification: int = 0
    tos: int = 0
    flags_fragment: int = 0
    total_len: int | None = None
    header_checksum: int | None = None
    version: int = 4
    header_len: int = IPV4_HLEN


@dataclass(frozen=True)
class Ipv6Header:
    src: IPv6Address
    dst: IPv6Address
    next_header: int = NH_UDP
    hop_limit: int = 64
    traffic_class: int = 0
    flow_label: int = 0
    payload_len: int | None = None
    version: int = 6


@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int | None = None
    checksum: int | None = None


@dataclass(frozen=True)
class EchoHeader:
    """8-byte ICMP-style header: echo request/reply, and the tunnel control
    messages (router solicit/advert, setup confirm, refresh) reuse it."""

    type: int
    code: int = 0
    ident: int = 0
    seq: int = 0
    checksum: int | None = None


Header = Ipv4Header | Ipv6Header | UdpHeader | EchoHeader

KINDS = ("data", "refresh", "setup", "dns_query", "dns_reply", "echo_request", "echo_reply")


@dataclass(frozen=True)
class PacketMeta:
    packet_id: int = 0
    flow_id: int = 0
    kind: str = "data"
    created_at: float = 0.0
    seq: int = -1


@dataclass(frozen=True)
class Packet:
    layers: tuple[Header, ...]
    payload: bytes = b""
    meta: PacketMeta = field(default=PacketMeta(), compare=False)

    @property
    def outer(self) -> Header:
        return self.layers[0]

    def with_layers(self, layers) -> "Packet":
        return replace(self, layers=tuple(layers))


def wire_len(p: Packet) -> int:
    size = len(p.payload)
    for h in p.layers:
        size += _HLEN[type(h)]
    return size


_HLEN = {Ipv4Header: IPV4_HLEN, Ipv6Header: IPV6_HLEN, UdpHeader: UDP_HLEN, EchoHeader: ECHO_HLEN}


def layering(p: Packet) -> tuple[str, ...]:
    """Validate the header stack and return a short signature such as
    ``("ipv4:41", "ipv6")``."""
    layers = p.layers
    if not layers:
        raise StructuralError("packet has no headers")
    sig = []
    for i, h in enumerate(layers):
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(h, Ipv4Header):
            if h.version != 4 or h.header_len != IPV4_HLEN:
                raise StructuralError("IPv4 header must be version 4 without options")
            if i != 0:
                raise StructuralError("IPv4 may only be the outermost header")
            want = {PROTO_IPV6: Ipv6Header, PROTO_UDP: UdpHeader, PROTO_ICMP: EchoHeader}.get(h.protocol)
            if want is None:
                raise UnknownProtocol(f"IPv4 protocol {h.protocol} is not supported")
            if not isinstance(nxt, want):
                raise StructuralError(f"IPv4 protocol {h.protocol} must be followed by {want.__name__}")
            sig.append(f"ipv4:{h.protocol}")
        elif isinstance(h, Ipv6Header):
            if h.version != 6:
                raise StructuralError("IPv6 header must be version 6")
            if not 0 <= h.flow_label < (1 << 20):
                raise StructuralError("flow label is a 20-bit field")
            if h.next_header == NH_ICMPV6:
                if not isinstance(nxt, EchoHeader):
                    raise StructuralError("next header 58 requires an echo header")
            elif nxt is not None:
                raise StructuralError("only echo may follow an IPv6 header")
            sig.append("ipv6")
        elif isinstance(h, UdpHeader):
            if i != 1:
                raise StructuralError("UDP must sit directly inside the outer IPv4 header")
            teredo = TEREDO_PORT in (h.src_port, h.dst_port)
            if teredo != isinstance(nxt, Ipv6Header):
                raise StructuralError("IPv6-in-UDP uses port 3544 and only it")
            sig.append("udp")
        elif isinstance(h, EchoHeader):
            if nxt is not None:
                raise StructuralError("echo header must be innermost")
            if i == 0:
                raise StructuralError("echo header needs an enclosing IP header")
            sig.append("echo")
        else:
            raise StructuralError(f"unknown header type {type(h).__name__}")
    return tuple(sig)


# -- encoding -----------------------------------------------------------------


def _check(given, computed, what, exc=StructuralError):
    if given is not None and given != computed:
        raise exc(f"{what}: packet says {given}, encoder computes {computed}")


def _pseudo_v4(src: IPv4Address, dst: IPv4Address, proto: int, length: int) -> bytes:
    return src.packed + dst.packed + struct.pack("!BBH", 0, proto, length)


def _pseudo_v6(src: IPv6Address, dst: IPv6Address, nh: int, length: int) -> bytes:
    return src.packed + dst.packed + struct.pack("!I3xB", length, nh)


def _encode(p: Packet, fill: bool = False) -> tuple[bytes, tuple[Header, ...]]:
    layering(p)
    layers = p.layers
    body = bytes(p.payload)
    filled: list[Header] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        h = layers[i]
        parent = layers[i - 1] if i > 0 else None
        if isinstance(h, EchoHeader):
            raw = _ECHO.pack(h.type, h.code, 0, h.ident, h.seq) + body
            if isinstance(parent, Ipv6Header):
                init = ones_complement_sum(_pseudo_v6(parent.src, parent.dst, NH_ICMPV6, len(raw)))
            else:
                init = 0
            ck = internet_checksum(raw, init)
            _check(h.checksum, ck, "echo checksum", ChecksumError)
            body = raw[:2] + struct.pack("!H", ck) + raw[4:]
            if fill:
                filled[i] = replace(h, checksum=ck)
        elif isinstance(h, UdpHeader):
            length = UDP_HLEN + len(body)
            if length > 0xFFFF:
                raise StructuralError("UDP datagram too long")
            _check(h.length, length, "UDP length")
            outer: Ipv4Header = parent  # type: ignore[assignment]
            raw = _UDP.pack(h.src_port, h.dst_port, length, 0) + body
            ck = internet_checksum(raw, ones_complement_sum(_pseudo_v4(outer.src, outer.dst, PROTO_UDP, length)))
            ck = ck or 0xFFFF
            if h.checksum != 0:  # 0 means "no checksum" over IPv4
                _check(h.checksum, ck, "UDP checksum", ChecksumError)
            else:
                ck = 0
            body = raw[:6] + struct.pack("!H", ck) + raw[8:]
            if fill:
                filled[i] = replace(h, length=length, checksum=ck)
        elif isinstance(h, Ipv6Header):
            plen = len(body)
            if plen > 0xFFFF:
                raise StructuralError("IPv6 payload too long")
            _check(h.payload_len, plen, "IPv6 payload length")
            first = (6 << 28) | (h.traffic_class << 20) | h.flow_label
            body = _V6.pack(first, plen, h.next_header, h.hop_limit, h.src.packed, h.dst.packed) + body
            if fill:
                filled[i] = replace(h, payload_len=plen)
        else:
            total = IPV4_HLEN + len(body)
            if total > 0xFFFF:
                raise StructuralError("IPv4 datagram too long")
            _check(h.total_len, total, "IPv4 total length")
            hdr = _V4.pack(
                0x45, h.tos, total, h.identification, h.flags_fragment, h.ttl, h.protocol, 0, h.src.packed, h.dst.packed
            )
            ck = internet_checksum(hdr)
            _check(h.header_checksum, ck, "IPv4 header checksum", ChecksumError)
            body = hdr[:10] + struct.pack("!H", ck) + hdr[12:] + body
            if fill:
                filled[i] = replace(h, total_len=total, header_checksum=ck)
    return body, tuple(filled)


def encode(p: Packet) -> bytes:
    return _encode(p)[0]


def finalize(p: Packet) -> Packet:
    """Same packet with every length and checksum field filled in."""
    return replace(p, layers=_encode(p, fill=True)[1])


# -- decoding -----------------------------------------------------------------


def decode(data: bytes, meta: PacketMeta | None = None) -> Packet:
    data = bytes(data)
    if not data:
        raise TruncatedPacket("empty input")
    version = data[0] >> 4
    if version == 4:
        layers, payload = _decode_v4(data)
    elif version == 6:
        layers, payload = _decode_v6(data)
    else:
        raise UnknownProtocol(f"IP version {version}")
    return Packet(tuple(layers), payload, meta if meta is not None else PacketMeta())


def _decode_v4(data: bytes):
    if len(data) < IPV4_HLEN:
        raise TruncatedPacket(f"{len(data)} bytes is shorter than an IPv4 header")
    vihl, tos, total, ident, ff, ttl, proto, ck, src, dst = _V4.unpack_from(data)
    if vihl != 0x45:
        raise StructuralError("IPv4 options are not supported")
    if ones_complement_sum(data[:IPV4_HLEN]) != 0xFFFF:
        raise ChecksumError("IPv4 header checksum does not verify")
    if total > len(data):
        raise TruncatedPacket(f"IPv4 total length {total} exceeds {len(data)} bytes")
    if total < len(data):
        raise StructuralError(f"{len(data) - total} trailing bytes after IPv4 datagram")
    if total < IPV4_HLEN:
        raise StructuralError("IPv4 total length below header size")
    sa, da = IPv4Address(src), IPv4Address(dst)
    hdr = Ipv4Header(sa, da, proto, ttl, ident, tos, ff, total, ck)
    body = data[IPV4_HLEN:total]
    if proto == PROTO_IPV6:
        inner, payload = _decode_v6(body)
        return [hdr, *inner], payload
    if proto == PROTO_UDP:
        return _decode_udp(hdr, body)
    if proto == PROTO_ICMP:
        echo, payload = _decode_echo(body, 0)
        return [hdr, echo], payload
    raise UnknownProtocol(f"IPv4 protocol {proto}")


def _decode_udp(outer: Ipv4Header, body: bytes):
    if len(body) < UDP_HLEN:
        raise TruncatedPacket("UDP header truncated")
    sp, dp, length, ck = _UDP.unpack_from(body)
    if length != len(body):
        raise StructuralError(f"UDP length {length} but {len(body)} bytes present")
    if ck and ones_complement_sum(body, ones_complement_sum(_pseudo_v4(outer.src, outer.dst, PROTO_UDP, length))) != 0xFFFF:
        raise ChecksumError("UDP checksum does not verify")
    udp = UdpHeader(sp, dp, length, ck)
    if TEREDO_PORT in (sp, dp):
        if length == UDP_HLEN or body[UDP_HLEN] >> 4 != 6:
            raise StructuralError("port 3544 datagram does not carry IPv6")
        inner, payload = _decode_v6(body[UDP_HLEN:])
        return [outer, udp, *inner], payload
    return [outer, udp], body[UDP_HLEN:]


def _decode_v6(data: bytes):
    if len(data) < IPV6_HLEN:
        raise TruncatedPacket(f"{len(data)} bytes is shorter than an IPv6 header")
    first, plen, nh, hlim, src, dst = _V6.unpack_from(data)
    if first >> 28 != 6:
        raise StructuralError("inner header is not IPv6")
    if IPV6_HLEN + plen > len(data):
        raise TruncatedPacket(f"IPv6 payload length {plen} exceeds available bytes")
    if IPV6_HLEN + plen < len(data):
        raise StructuralError("trailing bytes after IPv6 payload")
    hdr = Ipv6Header(
        IPv6Address(src), IPv6Address(dst), nh, hlim, (first >> 20) & 0xFF, first & 0xFFFFF, plen
    )
    body = data[IPV6_HLEN:]
    if nh == NH_ICMPV6:
        init = ones_complement_sum(_pseudo_v6(hdr.src, hdr.dst, NH_ICMPV6, plen))
        echo, payload = _decode_echo(body, init)
        return [hdr, echo], payload
    return [hdr], body


def _decode_echo(body: bytes, init: int):
    if len(body) < ECHO_HLEN:
        raise TruncatedPacket("echo header truncated")
    if ones_complement_sum(body, init) != 0xFFFF:
        raise ChecksumError("echo checksum does not verify")
    t, c, ck, ident, seq = _ECHO.unpack_from(body)
    return EchoHeader(t, c, ident, seq, ck), body[ECHO_HLEN:]


# -- helpers used on the forwarding path ------------------------------------------


def peek_version(data: bytes) -> int:
    if not data:
        raise TruncatedPacket("empty input")
    return data[0] >> 4


def peek_ipv4_dst(data: bytes) -> bytes:
    if len(data) < IPV4_HLEN:
        raise TruncatedPacket("IPv4 header truncated")
    return data[16:20]


def peek_ipv6_dst(data: bytes) -> bytes:
    if len(data) < IPV6_HLEN:
        raise TruncatedPacket("IPv6 header truncated")
    return data[24:40]


def peek_ipv4_proto(data: bytes) -> int:
    return data[9]


def udp_ports(data: bytes) -> tuple[int, int]:
    """Ports of a UDP-in-IPv4 datagram without decoding it."""
    if len(data) < IPV4_HLEN + UDP_HLEN:
        raise TruncatedPacket("UDP header truncated")
    return struct.unpack_from("!HH", data, IPV4_HLEN)


# -- wire-level fast paths ------------------------------------------------------------
#
# Tunnel endpoints and NAT boxes only touch the outer headers. These work on
# encoded bytes and produce exactly what the object round trip would
# (``encode(wrap(decode(...)))``), without building header objects.


def _ipv4_header(total: int, proto: int, src: bytes, dst: bytes, ttl: int = 64) -> bytes:
    hdr = _V4.pack(0x45, 0, total, 0, 0, ttl, proto, 0, src, dst)
    return hdr[:10] + struct.pack("!H", internet_checksum(hdr)) + hdr[12:]


def _udp_checksum(src: bytes, dst: bytes, segment: bytes) -> int:
    pseudo = src + dst + struct.pack("!BBH", 0, PROTO_UDP, len(segment))
    return internet_checksum(segment, ones_complement_sum(pseudo)) or 0xFFFF


def encapsulate(inner: bytes, src: IPv4Address, dst: IPv4Address, sport: int | None = None,
                dport: int | None = None) -> bytes:
    """Wrap an encoded IPv6 packet in IPv4 (protocol 41), or in IPv4 + UDP
    when ports are given. Header fields match :class:`Ipv4Header` defaults."""
    if not inner or inner[0] >> 4 != 6:
        raise StructuralError("only IPv6 packets can be tunneled")
    s, d = src.packed, dst.packed
    if sport is None:
        total = IPV4_HLEN + len(inner)
        if total > 0xFFFF:
            raise StructuralError("IPv4 datagram too long")
        return _ipv4_header(total, PROTO_IPV6, s, d) + inner
    if TEREDO_PORT not in (sport, dport):
        raise StructuralError("IPv6-in-UDP uses port 3544 and only it")
    length = UDP_HLEN + len(inner)
    if IPV4_HLEN + length > 0xFFFF:
        raise StructuralError("IPv4 datagram too long")
    seg = _UDP.pack(sport, dport, length, 0) + inner
    seg = seg[:6] + struct.pack("!H", _udp_checksum(s, d, seg)) + seg[8:]
    return _ipv4_header(IPV4_HLEN + length, PROTO_UDP, s, d) + seg


def _check_ipv4(data: bytes) -> None:
    if len(data) < IPV4_HLEN:
        raise TruncatedPacket(f"{len(data)} bytes is shorter than an IPv4 header")
    if data[0] != 0x45:
        raise StructuralError("IPv4 options are not supported")
    if ones_complement_sum(data[:IPV4_HLEN]) != 0xFFFF:
        raise ChecksumError("IPv4 header checksum does not verify")
    total = (data[2] << 8) | data[3]
    if total > len(data):
        raise TruncatedPacket(f"IPv4 total length {total} exceeds {len(data)} bytes")
    if total < len(data):
        raise StructuralError(f"{len(data) - total} trailing bytes after IPv4 datagram")


def _check_udp(data: bytes) -> None:
    seg = data[IPV4_HLEN:]
    if len(seg) < UDP_HLEN:
        raise TruncatedPacket("UDP header truncated")
    length = (seg[4] << 8) | seg[5]
    if length != len(seg):
        raise StructuralError(f"UDP length {length} but {len(seg)} bytes present")
    if seg[6] | seg[7]:
        pseudo = data[12:20] + struct.pack("!BBH", 0, PROTO_UDP, length)
        if ones_complement_sum(seg, ones_complement_sum(pseudo)) != 0xFFFF:
            raise ChecksumError("UDP checksum does not verify")


def decapsulate(data: bytes) -> bytes:
    """Verify the outer IPv4 (+ UDP) headers and return the inner IPv6 bytes."""
    _check_ipv4(data)
    proto = data[9]
    if proto == PROTO_IPV6:
        inner = data[IPV4_HLEN:]
    elif proto == PROTO_UDP:
        _check_udp(data)
        sport, dport = udp_ports(data)
        if TEREDO_PORT not in (sport, dport):
            raise StructuralError("not an IPv6-in-UDP datagram")
        inner = data[IPV4_HLEN + UDP_HLEN:]
    else:
        raise UnknownProtocol(f"IPv4 protocol {proto} carries no tunnel")
    if len(inner) < IPV6_HLEN or inner[0] >> 4 != 6:
        raise StructuralError("tunnel payload is not IPv6")
    if IPV6_HLEN + ((inner[4] << 8) | inner[5]) != len(inner):
        raise StructuralError("inner IPv6 payload length does not match")
    return inner


def rewrite_udp4(data: bytes, *, src: IPv4Address | None = None, sport: int | None = None,
                 dst: IPv4Address | None = None, dport: int | None = None) -> bytes:
    """NAT rewrite of a UDP/IPv4 datagram's address and port fields.

    Both checksums are recomputed; a zero UDP checksum (none) stays zero.
    """
    _check_ipv4(data)
    if data[9] != PROTO_UDP:
        raise UnknownProtocol("only UDP datagrams are rewritten")
    _check_udp(data)
    buf = bytearray(data)
    if src is not None:
        buf[12:16] = src.packed
    if dst is not None:
        buf[16:20] = dst.packed
    if sport is not None:
        struct.pack_into("!H", buf, 20, sport)
    if dport is not None:
        struct.pack_into("!H", buf, 22, dport)
    buf[10:12] = b"\0\0"
    struct.pack_into("!H", buf, 10, internet_checksum(bytes(buf[:IPV4_HLEN])))
    if data[26] | data[27]:
        buf[26:28] = b"\0\0"
        struct.pack_into("!H", buf, 26, _udp_checksum(bytes(buf[12:16]), bytes(buf[16:20]), bytes(buf[20:])))
    return bytes(buf)
