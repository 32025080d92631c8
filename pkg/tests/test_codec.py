import random
import struct
from ipaddress import IPv4Address, IPv6Address

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tunnelsim import codec
from tunnelsim import tunnels as tn
from tunnelsim.codec import (
    NH_ICMPV6,
    PROTO_IPV6,
    PROTO_UDP,
    ChecksumError,
    EchoHeader,
    Ipv4Header,
    Ipv6Header,
    Packet,
    StructuralError,
    TruncatedPacket,
    UdpHeader,
    UnknownProtocol,
)

from conftest import oracle_checksum_sum
from packets import STACKS, random_packet

A4, B4 = IPv4Address("192.0.2.10"), IPv4Address("203.0.113.1")
A6, B6 = IPv6Address("2001:db8::1"), IPv6Address("2001:db8:3::10")


def test_bare_ipv6_is_40_bytes():
    assert len(codec.encode(Packet((Ipv6Header(A6, B6),)))) == 40


def test_proto41_lengths_add_up():
    p = Packet((Ipv4Header(A4, B4, PROTO_IPV6), Ipv6Header(A6, B6)), bytes(1460))
    data = codec.encode(p)
    assert len(data) == 20 + 40 + 1460
    assert struct.unpack_from("!H", data, 2)[0] == 1520


def test_ipv4_header_checksum_matches_oracle():
    p = Packet((Ipv4Header(A4, B4, PROTO_UDP, ttl=17, identification=0x1C46), UdpHeader(1, 2)), b"abc")
    data = codec.encode(p)
    hdr = bytearray(data[:20])
    stored = struct.unpack_from("!H", hdr, 10)[0]
    hdr[10:12] = b"\0\0"
    assert stored == ~oracle_checksum_sum(bytes(hdr)) & 0xFFFF
    # including its own checksum, the header sums to all ones
    assert oracle_checksum_sum(data[:20]) == 0xFFFF


@pytest.mark.parametrize("stack", STACKS)
def test_round_trip_every_stack(stack):
    rng = random.Random(stack)
    for _ in range(200):
        p = random_packet(rng, stack)
        assert codec.decode(codec.encode(p)) == codec.finalize(p)


def test_round_trip_ten_thousand_random_packets():
    rng = random.Random(20240601)
    failures = 0
    for _ in range(10_000):
        p = random_packet(rng, max_payload=300)
        data = codec.encode(p)
        back = codec.decode(data)
        if back != codec.finalize(p) or codec.encode(back) != data:
            failures += 1
    assert failures == 0


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False))
def test_round_trip_property(rng):
    p = random_packet(rng, max_payload=200)
    assert codec.decode(codec.encode(p)) == codec.finalize(p)


def test_flipped_bit_is_a_checksum_error():
    rng = random.Random(3)
    for stack in ("v4echo", "v4udp", "teredo", "v6echo"):
        p = random_packet(rng, stack, max_payload=64)
        data = bytearray(codec.encode(p))
        # flip a bit covered by the innermost checksum but not a length field
        data[-1 if p.payload else len(data) - 3] ^= 0x01
        with pytest.raises(ChecksumError):
            codec.decode(bytes(data))


def test_flipped_ipv4_header_bit():
    data = bytearray(codec.encode(random_packet(random.Random(1), "p41")))
    data[8] ^= 0x10  # TTL
    with pytest.raises(ChecksumError):
        codec.decode(bytes(data))


def test_short_ipv6_is_truncated():
    with pytest.raises(TruncatedPacket):
        codec.decode(b"\x60" + bytes(38))


def test_trailing_bytes_are_structural():
    data = codec.encode(Packet((Ipv6Header(A6, B6),), b"xy"))
    with pytest.raises(StructuralError):
        codec.decode(data + b"\0")
    with pytest.raises(TruncatedPacket):
        codec.decode(data[:-1])


def test_unknown_version():
    with pytest.raises(UnknownProtocol):
        codec.decode(b"\x50" + bytes(40))


def test_ipv4_options_rejected():
    data = bytearray(codec.encode(Packet((Ipv4Header(A4, B4, 1), EchoHeader(8)))))
    data[0] = 0x46
    with pytest.raises(StructuralError):
        codec.decode(bytes(data))


def test_mismatched_given_fields_raise():
    with pytest.raises(StructuralError):
        codec.encode(Packet((Ipv6Header(A6, B6, payload_len=3),), b"xy"))
    with pytest.raises(ChecksumError):
        codec.encode(Packet((Ipv4Header(A4, B4, 1, header_checksum=1), EchoHeader(8))))


@pytest.mark.parametrize(
    "layers",
    [
        (Ipv6Header(A6, B6), Ipv4Header(A4, B4, 41)),
        (Ipv4Header(A4, B4, PROTO_IPV6), UdpHeader(1, 2)),
        (Ipv4Header(A4, B4, PROTO_UDP), UdpHeader(3544, 1)),
        (Ipv4Header(A4, B4, PROTO_UDP), UdpHeader(5, 1), Ipv6Header(A6, B6)),
        (Ipv6Header(A6, B6, NH_ICMPV6),),
        (EchoHeader(8),),
        (),
    ],
)
def test_invalid_stacks(layers):
    with pytest.raises(codec.CodecError):
        codec.encode(Packet(tuple(layers)))


def test_udp_zero_checksum_means_none():
    p = Packet((Ipv4Header(A4, B4, PROTO_UDP), UdpHeader(53, 5353, checksum=0)), b"hello")
    data = codec.encode(p)
    assert data[26:28] == b"\0\0"
    assert codec.decode(data).layers[1].checksum == 0


def test_port_3544_must_carry_ipv6():
    inner = codec.encode(Packet((Ipv4Header(A4, B4, PROTO_UDP), UdpHeader(5, 6)), b"\x45" + bytes(40)))
    data = bytearray(inner)
    struct.pack_into("!H", data, 20, 3544)
    # fix up the UDP checksum so only the layering rule can fail
    struct.pack_into("!H", data, 26, 0)
    with pytest.raises(StructuralError):
        codec.decode(bytes(data))


# -- wire-level helpers agree with the object path -------------------------------------------


@pytest.mark.parametrize("proto", list(tn.Protocol))
def test_encapsulate_matches_wrap(proto):
    rng = random.Random(proto.value)
    for _ in range(50):
        p = random_packet(rng, rng.choice(("v6", "v6echo")))
        ports = (5000, 3544) if proto is tn.Protocol.TEREDO else ()
        wrapped = codec.encode(tn.wrap(p, proto, A4, B4, *(ports or (3544, 3544))))
        fast = codec.encapsulate(codec.encode(p), A4, B4, *ports)
        assert fast == wrapped
        assert codec.decapsulate(fast) == codec.encode(p)
        assert len(fast) - len(codec.encode(p)) == tn.OVERHEAD[proto]


def test_decapsulate_rejects_non_tunnel():
    data = codec.encode(Packet((Ipv4Header(A4, B4, 1), EchoHeader(8))))
    with pytest.raises(UnknownProtocol):
        codec.decapsulate(data)
    with pytest.raises(TruncatedPacket):
        codec.decapsulate(data[:10])


def test_rewrite_matches_nat_object_path():
    rng = random.Random(5)
    table_a, table_b = tn.NatTable(IPv4Address("198.51.100.1")), tn.NatTable(IPv4Address("198.51.100.1"))
    for _ in range(30):
        p = random_packet(rng, "teredo")
        p = p.with_layers((Ipv4Header(IPv4Address("10.0.0.2"), B4, PROTO_UDP), UdpHeader(5000, 3544)) + p.layers[2:])
        assert table_b.outbound_wire(codec.encode(p)) == codec.encode(table_a.outbound(p))


def test_peek_helpers():
    data = codec.encode(Packet((Ipv4Header(A4, B4, PROTO_UDP), UdpHeader(53, 5353)), b""))
    assert codec.peek_version(data) == 4
    assert codec.peek_ipv4_dst(data) == B4.packed
    assert codec.peek_ipv4_proto(data) == PROTO_UDP
    assert codec.udp_ports(data) == (53, 5353)
    v6 = codec.encode(Packet((Ipv6Header(A6, B6),)))
    assert codec.peek_ipv6_dst(v6) == B6.packed
    with pytest.raises(TruncatedPacket):
        codec.peek_version(b"")
