import random
from ipaddress import IPv4Address, IPv6Address, IPv6Network

import pytest

from tunnelsim import addressing as addr
from tunnelsim import codec
from tunnelsim import tunnels as tn
from tunnelsim.codec import PROTO_IPV6, EchoHeader, Ipv4Header, Ipv6Header, Packet
from tunnelsim.tunnels import Drop, Phase, Protocol

from packets import random_packet

CLIENT4, SERVER4, RELAY4 = IPv4Address("192.0.2.10"), IPv4Address("203.0.113.1"), IPv4Address("192.88.99.1")
ISATAP_PREFIX = IPv6Network("2001:db8:2::/64")


def established(proto: Protocol, seed: int = 0) -> tn.TunnelState:
    st = tn.TunnelState(proto, CLIENT4, "srv", SERVER4, tn.RefreshPolicy(proto, random.Random(seed)), RELAY4)
    req = tn.setup_request(st)
    adv = tn.assignment(req, proto, IPv6Address("2001:db8:4::1"), isatap_prefix=ISATAP_PREFIX)
    tn.complete_setup(st, adv)
    return st


def refreshes(proto: Protocol, n: int, seed: int = 0) -> int:
    st = established(proto, seed)
    return sum(tn.on_data_sent(st) is not None for _ in range(n))


# -- refresh cadence -------------------------------------------------------------------------


def test_isatap_every_13():
    assert refreshes(Protocol.ISATAP, 26) == 2
    assert refreshes(Protocol.ISATAP, 1000) == 1000 // 13 == 76


def test_teredo_every_21():
    assert refreshes(Protocol.TEREDO, 20) == 0
    assert refreshes(Protocol.TEREDO, 1000) == 1000 // 21 == 47


@pytest.mark.parametrize("seed", range(25))
def test_6to4_between_18_and_19(seed):
    n = refreshes(Protocol.SIX_TO_FOUR, 1000, seed)
    assert 1000 // 19 - 1 <= n <= 1000 // 18 + 1
    assert 52 <= n <= 55


def test_6to4_intervals_drawn_from_policy():
    policy = tn.RefreshPolicy(Protocol.SIX_TO_FOUR, random.Random(1))
    draws = {policy.next_interval() for _ in range(200)}
    assert draws == {18, 19}


def test_data_before_setup_is_an_error():
    st = tn.TunnelState(Protocol.ISATAP, CLIENT4, "srv", SERVER4, tn.RefreshPolicy(Protocol.ISATAP))
    with pytest.raises(tn.TunnelStateError):
        tn.on_data_sent(st)


def test_refresh_packet_is_48_bytes_inside():
    st = established(Protocol.TEREDO)
    p = tn.refresh_packet(st)
    assert codec.wire_len(p) == 48 + tn.OVERHEAD[Protocol.TEREDO]
    reply = tn.refresh_reply(p)
    assert reply.layers[0].dst == p.layers[0].src and reply.layers[-1].code == 1


# -- setup handshake -----------------------------------------------------------------------


def test_setup_phases():
    st = tn.TunnelState(Protocol.ISATAP, CLIENT4, "srv", SERVER4, tn.RefreshPolicy(Protocol.ISATAP))
    req = tn.setup_request(st)
    assert st.phase is Phase.SETUP_PENDING
    with pytest.raises(tn.SetupError):
        tn.setup_request(st)
    adv = tn.assignment(req, Protocol.ISATAP, IPv6Address("2001:db8:2::1"), isatap_prefix=ISATAP_PREFIX)
    confirm = tn.complete_setup(st, adv)
    assert st.phase is Phase.ESTABLISHED
    assert st.local_v6 == addr.synth_isatap(ISATAP_PREFIX, CLIENT4)
    assert confirm.layers[-1].type == codec.SETUP_CONFIRM
    with pytest.raises(tn.SetupError):
        tn.complete_setup(st, adv)


def test_6to4_address_from_own_v4():
    st = established(Protocol.SIX_TO_FOUR)
    assert addr.parse_6to4(st.local_v6) == CLIENT4
    assert st.assigned_prefix == addr.prefix_6to4(CLIENT4)


def test_teredo_address_embeds_mapping():
    st = tn.TunnelState(Protocol.TEREDO, IPv4Address("10.0.0.2"), "srv", SERVER4, tn.RefreshPolicy(Protocol.TEREDO))
    req = tn.setup_request(st)
    nat = tn.NatTable(IPv4Address("198.51.100.1"))
    seen = nat.outbound(req)
    adv = tn.assignment(seen, Protocol.TEREDO, IPv6Address("2001:db8:4::1"))
    tn.complete_setup(st, nat.inbound(adv))
    f = addr.parse_teredo(st.local_v6)
    assert f.server_v4 == SERVER4
    assert f.mapped_v4 == IPv4Address("198.51.100.1") and f.mapped_port == 40000
    assert f.flags == addr.TEREDO_CONE_FLAG


def test_teredo_setup_over_proto41_is_refused():
    st = tn.TunnelState(Protocol.ISATAP, CLIENT4, "srv", SERVER4, tn.RefreshPolicy(Protocol.ISATAP))
    req = tn.setup_request(st)
    with pytest.raises(Drop) as e:
        tn.assignment(req, Protocol.TEREDO, IPv6Address("2001:db8:4::1"))
    assert e.value.reason == "protocol_violation"


# -- encapsulation -------------------------------------------------------------------------


@pytest.mark.parametrize("proto,extra", [(Protocol.SIX_TO_FOUR, 20), (Protocol.ISATAP, 20), (Protocol.TEREDO, 28)])
def test_overhead_and_lengths(proto, extra):
    st = established(proto)
    p = Packet((Ipv6Header(st.local_v6, IPv6Address("2001:db8:3::10")),), bytes(1460))
    out = codec.encode(tn.encap(p, st, SERVER4))
    assert len(out) == extra + 40 + 1460
    assert int.from_bytes(out[2:4], "big") == extra + 40 + 1460


@pytest.mark.parametrize("proto", list(Protocol))
def test_decap_inverts_encap(proto):
    st = established(proto)
    rng = random.Random(proto.value)
    for _ in range(100):
        p = random_packet(rng, rng.choice(("v6", "v6echo")))
        wire = codec.encode(tn.encap(p, st, SERVER4))
        assert tn.decap(codec.decode(wire), proto) == codec.finalize(p)


def test_encap_requires_established():
    st = tn.TunnelState(Protocol.ISATAP, CLIENT4, "srv", SERVER4, tn.RefreshPolicy(Protocol.ISATAP))
    with pytest.raises(tn.TunnelStateError):
        tn.encap(Packet((Ipv6Header(IPv6Address(1), IPv6Address(2)),)), st, SERVER4)


def test_proto41_at_teredo_end_is_dropped():
    p = Packet((Ipv4Header(CLIENT4, SERVER4, PROTO_IPV6), Ipv6Header(IPv6Address(1), IPv6Address(2))))
    with pytest.raises(Drop) as e:
        tn.decap(p, Protocol.TEREDO)
    assert e.value.reason == "layering_mismatch"


def test_truncated_outer_header_is_a_codec_error():
    st = established(Protocol.ISATAP)
    wire = codec.encode(tn.encap(Packet((Ipv6Header(IPv6Address(1), IPv6Address(2)),)), st, SERVER4))
    with pytest.raises(codec.TruncatedPacket):
        codec.decode(wire[:15])


def test_endpoint_selection():
    st = established(Protocol.SIX_TO_FOUR)
    assert tn.endpoint_for(st, addr.synth_6to4(IPv4Address("198.18.0.7"), 0, 1)) == IPv4Address("198.18.0.7")
    assert tn.endpoint_for(st, IPv6Address("2001:db8:3::10")) == RELAY4
    isatap = established(Protocol.ISATAP)
    peer = addr.synth_isatap(ISATAP_PREFIX, IPv4Address("192.0.2.77"))
    assert tn.endpoint_for(isatap, peer) == IPv4Address("192.0.2.77")
    assert tn.endpoint_for(isatap, IPv6Address("2001:db8:3::10")) == SERVER4
    assert tn.gateway_endpoint(Protocol.ISATAP, peer) == (IPv4Address("192.0.2.77"), None)
    with pytest.raises(Drop):
        tn.gateway_endpoint(Protocol.TEREDO, IPv6Address("2002::1"))


# -- NAT -----------------------------------------------------------------------------------


def _udp(src, sport, dst=SERVER4, dport=3544):
    inner = Packet((Ipv6Header(IPv6Address(1), IPv6Address(2)),), b"x")
    return tn.wrap(inner, Protocol.TEREDO, src, dst, sport, dport)


def test_nat_creates_full_cone_binding():
    nat = tn.NatTable(IPv4Address("198.51.100.1"))
    out = nat.outbound(_udp(IPv4Address("10.0.0.2"), 5000))
    assert out.layers[0].src == IPv4Address("198.51.100.1") and out.layers[1].src_port == 40000
    assert (IPv4Address("10.0.0.2"), 5000) in nat.by_internal
    # same mapping again, and any outside host may use it
    again = nat.outbound(_udp(IPv4Address("10.0.0.2"), 5000, dst=RELAY4))
    assert again.layers[1].src_port == 40000
    back = nat.inbound(_udp(RELAY4, 3544, IPv4Address("198.51.100.1"), 40000))
    assert back.layers[0].dst == IPv4Address("10.0.0.2") and back.layers[1].dst_port == 5000
    codec.decode(codec.encode(back))  # checksums recomputed


def test_nat_drops_proto41():
    nat = tn.NatTable(IPv4Address("198.51.100.1"))
    p = Packet((Ipv4Header(IPv4Address("10.0.0.2"), SERVER4, PROTO_IPV6), Ipv6Header(IPv6Address(1), IPv6Address(2))))
    with pytest.raises(Drop) as e:
        nat.outbound(p)
    assert e.value.reason == "nat_proto41"
    with pytest.raises(Drop) as e:
        nat.outbound_wire(codec.encode(p))
    assert e.value.reason == "nat_proto41"


def test_nat_inbound_without_binding():
    nat = tn.NatTable(IPv4Address("198.51.100.1"))
    with pytest.raises(Drop) as e:
        nat.inbound(_udp(RELAY4, 3544, IPv4Address("198.51.100.1"), 40000))
    assert e.value.reason == "nat_no_binding"
    with pytest.raises(Drop):
        nat.inbound_wire(codec.encode(_udp(RELAY4, 3544, IPv4Address("198.51.100.1"), 40000)))


def test_nat_other_protocols_dropped():
    nat = tn.NatTable(IPv4Address("198.51.100.1"))
    p = Packet((Ipv4Header(IPv4Address("10.0.0.2"), SERVER4, 1), EchoHeader(8)))
    with pytest.raises(Drop) as e:
        nat.outbound(p)
    assert e.value.reason == "nat_unsupported_protocol"


def test_nat_wire_inbound_matches_object_path():
    a, b = tn.NatTable(IPv4Address("198.51.100.1")), tn.NatTable(IPv4Address("198.51.100.1"))
    a.outbound(_udp(IPv4Address("10.0.0.2"), 5000))
    b.outbound_wire(codec.encode(_udp(IPv4Address("10.0.0.2"), 5000)))
    p = _udp(RELAY4, 3544, IPv4Address("198.51.100.1"), 40000)
    assert b.inbound_wire(codec.encode(p)) == codec.encode(a.inbound(p))
