"""Standard test-bed topologies for each scenario.

All scenarios share one physical layout::

    sender -- r_edge -- inet -- r_border -- receiver
                          |
                         dns

``sender`` sits in the IPv4 intranet, ``receiver`` in the IPv6 network and
``inet`` is the IPv4 transit. Per protocol:

* isatap   -- sender is an ISATAP host; r_border is the ISATAP router.
* 6to4     -- sender is a 6to4 host; r_edge and r_border are 6to4 routers;
              a 6to4 relay joins inet and r_border.
* teredo   -- sender is a Teredo client behind a NAT box (sender -- nat --
              r_edge); r_border is the Teredo relay; a standalone Teredo
              server hangs off r_border.
* baseline -- every node dual-stack with native IPv6, no tunnels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address

from . import addressing as addr
from .netsim import ConfigError, LinkSpec, NodeSpec
from .tunnels import Protocol

PROTOCOLS = ("6to4", "teredo", "isatap", "baseline")

SENDER, RECEIVER, DNS = "sender", "receiver", "dns"
RECEIVER_NAME = "receiver.vn3"
SENDER_NAME = "sender.vn2"

AUX_LABELS = {"6to4_relay": "6to4 Relay", "teredo_server": "Teredo Server"}


@dataclass
class Calibration:
    name: str = "zero"
    link_delay: float = 0.0
    link_rate: float = 1e7
    mtu: int = 1600
    node: dict[str, float] = field(default_factory=dict)
    nat: float = 0.0
    dns_lookup: float = 0.0
    # per protocol: host_encap, host_decap, gateway_encap, gateway_decap,
    # copy_per_kb, server_setup, server_refresh
    tunnel: dict[str, dict[str, float]] = field(default_factory=dict)

    def proto(self, protocol: str) -> dict[str, float]:
        return self.tunnel.get(protocol, {})


def _a4(s):
    return IPv4Address(s)


def _a6(s):
    return IPv6Address(s)


def build_standard(protocol: str, cal: Calibration) -> tuple[list[NodeSpec], list[LinkSpec]]:
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    base = dict(cal.node)
    pc = cal.proto(protocol)
    copy = pc.get("copy_per_kb", 0.0)

    def costs(**extra):
        c = dict(base)
        c.update({k: v for k, v in extra.items() if v})
        return c

    host_costs = costs(encap=pc.get("host_encap", 0.0), decap=pc.get("host_decap", 0.0), copy_per_kb=copy)
    gw_costs = costs(encap=pc.get("gateway_encap", 0.0), decap=pc.get("gateway_decap", 0.0), copy_per_kb=copy)
    server_costs = dict(setup=pc.get("server_setup", 0.0), refresh=pc.get("server_refresh", 0.0))

    baseline = protocol == "baseline"
    sender_v4 = _a4("10.0.0.2") if protocol == "teredo" else _a4("192.0.2.10")
    nodes: dict[str, NodeSpec] = {}

    nodes[SENDER] = NodeSpec(
        SENDER, "host", "dual", (sender_v4,), (_a6("2001:db8:1::10"),) if baseline else (),
        frozenset({f"{protocol}_host"} if protocol in ("isatap", "6to4") else
                  {"teredo_client"} if protocol == "teredo" else set()),
        host_costs if not baseline else costs(), dns_name=SENDER_NAME,
    )
    edge_v6: tuple = ()
    edge_roles: set[str] = set()
    edge_stack = "v4"
    edge_costs = costs()
    if baseline:
        edge_v6, edge_stack = (_a6("2001:db8:1::1"),), "dual"
    elif protocol == "6to4":
        edge_v6, edge_stack = (addr.synth_6to4(_a4("192.0.2.1"), 0, 1),), "dual"
        edge_roles = {"6to4_router"}
        edge_costs = costs(**server_costs)
    nodes["r_edge"] = NodeSpec("r_edge", "router", edge_stack, (_a4("192.0.2.1"),), edge_v6, frozenset(edge_roles),
                               edge_costs)
    nodes["inet"] = NodeSpec(
        "inet", "router", "dual" if baseline else "v4", (_a4("198.18.0.1"),),
        (_a6("2001:db8:ff::1"),) if baseline else (), costs=costs(),
    )
    nodes[DNS] = NodeSpec(
        DNS, "dns", "dual", (_a4("198.18.0.53"),), (_a6("2001:db8:ff::53"),),
        costs=costs(dns_lookup=cal.dns_lookup),
    )
    border_roles: set[str] = set()
    border_costs = costs()
    if protocol == "isatap":
        border_roles = {"isatap_router"}
        border_costs = {**gw_costs, **{k: v for k, v in server_costs.items() if v}}
    elif protocol == "6to4":
        border_roles = {"6to4_router"}
    elif protocol == "teredo":
        border_roles = {"teredo_relay"}
        border_costs = gw_costs
    nodes["r_border"] = NodeSpec(
        "r_border", "router", "dual", (_a4("203.0.113.1"),), (_a6("2001:db8:3::1"),),
        frozenset(border_roles), border_costs,
    )
    nodes[RECEIVER] = NodeSpec(
        RECEIVER, "host", "dual" if baseline else "v6",
        (_a4("203.0.113.10"),) if baseline else (), (_a6("2001:db8:3::10"),),
        costs=costs(), dns_name=RECEIVER_NAME,
    )

    links = [(SENDER, "r_edge"), ("r_edge", "inet"), ("inet", "r_border"), ("r_border", RECEIVER), ("inet", DNS)]

    if protocol == "6to4":
        nodes["relay6to4"] = NodeSpec(
            "relay6to4", "relay", "dual", (_a4("192.88.99.1"),), (_a6("2001:db8:ff::99"),),
            frozenset({"6to4_relay"}), gw_costs, label=AUX_LABELS["6to4_relay"],
        )
        links += [("inet", "relay6to4"), ("relay6to4", "r_border")]
    if protocol == "teredo":
        nodes["nat"] = NodeSpec(
            "nat", "nat", "v4", (_a4("198.51.100.1"), _a4("10.0.0.1")), costs=costs(nat=cal.nat),
            nat_inside=SENDER,
        )
        nodes["teredo_server"] = NodeSpec(
            "teredo_server", "server", "dual", (_a4("65.54.227.120"),), (_a6("2001:db8:4::1"),),
            frozenset({"teredo_server"}), costs(**server_costs), label=AUX_LABELS["teredo_server"],
        )
        links.remove((SENDER, "r_edge"))
        links += [(SENDER, "nat"), ("nat", "r_edge"), ("r_border", "teredo_server")]

    link_specs = [LinkSpec(a, b, cal.link_delay, cal.link_rate, cal.mtu) for a, b in links]
    return list(nodes.values()), link_specs


def validate(protocol: str, nodes: list[NodeSpec]) -> None:
    """Role consistency checks shared by standard and inline topologies."""
    roles = [r for n in nodes for r in n.tunnel_roles]
    if protocol == "baseline":
        if roles:
            raise ConfigError(f"baseline scenario forbids tunnel roles (found {sorted(set(roles))})")
        return
    if protocol == "teredo" and not any(n.role == "nat" for n in nodes):
        raise ConfigError("teredo scenario requires a NAT node: Teredo exists to cross NAT")
    need = {
        "isatap": ("isatap_host", "isatap_router"),
        "6to4": ("6to4_host", "6to4_router", "6to4_relay"),
        "teredo": ("teredo_client", "teredo_server", "teredo_relay"),
    }[protocol]
    missing = [r for r in need if r not in roles]
    if missing:
        raise ConfigError(f"{protocol} scenario is missing nodes with roles {missing}")
    for n in nodes:
        if n.stack == "v4" and n.tunnel_roles & {"isatap_host", "6to4_host", "teredo_client"}:
            raise ConfigError(f"node {n.id}: a tunnel client must be dual-stack")
    if protocol == "teredo":
        nat = next(n for n in nodes if n.role == "nat")
        client = next(n for n in nodes if "teredo_client" in n.tunnel_roles)
        if nat.nat_inside != client.id:
            raise ConfigError("the Teredo client must sit behind the NAT node")


def count_auxiliary_devices(nodes: list[NodeSpec]) -> tuple[int, list[str]]:
    """Devices needed only because of the tunneling protocol (relays, servers)."""
    names = [n.label or n.id for n in nodes if n.role in ("relay", "server")]
    return len(names), names


def tunnel_endpoints(protocol: str, nodes: list[NodeSpec], links: list[LinkSpec] = ()) -> dict[str, NodeSpec]:
    """Client, setup/refresh server and gateway nodes of a tunneled scenario."""
    p = Protocol(protocol)
    client_role = {"isatap": "isatap_host", "6to4": "6to4_host", "teredo": "teredo_client"}[protocol]
    server_role = {"isatap": "isatap_router", "6to4": "6to4_router", "teredo": "teredo_server"}[protocol]
    gateway_role = {"isatap": "isatap_router", "6to4": "6to4_relay", "teredo": "teredo_relay"}[protocol]
    by_role = lambda r: [n for n in nodes if r in n.tunnel_roles]  # noqa: E731
    clients = by_role(client_role)
    gateways = by_role(gateway_role)
    servers = by_role(server_role)
    if not clients or not gateways or not servers:
        raise ConfigError(f"{p.value}: client, server and gateway roles are all required")
    client = clients[0]
    # prefer a server on the client's own link (the "nearest" 6to4 router)
    adjacent = {ln.b if ln.a == client.id else ln.a for ln in links if client.id in (ln.a, ln.b)}
    server = next((s for s in servers if s.id in adjacent), servers[0])
    return {"client": client, "server": server, "gateway": gateways[0]}
