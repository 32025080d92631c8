"""Scenario and calibration files.

Both are INI files read with :mod:`configparser`. Errors carry the file and
line of the offending key, e.g. ``isatap.ini:12: [flow.audio] rate_pps: ...``.

A scenario names a protocol, a calibration profile, a topology (``standard``
or ``inline`` node/link sections) and one or more ``[flow.NAME]`` sections. A
suite file lists scenarios to run together and compare.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from ipaddress import IPv4Address, IPv6Address
from pathlib import Path

from . import topology as topo
from .netsim import COST_KEYS, ConfigError, LinkSpec, NodeSpec
from .traffic import PRESETS, FlowPlan, PlanError

PROFILE_PACKAGE = "tunnelsim.profiles"
_TUNNEL_KEYS = ("host_encap", "host_decap", "gateway_encap", "gateway_decap", "copy_per_kb", "server_setup",
                "server_refresh")


@dataclass
class Scenario:
    name: str
    protocol: str
    calibration: topo.Calibration
    nodes: list[NodeSpec]
    links: list[LinkSpec]
    flows: list[FlowPlan]
    replications: int = 1
    seed: int = 1
    setup_at_ms: float = 0.0
    dns_at_ms: float = 50.0
    config_hash: str = ""
    source: str = ""


@dataclass
class Suite:
    name: str
    scenarios: list[Scenario] = field(default_factory=list)
    config_hash: str = ""


class _Ini:
    """configparser plus a (section, key) -> line map for diagnostics."""

    def __init__(self, text: str, origin: str):
        self.origin = origin
        self.cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            self.cp.read_string(text, source=origin)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ConfigError(f"{origin}:{line or '?'}: {exc.message.splitlines()[0]}") from exc
        self.lines: dict[tuple[str, str | None], int] = {}
        section = None
        for n, raw in enumerate(text.splitlines(), 1):
            s = raw.strip()
            m = re.match(r"^\[(.+)\]$", s)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = n
            elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
                key = re.split(r"[=:]", s, 1)[0].strip().lower()
                self.lines.setdefault((section, key), n)

    def error(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = self.lines.get((section, key), self.lines.get((section, None), 0))
        where = f"[{section}] {key}: " if key else f"[{section}] "
        return ConfigError(f"{self.origin}:{line}: {where}{msg}")

    def get(self, section: str, key: str, conv=str, default=...):
        if not self.cp.has_option(section, key):
            if default is ...:
                raise self.error(section, None, f"missing required key {key!r}")
            return default
        raw = self.cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise self.error(section, key, f"bad value {raw!r} ({exc})") from None

    def check_keys(self, section: str, allowed) -> None:
        for key in self.cp.options(section):
            if key not in allowed:
                raise self.error(section, key, "unknown key")


def _positive(conv):
    def f(raw):
        v = conv(raw)
        if v <= 0:
            raise ValueError("must be positive")
        return v

    return f


def _nonneg(raw):
    v = float(raw)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


def _list(raw: str) -> list[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]


# -- locating files ---------------------------------------------------------------------


def builtin_profiles() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files(PROFILE_PACKAGE).iterdir() if p.name.endswith(".ini"))


def resolve(name_or_path: str, relative_to: Path | None = None) -> tuple[str, str]:
    """Return ``(origin, text)`` for a profile name or a file path."""
    p = Path(name_or_path)
    candidates = [p]
    if relative_to is not None and not p.is_absolute():
        candidates.insert(0, relative_to / p)
        candidates.insert(1, relative_to / f"{name_or_path}.ini")
    for c in candidates:
        if c.is_file():
            return str(c), c.read_text(encoding="utf-8")
    res = resources.files(PROFILE_PACKAGE) / f"{name_or_path}.ini"
    if res.is_file():
        return f"{name_or_path}.ini", res.read_text(encoding="utf-8")
    raise ConfigError(f"no scenario or profile named {name_or_path!r} (built-in: {', '.join(builtin_profiles())})")


# -- calibration ---------------------------------------------------------------------------


_SCENARIO_PREFIXES = ("flow.", "node:", "link:")


def parse_calibration(text: str, origin: str, name: str = "") -> topo.Calibration:
    ini = _Ini(text, origin)
    cal = topo.Calibration(name=name or Path(origin).stem)
    if ini.cp.has_section("link"):
        ini.check_keys("link", ("delay_ms", "rate_bits_per_ms", "mtu"))
        cal.link_delay = ini.get("link", "delay_ms", _nonneg, 0.0)
        cal.link_rate = ini.get("link", "rate_bits_per_ms", _positive(float), cal.link_rate)
        cal.mtu = ini.get("link", "mtu", _positive(int), cal.mtu)
    if ini.cp.has_section("node"):
        ini.check_keys("node", COST_KEYS)
        cal.node = {k: ini.get("node", k, _nonneg) for k in ini.cp.options("node")}
    if ini.cp.has_section("nat"):
        ini.check_keys("nat", ("cost_ms",))
        cal.nat = ini.get("nat", "cost_ms", _nonneg, 0.0)
    if ini.cp.has_section("dns"):
        ini.check_keys("dns", ("lookup_ms",))
        cal.dns_lookup = ini.get("dns", "lookup_ms", _nonneg, 0.0)
    for proto in ("isatap", "6to4", "teredo"):
        sec = f"protocol.{proto}"
        if ini.cp.has_section(sec):
            ini.check_keys(sec, _TUNNEL_KEYS)
            cal.tunnel[proto] = {k: ini.get(sec, k, _nonneg) for k in ini.cp.options(sec)}
    for sec in ini.cp.sections():
        if sec.startswith(_SCENARIO_PREFIXES):
            continue  # inline calibration shares the file with the scenario
        if sec not in ("link", "node", "nat", "dns", "suite", "scenario") and not sec.startswith("protocol."):
            raise ini.error(sec, None, "unknown calibration section")
        if sec.startswith("protocol.") and sec[9:] not in ("isatap", "6to4", "teredo"):
            raise ini.error(sec, None, "unknown protocol")
    return cal


# -- scenarios --------------------------------------------------------------------------------

_SCENARIO_KEYS = ("protocol", "calibration", "topology", "replications", "seed", "setup_at_ms", "dns_at_ms")
_FLOW_KEYS = ("kind", "src", "dst", "payload", "preset", "rate_pps", "duration_s", "count", "interval_ms", "start_ms")
_NODE_KEYS = ("role", "stack", "v4", "v6", "tunnel_roles", "label", "nat_inside", "dns_name") + tuple(
    f"cost_{k}" for k in COST_KEYS)
_LINK_KEYS = ("delay_ms", "rate_bits_per_ms", "mtu")


def _digest(*texts: str) -> str:
    h = hashlib.sha256()
    for t in texts:
        h.update(t.replace("\r\n", "\n").encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:12]


def load(name_or_path: str) -> Scenario | Suite:
    origin, text = resolve(name_or_path)
    ini = _Ini(text, origin)
    if ini.cp.has_section("suite"):
        return _load_suite(ini, text, origin)
    return parse_scenario(text, origin)


def load_scenario(name_or_path: str) -> Scenario:
    s = load(name_or_path)
    if isinstance(s, Suite):
        raise ConfigError(f"{name_or_path} is a suite, not a single scenario")
    return s


def _load_suite(ini: _Ini, text: str, origin: str) -> Suite:
    ini.check_keys("suite", ("scenarios",))
    names = ini.get("suite", "scenarios", _list)
    if not names:
        raise ini.error("suite", "scenarios", "empty scenario list")
    base = Path(origin).parent if Path(origin).is_file() else None
    suite = Suite(Path(origin).stem)
    for n in names:
        o, t = resolve(n, base)
        suite.scenarios.append(parse_scenario(t, o))
    suite.config_hash = _digest(text, *(s.config_hash for s in suite.scenarios))
    return suite


def parse_scenario(text: str, origin: str) -> Scenario:
    ini = _Ini(text, origin)
    if not ini.cp.has_section("scenario"):
        raise ConfigError(f"{origin}:1: missing [scenario] section")
    ini.check_keys("scenario", _SCENARIO_KEYS)
    protocol = ini.get("scenario", "protocol", str.strip)
    if protocol not in topo.PROTOCOLS:
        raise ini.error("scenario", "protocol", f"unknown protocol {protocol!r}, expected one of {topo.PROTOCOLS}")
    cal_name = ini.get("scenario", "calibration", str.strip, "")
    base = Path(origin).parent if Path(origin).is_file() else None
    if cal_name:
        try:
            cal_origin, cal_text = resolve(cal_name, base)
        except ConfigError as exc:
            raise ini.error("scenario", "calibration", str(exc)) from None
        cal = parse_calibration(cal_text, cal_origin, cal_name)
    else:
        cal_text = ""
        cal = parse_calibration(text, origin, "inline")

    kind = ini.get("scenario", "topology", str.strip, "standard")
    if kind == "standard":
        nodes, links = topo.build_standard(protocol, cal)
    elif kind == "inline":
        nodes, links = _inline_topology(ini, cal)
    else:
        raise ini.error("scenario", "topology", f"expected 'standard' or 'inline', got {kind!r}")
    try:
        topo.validate(protocol, nodes)
    except ConfigError as exc:
        raise ini.error("scenario", "protocol", str(exc)) from None

    node_ids = {n.id for n in nodes}
    flows = []
    for sec in ini.cp.sections():
        if not sec.startswith("flow."):
            continue
        flows.append(_flow(ini, sec, len(flows) + 1, node_ids))
    if not flows:
        raise ini.error("scenario", None, "no [flow.NAME] sections")
    return Scenario(
        name=Path(origin).stem,
        protocol=protocol,
        calibration=cal,
        nodes=nodes,
        links=links,
        flows=flows,
        replications=ini.get("scenario", "replications", _positive(int), 1),
        seed=ini.get("scenario", "seed", int, 1),
        setup_at_ms=ini.get("scenario", "setup_at_ms", _nonneg, 0.0),
        dns_at_ms=ini.get("scenario", "dns_at_ms", _nonneg, 50.0),
        config_hash=_digest(text, cal_text),
        source=origin,
    )


def _flow(ini: _Ini, sec: str, flow_id: int, node_ids: set[str]) -> FlowPlan:
    ini.check_keys(sec, _FLOW_KEYS)
    kind = ini.get(sec, "kind", str.strip)
    src, dst = ini.get(sec, "src", str.strip), ini.get(sec, "dst", str.strip)
    for key, v in (("src", src), ("dst", dst)):
        if v not in node_ids:
            raise ini.error(sec, key, f"unknown node {v!r}")
    rate = ini.get(sec, "rate_pps", _positive(float), None)
    preset = ini.get(sec, "preset", str.strip, None)
    if preset is not None:
        if preset not in PRESETS:
            raise ini.error(sec, "preset", f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        if rate is not None:
            raise ini.error(sec, "rate_pps", "give either a preset or a rate, not both")
        rate = PRESETS[preset]
    try:
        return FlowPlan(
            name=sec[5:],
            kind=kind,
            src=src,
            dst=dst,
            payload=ini.get(sec, "payload", int, 1500),
            rate_pps=rate,
            duration_s=ini.get(sec, "duration_s", float, None),
            count=ini.get(sec, "count", int, None),
            interval_ms=ini.get(sec, "interval_ms", float, None),
            start_ms=ini.get(sec, "start_ms", _nonneg, 100.0),
            flow_id=flow_id,
        )
    except PlanError as exc:
        raise ini.error(sec, None, str(exc)) from None


def _inline_topology(ini: _Ini, cal: topo.Calibration) -> tuple[list[NodeSpec], list[LinkSpec]]:
    nodes, links = [], []
    for sec in ini.cp.sections():
        if sec.startswith("node:"):
            ini.check_keys(sec, _NODE_KEYS)
            costs = dict(cal.node)
            for k in COST_KEYS:
                v = ini.get(sec, f"cost_{k}", _nonneg, None)
                if v is not None:
                    costs[k] = v
            try:
                nodes.append(NodeSpec(
                    id=sec[5:],
                    role=ini.get(sec, "role", str.strip),
                    stack=ini.get(sec, "stack", str.strip, "dual"),
                    v4=tuple(IPv4Address(a) for a in ini.get(sec, "v4", _list, [])),
                    v6=tuple(IPv6Address(a) for a in ini.get(sec, "v6", _list, [])),
                    tunnel_roles=frozenset(ini.get(sec, "tunnel_roles", _list, [])),
                    costs=costs,
                    label=ini.get(sec, "label", str.strip, ""),
                    nat_inside=ini.get(sec, "nat_inside", str.strip, None),
                    dns_name=ini.get(sec, "dns_name", str.strip, None),
                ))
            except (ConfigError, ValueError) as exc:
                raise ini.error(sec, None, str(exc)) from None
        elif sec.startswith("link:"):
            ini.check_keys(sec, _LINK_KEYS)
            parts = sec.split(":")
            if len(parts) != 3:
                raise ini.error(sec, None, "link sections are named [link:A:B]")
            try:
                links.append(LinkSpec(
                    parts[1], parts[2],
                    ini.get(sec, "delay_ms", _nonneg, cal.link_delay),
                    ini.get(sec, "rate_bits_per_ms", _positive(float), cal.link_rate),
                    ini.get(sec, "mtu", _positive(int), cal.mtu),
                ))
            except ValueError as exc:
                raise ini.error(sec, None, str(exc)) from None
    if not nodes:
        raise ini.error("scenario", "topology", "inline topology without [node:NAME] sections")
    ids = {n.id for n in nodes}
    for ln in links:
        for end in (ln.a, ln.b):
            if end not in ids:
                raise ini.error(f"link:{ln.a}:{ln.b}", None, f"unknown node {end!r}")
    return nodes, links
