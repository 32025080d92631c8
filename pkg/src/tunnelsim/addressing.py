"""IPv6 addresses that carry an embedded IPv4 address: 6to4, ISATAP and Teredo."""

from __future__ import annotations

from dataclasses import dataclass
from ipaddress import IPv4Address, IPv6Address, IPv6Network

V4Addr = IPv4Address
V6Addr = IPv6Address

SIX_TO_FOUR_PREFIX = 0x2002
TEREDO_PREFIX = IPv6Network("2001::/32")
ISATAP_MARKER = 0x5EFE

# Bit widths of the part of the address that identifies the tunnel site.
SIX_TO_FOUR_ID_BITS = 16 + 32  # 2002 + IPv4 -> /48 site prefix
ISATAP_ID_BITS = 64  # advertised /64 prefix

TEREDO_CONE_FLAG = 0x8000

_M32 = 0xFFFFFFFF
_M64 = (1 << 64) - 1


class NotATunnelAddress(ValueError):
    """Address does not follow the expected tunnel address layout."""


def v4(value: str | int | IPv4Address) -> IPv4Address:
    return value if isinstance(value, IPv4Address) else IPv4Address(value)


def v6(value: str | int | IPv6Address) -> IPv6Address:
    return value if isinstance(value, IPv6Address) else IPv6Address(value)


def render(addr: IPv4Address | IPv6Address) -> str:
    """Canonical text form (lower-case, zero-compressed)."""
    return str(addr)


# -- 6to4 -------------------------------------------------------------------


def synth_6to4(addr: IPv4Address, subnet: int = 0, interface_id: int = 0) -> IPv6Address:
    """``2002:<v4>:<subnet>::<interface_id>``."""
    if not 0 <= subnet <= 0xFFFF:
        raise ValueError("subnet id is 16 bits")
    value = (SIX_TO_FOUR_PREFIX << 112) | (int(v4(addr)) << 80) | (subnet << 64) | (interface_id & _M64)
    return IPv6Address(value)


def prefix_6to4(addr: IPv4Address) -> IPv6Network:
    return IPv6Network((int(synth_6to4(addr)), 48))


def is_6to4(addr: IPv6Address) -> bool:
    return int(addr) >> 112 == SIX_TO_FOUR_PREFIX


def parse_6to4(addr: IPv6Address) -> IPv4Address:
    value = int(v6(addr))
    if value >> 112 != SIX_TO_FOUR_PREFIX:
        raise NotATunnelAddress(f"{addr} is not inside 2002::/16")
    return IPv4Address((value >> 80) & _M32)


# -- ISATAP -----------------------------------------------------------------


def synth_isatap(prefix64: IPv6Network | IPv6Address | str, addr: IPv4Address) -> IPv6Address:
    """``<prefix64>:0:5efe:<v4>``."""
    if isinstance(prefix64, str):
        prefix64 = IPv6Network(prefix64)
    if isinstance(prefix64, IPv6Network):
        if prefix64.prefixlen != 64:
            raise ValueError("ISATAP needs a /64 prefix")
        high = int(prefix64.network_address)
    else:
        high = int(prefix64)
    if high & _M64:
        raise ValueError("prefix has non-zero interface bits")
    return IPv6Address(high | (ISATAP_MARKER << 32) | int(v4(addr)))


def is_isatap(addr: IPv6Address) -> bool:
    iid_high = (int(addr) >> 32) & _M32
    return iid_high in (ISATAP_MARKER, 0x02000000 | ISATAP_MARKER)


def parse_isatap(addr: IPv6Address) -> tuple[IPv6Network, IPv4Address]:
    """Return ``(prefix64, embedded_v4)``."""
    addr = v6(addr)
    if not is_isatap(addr):
        raise NotATunnelAddress(f"{addr} has no ISATAP interface identifier")
    value = int(addr)
    prefix = IPv6Network((value & ~_M64 & ((1 << 128) - 1), 64))
    return prefix, IPv4Address(value & _M32)


# -- Teredo -----------------------------------------------------------------


@dataclass(frozen=True)
class TeredoFields:
    server_v4: IPv4Address
    flags: int
    mapped_port: int
    mapped_v4: IPv4Address

    def __post_init__(self):
        if not 0 <= self.flags <= 0xFFFF or not 0 <= self.mapped_port <= 0xFFFF:
            raise ValueError("flags and port are 16-bit fields")


def synth_teredo(fields: TeredoFields, teredo_prefix: IPv6Network | int = TEREDO_PREFIX) -> IPv6Address:
    """Teredo client address; the mapped port and address are stored inverted."""
    prefix = _teredo_prefix_bits(teredo_prefix)
    value = (
        (prefix << 96)
        | (int(v4(fields.server_v4)) << 64)
        | (fields.flags << 48)
        | ((fields.mapped_port ^ 0xFFFF) << 32)
        | (int(v4(fields.mapped_v4)) ^ _M32)
    )
    return IPv6Address(value)


def is_teredo(addr: IPv6Address, teredo_prefix: IPv6Network | int = TEREDO_PREFIX) -> bool:
    return int(addr) >> 96 == _teredo_prefix_bits(teredo_prefix)


def parse_teredo(addr: IPv6Address, teredo_prefix: IPv6Network | int = TEREDO_PREFIX) -> TeredoFields:
    addr = v6(addr)
    if not is_teredo(addr, teredo_prefix):
        raise NotATunnelAddress(f"{addr} is outside the Teredo prefix")
    value = int(addr)
    return TeredoFields(
        server_v4=IPv4Address((value >> 64) & _M32),
        flags=(value >> 48) & 0xFFFF,
        mapped_port=((value >> 32) & 0xFFFF) ^ 0xFFFF,
        mapped_v4=IPv4Address((value & _M32) ^ _M32),
    )


def _teredo_prefix_bits(teredo_prefix: IPv6Network | int) -> int:
    if isinstance(teredo_prefix, IPv6Network):
        if teredo_prefix.prefixlen != 32:
            raise ValueError("Teredo prefix must be a /32")
        return int(teredo_prefix.network_address) >> 96
    return int(teredo_prefix) & _M32
