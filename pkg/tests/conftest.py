from __future__ import annotations

import copy

import pytest

from tunnelsim import config
from tunnelsim.traffic import FlowPlan


def oracle_checksum_sum(data: bytes, initial: int = 0) -> int:
    """RFC 1071 one's-complement sum, written out word by word."""
    if len(data) % 2:
        data = data + b"\0"
    total = initial
    for i in range(0, len(data), 2):
        total += (data[i] << 8) + data[i + 1]
        while total > 0xFFFF:
            total = (total & 0xFFFF) + (total >> 16)
    return total


def short_scenario(name: str, seconds: float = 3.0, pings: int = 5) -> config.Scenario:
    """A built-in scenario with the stream cut to ``seconds`` and a few probes."""
    scn = copy.copy(config.load_scenario(name))
    end = 100.0 + seconds * 1000.0
    scn.flows = [
        FlowPlan("audio", "udp_stream", "sender", "receiver", 1500, 40.0, seconds, start_ms=100.0, flow_id=1),
        FlowPlan("ping", "ping", "sender", "receiver", 56, count=pings, interval_ms=100.0, start_ms=end + 100.0,
                 flow_id=2),
    ]
    return scn


@pytest.fixture
def short():
    return short_scenario
