"""Traffic sources and the per-flow send/receive log extracted from a trace."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .netsim import InvariantViolation, TraceRecord

PRESETS = {"audio": 40.0, "video": 200.0}
DEFAULT_PAYLOAD = 1500
PING_PAYLOAD = 56


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class FlowPlan:
    name: str
    kind: str  # "udp_stream" | "ping"
    src: str
    dst: str
    payload: int = DEFAULT_PAYLOAD
    rate_pps: float | None = None
    duration_s: float | None = None
    count: int | None = None
    interval_ms: float | None = None
    start_ms: float = 100.0
    flow_id: int = 1

    def __post_init__(self):
        if self.kind not in ("udp_stream", "ping"):
            raise PlanError(f"flow {self.name}: unknown kind {self.kind!r}")
        if self.payload <= 0:
            raise PlanError(f"flow {self.name}: payload must be positive")
        if self.flow_id <= 0:
            raise PlanError(f"flow {self.name}: flow ids start at 1")
        if self.kind == "ping":
            if not self.count or self.count <= 0 or not self.interval_ms or self.interval_ms <= 0:
                raise PlanError(f"flow {self.name}: ping needs a positive count and interval")
        else:
            if not self.rate_pps or self.rate_pps <= 0:
                raise PlanError(f"flow {self.name}: stream needs a positive rate")
            if self.count is None and (self.duration_s is None or self.duration_s <= 0):
                raise PlanError(f"flow {self.name}: stream needs a duration or a count")

    @property
    def n_packets(self) -> int:
        if self.count is not None:
            return int(self.count)
        return int(round(self.rate_pps * self.duration_s))

    @property
    def gap_ms(self) -> float:
        if self.kind == "ping":
            return float(self.interval_ms)
        return 1000.0 / self.rate_pps


def stream(name, src, dst, preset="audio", duration_s=300.0, **kw) -> FlowPlan:
    return FlowPlan(name, "udp_stream", src, dst, rate_pps=PRESETS[preset], duration_s=duration_s, **kw)


def generate(plan: FlowPlan) -> list[tuple[float, int]]:
    """Send schedule ``[(time_ms, seq), ...]`` at a fixed inter-departure gap."""
    gap = plan.gap_ms
    return [(plan.start_ms + i * gap, i) for i in range(plan.n_packets)]


@dataclass
class FlowLog:
    flow_id: int
    kind: str
    seq: list[int] = field(default_factory=list)
    sent: list[float] = field(default_factory=list)
    received: list[float | None] = field(default_factory=list)

    @property
    def n_sent(self) -> int:
        return len(self.sent)

    @property
    def n_received(self) -> int:
        return sum(1 for r in self.received if r is not None)

    def pairs(self) -> list[tuple[float, float]]:
        return [(s, r) for s, r in zip(self.sent, self.received) if r is not None]

    def missing(self) -> list[int]:
        return [q for q, r in zip(self.seq, self.received) if r is None]


def collect(trace: Iterable[TraceRecord], flows: Iterable[FlowPlan]) -> dict[int, FlowLog]:
    """Join ``sent`` and ``received`` records into one log per flow.

    Streams are closed by ``received`` at the destination; pings by the echo
    reply arriving back at the source, matched on (flow, seq). Control
    traffic (refresh, setup, DNS) lives on flow 0 and is ignored.
    """
    plans = {f.flow_id: f for f in flows}
    sent: dict[int, dict[int, float]] = {fid: {} for fid in plans}
    got: dict[int, dict[int, float]] = {fid: {} for fid in plans}
    for r in trace:
        plan = plans.get(r.flow_id)
        if plan is None:
            continue
        if r.event == "sent" and r.kind in ("data", "echo_request") and r.node == plan.src:
            sent[r.flow_id].setdefault(r.seq, r.time)
        elif r.event == "received":
            closing = (plan.kind == "udp_stream" and r.kind == "data" and r.node == plan.dst) or (
                plan.kind == "ping" and r.kind == "echo_reply" and r.node == plan.src
            )
            if not closing:
                continue
            if r.seq in got[r.flow_id]:
                raise InvariantViolation(f"flow {r.flow_id} seq {r.seq} delivered twice")
            got[r.flow_id][r.seq] = r.time
    logs = {}
    for fid, plan in plans.items():
        log = FlowLog(fid, plan.kind)
        for q in sorted(sent[fid]):
            log.seq.append(q)
            log.sent.append(sent[fid][q])
            log.received.append(got[fid].get(q))
        stray = set(got[fid]) - set(sent[fid])
        if stray:
            raise InvariantViolation(f"flow {fid}: received seqs {sorted(stray)[:5]} were never sent")
        logs[fid] = log
    return logs
