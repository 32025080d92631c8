"""Performance metrics over flow logs, per-protocol summaries and ranking.

All times are milliseconds. Variance is the population form (divide by N).
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

from . import kernels
from .traffic import FlowLog

PACKET_BYTES = 1500


class MetricError(ValueError):
    """A metric is undefined for the given input."""


class IncompleteSummary(MetricError):
    pass


class CalibrationWarning(UserWarning):
    pass


# -- throughput ---------------------------------------------------------------------


def throughput_pps(log: FlowLog) -> float:
    """Received packets over the span first send .. last receive, in seconds."""
    pairs = log.pairs()
    if not pairs:
        raise MetricError(f"flow {log.flow_id}: nothing received")
    span_ms = max(r for _, r in pairs) - min(log.sent)
    if span_ms <= 0:
        raise MetricError(f"flow {log.flow_id}: zero observation span")
    return len(pairs) / (span_ms / 1000.0)


def throughput_kbps(pps: float) -> float:
    if pps < 0:
        raise MetricError("negative packet rate")
    return pps * PACKET_BYTES * 8 / 1000.0


# -- delay, jitter ---------------------------------------------------------------------


def e2ed(log: FlowLog) -> tuple[list[float], float]:
    """Per-packet one-way delays ``Tr - Ts`` and their mean. Losses are skipped."""
    d = [r - s for s, r in log.pairs()]
    if not d:
        raise MetricError(f"flow {log.flow_id}: no delay samples")
    return d, math.fsum(d) / len(d)


@dataclass(frozen=True)
class Jitter:
    series: list[float]  # J_0 = 0, J_i = |D_i - D_{i-1}|
    mean: float  # over i >= 1
    telescoped: float  # signed sum of D_i - D_{i-1}, i.e. D_n - D_0


def jitter(delays: Sequence[float]) -> Jitter:
    if not delays:
        raise MetricError("empty delay series")
    j = kernels.abs_diffs(delays)
    tail = j[1:]
    mean = math.fsum(tail) / len(tail) if tail else 0.0
    tele = math.fsum(delays[i] - delays[i - 1] for i in range(1, len(delays)))
    return Jitter(j, mean, tele)


def variance(sample: Sequence[float]) -> float:
    if not sample:
        raise MetricError("variance of an empty sample")
    return kernels.mean_var(sample)[1]


def stddev(sample: Sequence[float]) -> float:
    return math.sqrt(variance(sample))


def stddev_from_variance(v: float) -> float:
    if v < 0:
        raise MetricError("negative variance")
    return math.sqrt(v)


# -- ping --------------------------------------------------------------------------------


def rtt(log: FlowLog) -> tuple[float, int]:
    """Mean round-trip time and the number of unmatched probes."""
    pairs = log.pairs()
    if not pairs:
        raise MetricError(f"flow {log.flow_id}: no echo replies")
    return math.fsum(r - s for s, r in pairs) / len(pairs), log.n_sent - len(pairs)


def tunneling_overhead(rtt_tunneled: float, rtt_untunneled: float) -> float:
    over = rtt_tunneled - rtt_untunneled
    if over < 0:
        warnings.warn(
            f"tunneled RTT {rtt_tunneled:.4f} ms is below the untunneled {rtt_untunneled:.4f} ms; "
            "the calibration is inconsistent",
            CalibrationWarning,
            stacklevel=2,
        )
    return over


# -- summaries -----------------------------------------------------------------------


@dataclass
class MetricsSummary:
    protocol: str
    throughput_pps: float | None = None
    throughput_kbps: float | None = None
    e2ed_mean: float | None = None
    jitter_mean: float | None = None
    jitter_variance: float | None = None
    jitter_stddev: float | None = None
    rtt_mean: float | None = None
    tunneling_overhead: float | None = None
    tunnel_setup_delay: float | None = None
    query_delay: float | None = None
    aux_devices: int = 0
    aux_names: tuple[str, ...] = ()
    config_hash: str = ""
    seeds: tuple[int, ...] = ()


SUMMARY_COLUMNS = tuple(f.name for f in fields(MetricsSummary))
_FLOAT_COLUMNS = SUMMARY_COLUMNS[1:11]


def summarize_flows(
    protocol: str,
    stream: FlowLog | None,
    ping: FlowLog | None,
    setup_delay: float | None = None,
    query_delay: float | None = None,
    aux: tuple[int, Iterable[str]] = (0, ()),
) -> MetricsSummary:
    s = MetricsSummary(protocol, tunnel_setup_delay=setup_delay, query_delay=query_delay)
    s.aux_devices, s.aux_names = aux[0], tuple(aux[1])
    if stream is not None:
        s.throughput_pps = throughput_pps(stream)
        s.throughput_kbps = throughput_kbps(s.throughput_pps)
        d, s.e2ed_mean = e2ed(stream)
        j = jitter(d)
        s.jitter_mean = j.mean
        s.jitter_variance = variance(j.series[1:]) if len(d) > 1 else 0.0
        s.jitter_stddev = stddev_from_variance(s.jitter_variance)
    if ping is not None:
        s.rtt_mean = rtt(ping)[0]
    return s


def average(runs: Sequence[MetricsSummary]) -> MetricsSummary:
    """Arithmetic mean per metric across replications.

    The averaged stddev is the root of the averaged variance, so the two
    columns stay consistent with each other.
    """
    if not runs:
        raise MetricError("no runs to average")
    protos = {r.protocol for r in runs}
    if len(protos) != 1:
        raise MetricError(f"cannot average across protocols {sorted(protos)}")
    out = MetricsSummary(runs[0].protocol, aux_devices=runs[0].aux_devices, aux_names=runs[0].aux_names,
                         config_hash=runs[0].config_hash)
    for name in _FLOAT_COLUMNS:
        vals = [getattr(r, name) for r in runs]
        if any(v is None for v in vals):
            continue
        setattr(out, name, math.fsum(vals) / len(vals))
    if out.jitter_variance is not None:
        out.jitter_stddev = math.sqrt(out.jitter_variance)
    if out.throughput_pps is not None:
        out.throughput_kbps = throughput_kbps(out.throughput_pps)
    out.seeds = tuple(s for r in runs for s in r.seeds)
    return out


# -- ranking -------------------------------------------------------------------------------

# parameter -> (summary field, higher is better)
PARAMETERS = {
    "throughput": ("throughput_kbps", True),
    "e2ed": ("e2ed_mean", False),
    "jitter": ("jitter_mean", False),
    "rtt": ("rtt_mean", False),
    "tunneling_overhead": ("tunneling_overhead", False),
    "tunnel_setup_delay": ("tunnel_setup_delay", False),
    "query_delay": ("query_delay", False),
    "aux_devices": ("aux_devices", False),
}


def competition_ranks(values: dict[str, float], higher_better: bool = False, rel_tol: float = 1e-9) -> dict[str, int]:
    """Standard competition ranking ("1224"); values within ``rel_tol`` tie."""
    keyed = sorted(values.items(), key=lambda kv: (-kv[1] if higher_better else kv[1], kv[0]))
    ranks: dict[str, int] = {}
    for i, (name, v) in enumerate(keyed):
        if i and math.isclose(v, keyed[i - 1][1], rel_tol=rel_tol, abs_tol=1e-12):
            ranks[name] = ranks[keyed[i - 1][0]]
        else:
            ranks[name] = i + 1
    return ranks


@dataclass
class Ranking:
    protocols: list[str]
    ranks: dict[str, dict[str, int]] = field(default_factory=dict)  # parameter -> protocol -> rank
    values: dict[str, dict[str, float]] = field(default_factory=dict)
    omitted: list[str] = field(default_factory=list)

    def ties(self, parameter: str) -> list[list[str]]:
        groups: dict[int, list[str]] = {}
        for p, r in self.ranks[parameter].items():
            groups.setdefault(r, []).append(p)
        return [sorted(g) for _, g in sorted(groups.items()) if len(g) > 1]


def with_overhead(summaries: Sequence[MetricsSummary], baseline: MetricsSummary | None) -> list[MetricsSummary]:
    """Copies of ``summaries`` with tunneling overhead filled from ``baseline``."""
    from dataclasses import replace

    out = []
    for s in summaries:
        over = None
        if baseline is not None and baseline.rtt_mean is not None and s.rtt_mean is not None:
            over = tunneling_overhead(s.rtt_mean, baseline.rtt_mean)
        out.append(replace(s, tunneling_overhead=over))
    return out


def rank(summaries: Sequence[MetricsSummary], baseline: MetricsSummary | None = None) -> Ranking:
    if not summaries:
        raise IncompleteSummary("no summaries to rank")
    if baseline is not None:
        summaries = with_overhead(summaries, baseline)
    by_proto = {s.protocol: s for s in summaries}
    if len(by_proto) != len(summaries):
        raise IncompleteSummary("duplicate protocol in summaries")
    out = Ranking(list(by_proto))
    for param, (attr, higher) in PARAMETERS.items():
        vals = {p: getattr(s, attr) for p, s in by_proto.items()}
        if param == "tunneling_overhead" and baseline is None:
            warnings.warn("no baseline summary: tunneling overhead omitted from the ranking", stacklevel=2)
            out.omitted.append(param)
            continue
        missing = [p for p, v in vals.items() if v is None]
        if missing:
            raise IncompleteSummary(f"{param} missing for {', '.join(sorted(missing))}")
        out.values[param] = vals
        out.ranks[param] = competition_ranks(vals, higher)
    return out


# -- output ------------------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, tuple):
        return ";".join(str(x) for x in v)
    return str(v)


# Millisecond columns use 4 decimals; rates and the variance pair keep full
# precision so rankings read back from CSV match the in-memory ones.
_FULL_PRECISION = ("throughput_pps", "throughput_kbps", "jitter_variance", "jitter_stddev")


def _fmt_csv(name: str, v) -> str:
    if name in _FULL_PRECISION and v is not None:
        return repr(float(v))
    return _fmt(v)


def summaries_to_csv(summaries: Iterable[MetricsSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow([_fmt_csv(c, getattr(s, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


_EMPTY = {"aux_names": (), "seeds": (), "config_hash": ""}


def _parse(name: str, raw: str):
    if raw == "":
        return _EMPTY.get(name)
    if name in ("protocol", "config_hash"):
        return raw
    if name == "aux_devices":
        return int(raw)
    if name == "aux_names":
        return tuple(raw.split(";"))
    if name == "seeds":
        return tuple(int(x) for x in raw.split(";"))
    return float(raw)


def summaries_from_csv(text: str) -> list[MetricsSummary]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != set(SUMMARY_COLUMNS):
        raise MetricError(f"unexpected summary columns {sorted(set(rows[0]) ^ set(SUMMARY_COLUMNS))}")
    return [MetricsSummary(**{c: _parse(c, row[c]) for c in SUMMARY_COLUMNS}) for row in rows]


LABELS = {
    "throughput": "Throughput (Kbps)",
    "e2ed": "End-to-end delay (ms)",
    "jitter": "Jitter (ms)",
    "rtt": "Round-trip time (ms)",
    "tunneling_overhead": "Tunneling overhead (ms)",
    "tunnel_setup_delay": "Tunnel setup delay (ms)",
    "query_delay": "DNS query delay (ms)",
    "aux_devices": "Auxiliary devices",
}


def ranking_to_csv(r: Ranking) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter"] + [f"{p}_value" for p in r.protocols] + [f"{p}_rank" for p in r.protocols] + ["ties"])
    for param in PARAMETERS:
        if param not in r.ranks:
            continue
        vals = r.values[param]
        w.writerow(
            [param]
            + [_fmt(vals[p]) for p in r.protocols]
            + [r.ranks[param][p] for p in r.protocols]
            + [" ".join("=".join(g) for g in r.ties(param))]
        )
    return buf.getvalue()


def ranking_table(r: Ranking) -> str:
    """Aligned text table: value and rank per protocol, ties flagged."""
    head = ["Parameter"] + r.protocols + ["Ties"]
    rows = []
    for param in PARAMETERS:
        if param not in r.ranks:
            rows.append([LABELS[param]] + ["n/a"] * len(r.protocols) + ["omitted"])
            continue
        vals, ranks = r.values[param], r.ranks[param]
        rows.append(
            [LABELS[param]]
            + [f"{_fmt(vals[p])} (#{ranks[p]})" for p in r.protocols]
            + [", ".join(" = ".join(g) for g in r.ties(param)) or "-"]
        )
    return _table(head, rows)


def summary_table(summaries: Sequence[MetricsSummary]) -> str:
    head = ["Metric"] + [s.protocol for s in summaries]
    rows = [[c] + [_fmt(getattr(s, c)) for s in summaries] for c in SUMMARY_COLUMNS[1:13]]
    return _table(head, rows)


def _table(head: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]

    def fmt(cells):
        return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), rule] + [fmt(r) for r in rows]) + "\n"
