"""Command-line interface: ``run``, ``compare`` and ``report``.

Exit codes: 0 success, 1 metric or input error, 2 invalid configuration,
3 the simulation broke an invariant or ran away.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from . import config, experiment
from . import metrics as m
from .netsim import ConfigError, InvariantViolation, RunawayError, write_trace_csv

log = logging.getLogger("tunnelsim")

OUT_ENV = "TUNNELSIM_OUT"
DEFAULT_OUT = "tunnelsim-out"
TUNNELED = ("isatap", "6to4", "teredo")


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def run_scenario(scn: config.Scenario, out: Path, reps: int | None, seed: int | None, jobs: int,
                 traces: bool = True) -> m.MetricsSummary:
    runs = experiment.replicate(scn, reps, seed, jobs=jobs, keep_trace=traces)
    d = out / scn.name
    for r, res in enumerate(runs):
        if traces:
            d.mkdir(parents=True, exist_ok=True)
            with open(d / f"trace_r{r}.csv", "w", encoding="utf-8", newline="") as fh:
                write_trace_csv(res.trace, fh)
        _write(d / f"metrics_r{r}.csv", m.summaries_to_csv([res.summary]))
    summary = m.average([r.summary for r in runs])
    _write(d / "summary.csv", m.summaries_to_csv([summary]))
    log.info("%s: %d replication(s) -> %s", scn.name, len(runs), d)
    return summary


def compare(summaries: list[m.MetricsSummary], baseline: m.MetricsSummary | None) -> m.Ranking:
    by_proto = {s.protocol: s for s in summaries}
    missing = [p for p in TUNNELED if p not in by_proto]
    if missing:
        raise m.IncompleteSummary(f"no summary for protocol(s): {', '.join(missing)}")
    extra = sorted(set(by_proto) - set(TUNNELED))
    if extra:
        raise m.IncompleteSummary(f"unexpected protocol(s) among the summaries: {', '.join(extra)}")
    return m.rank([by_proto[p] for p in TUNNELED], baseline)


def _read_summaries(paths: list[str]) -> list[m.MetricsSummary]:
    out = []
    for p in paths:
        try:
            text = Path(p).read_text(encoding="utf-8")
        except OSError as exc:
            raise m.MetricError(f"{p}: {exc.strerror}") from None
        rows = m.summaries_from_csv(text)
        if not rows:
            raise m.MetricError(f"{p}: no summary rows")
        out.extend(rows)
    return out


def _report_header(summaries: list[m.MetricsSummary]) -> str:
    lines = []
    for s in summaries:
        seeds = ",".join(str(x) for x in s.seeds)
        lines.append(f"# {s.protocol}: config {s.config_hash or '-'} seeds {seeds or '-'}")
    return "\n".join(lines) + "\n"


# -- commands --------------------------------------------------------------------------------


def cmd_run(args) -> int:
    target = config.load(args.scenario)
    out = _out_dir(args.out)
    scenarios = target.scenarios if isinstance(target, config.Suite) else [target]
    summaries = [run_scenario(s, out, args.reps, args.seed, args.jobs, not args.no_trace) for s in scenarios]
    if isinstance(target, config.Suite):
        base = next((s for s in summaries if s.protocol == "baseline"), None)
        tunneled = [s for s in summaries if s.protocol != "baseline"]
        if {s.protocol for s in tunneled} == set(TUNNELED):
            ranking = compare(tunneled, base)
            _write(out / target.name / "ranking.csv", m.ranking_to_csv(ranking))
            report = _report_header(summaries) + m.ranking_table(ranking)
            _write(out / target.name / "report.txt", report)
            print(report, end="")
            return 0
    print(m.summary_table(summaries), end="")
    return 0


def cmd_compare(args) -> int:
    summaries = _read_summaries(args.summaries)
    baseline = None
    if args.baseline:
        rows = _read_summaries([args.baseline])
        baseline = next((r for r in rows if r.protocol == "baseline"), rows[0])
    else:
        summaries_base = [s for s in summaries if s.protocol == "baseline"]
        if summaries_base:
            baseline = summaries_base[0]
    summaries = [s for s in summaries if s.protocol != "baseline"]
    if baseline is None:
        print("warning: no baseline summary; tunneling overhead is omitted", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        ranking = compare(summaries, baseline)
    out = Path(args.out) if args.out else _out_dir(None) / "ranking.csv"
    _write(out, m.ranking_to_csv(ranking))
    print(_report_header(summaries + ([baseline] if baseline else [])) + m.ranking_table(ranking), end="")
    return 0


def cmd_report(args) -> int:
    summaries = _read_summaries(args.summaries)
    if args.format == "csv":
        print(m.summaries_to_csv(summaries), end="")
    else:
        print(_report_header(summaries) + m.summary_table(summaries), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tunnelsim", description="Simulate and compare 6to4, Teredo and ISATAP.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a scenario or suite and write traces and metrics")
    run.add_argument("--scenario", required=True, help="built-in profile name or path to an .ini file")
    run.add_argument("--reps", type=int, help="number of replications (default: from the scenario)")
    run.add_argument("--seed", type=int, help="base seed; replication r uses seed + r")
    run.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    run.add_argument("--jobs", type=int, default=1, help="replications to run in parallel")
    run.add_argument("--no-trace", action="store_true", help="skip writing per-run trace CSVs")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="rank protocol summaries")
    cmp_.add_argument("--summaries", nargs="+", required=True, help="summary.csv files for the three protocols")
    cmp_.add_argument("--baseline", help="summary.csv of the untunneled baseline")
    cmp_.add_argument("--out", help="ranking CSV path (default: <out dir>/ranking.csv)")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="print summaries as CSV or an aligned table")
    rep.add_argument("--format", choices=("csv", "table"), default="table")
    rep.add_argument("--summaries", nargs="+", required=True)
    rep.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "reps", None) is not None and args.reps < 1:
        print("error: --reps must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunawayError, InvariantViolation) as exc:
        print(f"error: simulation aborted: {exc}", file=sys.stderr)
        return 3
    except m.MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
