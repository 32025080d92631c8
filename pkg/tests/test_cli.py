import csv
import io

import pytest

from tunnelsim import cli, config
from tunnelsim import metrics as m

PROTOS = ("isatap", "6to4", "teredo", "baseline")


def short_profile(tmp_path, proto):
    text = config.resolve(f"{proto}-default")[1]
    text = (text.replace("duration_s = 300", "duration_s = 2").replace("count = 100", "count = 3")
            .replace("start_ms = 301100", "start_ms = 2300").replace("replications = 5", "replications = 2"))
    p = tmp_path / f"{proto}-short.ini"
    p.write_text(text)
    return p


@pytest.fixture
def suite(tmp_path):
    for proto in PROTOS:
        short_profile(tmp_path, proto)
    p = tmp_path / "mini.ini"
    p.write_text("[suite]\nscenarios = " + ", ".join(f"{x}-short.ini" for x in PROTOS) + "\n")
    return p


def test_run_writes_per_replication_files(tmp_path):
    scn = short_profile(tmp_path, "isatap")
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(scn), "--reps", "3", "--out", str(out)]) == 0
    d = out / "isatap-short"
    assert sorted(p.name for p in d.iterdir()) == [
        "metrics_r0.csv", "metrics_r1.csv", "metrics_r2.csv", "summary.csv",
        "trace_r0.csv", "trace_r1.csv", "trace_r2.csv",
    ]
    head = (d / "trace_r0.csv").read_text().splitlines()[0]
    assert head == "time_ms,node,packet_id,flow_id,event,reason,bytes"
    (summary,) = m.summaries_from_csv((d / "summary.csv").read_text())
    assert summary.seeds == (1, 2, 3)


def test_no_trace(tmp_path):
    scn = short_profile(tmp_path, "6to4")
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(scn), "--out", str(out), "--no-trace"]) == 0
    assert not list((out / "6to4-short").glob("trace_*"))


def test_out_dir_from_environment(tmp_path, monkeypatch):
    scn = short_profile(tmp_path, "baseline")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--scenario", str(scn), "--reps", "1"]) == 0
    assert (tmp_path / "env" / "baseline-short" / "summary.csv").exists()


def test_repeat_runs_are_byte_identical(tmp_path):
    scn = short_profile(tmp_path, "teredo")
    for out in ("a", "b"):
        assert cli.main(["run", "--scenario", str(scn), "--reps", "2", "--out", str(tmp_path / out)]) == 0
    for name in ("trace_r0.csv", "trace_r1.csv", "metrics_r1.csv", "summary.csv"):
        a = (tmp_path / "a" / "teredo-short" / name).read_bytes()
        assert a == (tmp_path / "b" / "teredo-short" / name).read_bytes()


def test_suite_run_ranks(tmp_path, suite, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(suite), "--out", str(out), "--no-trace"]) == 0
    text = capsys.readouterr().out
    assert "# isatap: config" in text and "seeds 1,2" in text
    rows = list(csv.reader(io.StringIO((out / "mini" / "ranking.csv").read_text())))
    params = [r[0] for r in rows[1:]]
    assert "tunneling_overhead" in params and "throughput" in params
    assert (out / "mini" / "report.txt").read_text() == text


def _summaries(tmp_path, suite):
    out = tmp_path / "out"
    cli.main(["run", "--scenario", str(suite), "--out", str(out), "--no-trace"])
    return {p: out / f"{p}-short" / "summary.csv" for p in PROTOS}


def test_compare(tmp_path, suite, capsys):
    s = _summaries(tmp_path, suite)
    capsys.readouterr()
    dest = tmp_path / "rank.csv"
    rc = cli.main(["compare", "--summaries", str(s["isatap"]), str(s["6to4"]), str(s["teredo"]),
                   "--baseline", str(s["baseline"]), "--out", str(dest)])
    assert rc == 0 and dest.exists()
    assert "warning" not in capsys.readouterr().err


def test_compare_missing_protocol(tmp_path, suite, capsys):
    s = _summaries(tmp_path, suite)
    capsys.readouterr()
    rc = cli.main(["compare", "--summaries", str(s["isatap"]), str(s["6to4"]), "--out", str(tmp_path / "r.csv")])
    assert rc == 1
    assert "teredo" in capsys.readouterr().err


def test_compare_without_baseline_warns(tmp_path, suite, capsys):
    s = _summaries(tmp_path, suite)
    capsys.readouterr()
    rc = cli.main(["compare", "--summaries", str(s["isatap"]), str(s["6to4"]), str(s["teredo"]),
                   "--out", str(tmp_path / "r.csv")])
    captured = capsys.readouterr()
    assert rc == 0 and "no baseline" in captured.err
    assert "tunneling_overhead" not in (tmp_path / "r.csv").read_text()


@pytest.mark.parametrize("fmt", ["csv", "table"])
def test_report_formats(tmp_path, suite, capsys, fmt):
    s = _summaries(tmp_path, suite)
    capsys.readouterr()
    assert cli.main(["report", "--format", fmt, "--summaries", *map(str, s.values())]) == 0
    text = capsys.readouterr().out
    if fmt == "csv":
        assert [r.protocol for r in m.summaries_from_csv(text)] == list(PROTOS)
    else:
        assert "isatap" in text and "," not in text.splitlines()[-1]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nprotocol = ipx\n")
    assert cli.main(["run", "--scenario", str(bad)]) == 2
    assert cli.main(["run", "--scenario", "isatap-default", "--reps", "0"]) == 2
    assert cli.main(["report", "--summaries", str(tmp_path / "missing.csv")]) == 1
    assert "bad.ini:2" in capsys.readouterr().err
