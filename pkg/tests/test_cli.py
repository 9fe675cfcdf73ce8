from __future__ import annotations

import json
import sys

import pytest

from conftest import reference_trace
from nrgprof.cli import cli
from nrgprof.counters import CapConstraint, enforce_cap_sim
from nrgprof.domains import PKG, PP0, PP1, DRAM
from nrgprof.meters import export_csv, random_walk_series
from nrgprof.report import render_flat
from nrgprof.sampler import SamplerConfig, replay
from nrgprof.trace import bursty_trace, dump_trace, loads_trace


@pytest.fixture
def trace_file(tmp_path):
    path = tmp_path / "ref.trace"
    with open(path, "w") as fp:
        dump_trace(reference_trace(), fp)
    return path


@pytest.fixture
def powercap(tmp_path):
    root = tmp_path / "powercap"
    for zone, name, energy in (("intel-rapl:0", "package-0", 5_000), ("intel-rapl:0:0", "core", 900)):
        d = root / zone
        d.mkdir(parents=True)
        (d / "name").write_text(name + "\n")
        (d / "energy_uj").write_text(f"{energy}\n")
        (d / "max_energy_range_uj").write_text("262143328850\n")
    (root / "intel-rapl:0" / "constraint_0_power_limit_uw").write_text("95000000\n")
    (root / "intel-rapl:0" / "constraint_0_time_window_us").write_text("999424\n")
    return root


def test_report_help(capsys):
    assert cli(["report", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag(trace_file, capsys):
    assert cli(["replay", "--trace", str(trace_file), "--bogus"]) == 2
    assert "--bogus" in capsys.readouterr().err


def test_bad_quantity_is_usage_error(trace_file, capsys):
    assert cli(["replay", "--trace", str(trace_file), "--period", "fast", "--threshold", "10uj"]) == 2
    assert cli(["replay", "--trace", str(trace_file), "--threshold", "10 bananas"]) == 2
    assert cli(["replay", "--trace", str(trace_file)]) == 2


def test_replay_json_matches_library(trace_file, capsys):
    assert cli(["replay", "--trace", str(trace_file), "--period", "1ms", "--threshold", "10uj", "--format", "json"]) == 0
    out = capsys.readouterr().out
    trace = reference_trace()
    expected = replay(trace, SamplerConfig({d: 10 for d in (PKG, PP0, PP1, DRAM)}, period_us=1_000))
    assert out == render_flat(expected, "json")


def test_replay_per_domain_threshold_and_output_file(trace_file, tmp_path):
    out = tmp_path / "flat.json"
    assert cli(["replay", "--trace", str(trace_file), "--period", "2ms", "--domains", "pkg,dram",
                "--threshold", "pkg=1mj", "--threshold", "dram=50uj", "--format", "json", "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["config"] == {"period_us": 2_000, "threshold_uj": {"pkg": 1_000, "dram": 50}}


def test_report_rerenders_saved_profile(trace_file, tmp_path, capsys):
    saved = tmp_path / "flat.json"
    cli(["replay", "--trace", str(trace_file), "--threshold", "100uj", "--format", "json", "-o", str(saved)])
    assert cli(["report", str(saved), "--format", "json"]) == 0
    assert capsys.readouterr().out == saved.read_text()
    assert cli(["report", str(saved), "--format", "svg"]) == 0
    assert "<svg" in capsys.readouterr().out


def test_report_errors(tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text('{"schema": "other"}')
    assert cli(["report", str(bad)]) == 2
    assert cli(["report"]) == 2
    assert cli(["report", str(tmp_path / "missing.json")]) == 1


def test_cap_simulation(tmp_path, capsys):
    path = tmp_path / "bursty.trace"
    tr = bursty_trace(11, 1_000_000)
    with open(path, "w") as fp:
        dump_trace(tr, fp)
    assert cli(["cap", "--trace", str(path), "--limit", "5W", "--window", "100ms"]) == 0
    capped = loads_trace(capsys.readouterr().out)
    assert capped == enforce_cap_sim(tr, CapConstraint(PKG, 5_000_000, 100_000))


def test_cap_live_on_fixture(powercap):
    assert cli(["--powercap-root", str(powercap), "cap", "--limit", "10W", "--window", "1s"]) == 0
    assert (powercap / "intel-rapl:0" / "constraint_0_power_limit_uw").read_text().strip() == "10000000"
    assert cli(["--powercap-root", str(powercap), "cap", "--domain", "pp0", "--limit", "1W", "--window", "1s"]) == 1
    assert cli(["--powercap-root", str(powercap), "cap", "--limit", "0W", "--window", "1s"]) == 1


def test_sample_on_missing_powercap(tmp_path, capsys):
    assert cli(["--powercap-root", str(tmp_path), "sample", "--duration", "10ms"]) == 1
    assert "SourceUnavailable" in capsys.readouterr().err


def test_sample_fixture(powercap, capsys):
    assert cli(["--powercap-root", str(powercap), "sample", "--duration", "100ms", "--period", "10ms",
                "--threshold", "10uj", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["totals"]["hits"] == {"pkg": 0, "pp0": 0}  # fixture counters never move
    assert doc["totals"]["perf_ticks"] >= 5


def test_span_run_fixture(powercap, capsys):
    assert cli(["--powercap-root", str(powercap), "span-run", "--format", "json", "--",
                sys.executable, "-c", "pass"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["root"]["children"][0]["energy_uj"] == {"pkg": 0, "pp0": 0}
    assert cli(["--powercap-root", str(powercap), "span-run", "--", sys.executable, "-c", "raise SystemExit(3)"]) == 1
    assert cli(["--powercap-root", str(powercap), "span-run"]) == 2


def test_sweep_fixture(powercap, tmp_path, capsys):
    cfg = tmp_path / "sweep.ini"
    cfg.write_text(f"[sweep]\ncommand = {sys.executable} -c \"print('events: 5')\"\nthreads = 1, 2\n"
                   "cooldown = 0\n\n[machine]\ncores = 1\nlabel = box\n")
    out = tmp_path / "sweep.json"
    assert cli(["--powercap-root", str(powercap), "sweep", "--config", str(cfg), "--format", "json", "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [r["events"] for r in doc["machines"][0]["runs"]] == [5, 5]
    assert [r["overcommit"] for r in doc["rows"]] == [False, True]
    assert cli(["report", "--compare", str(out), str(out), "--format", "json"]) == 0
    cmp = json.loads(capsys.readouterr().out)
    assert all(v == 1.0 for row in cmp["rows"] for v in row["ratios"].values())


def test_meter_ingest(tmp_path, capsys):
    path = tmp_path / "log.csv"
    with open(path, "w", newline="") as fp:
        export_csv(random_walk_series(9, 100), fp)
    assert cli(["meter", "ingest", str(path), "--t0", "10s", "--t1", "20s", "--baseline", "50s:60s"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["kind"] == "meter" and doc["points"] == 100
    assert doc["interval_us"] == [10_000_000, 20_000_000]
    assert "net_energy_j" in doc
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert cli(["meter", "ingest", str(bad)]) == 1
