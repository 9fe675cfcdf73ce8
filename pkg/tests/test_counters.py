from __future__ import annotations

import io
import os
import random
import stat

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import power_per_us, reference_trace
from nrgprof.counters import (
    CapConstraint,
    CounterRange,
    CounterReading,
    PowercapSource,
    ReplaySource,
    SyntheticSource,
    delta_energy,
    enforce_cap_sim,
    enumerate_domains,
    read_counter,
    set_power_cap,
    write_reading_log,
)
from nrgprof.domains import DRAM, PKG, PP0, PP1, DomainKind, EnergyDomain
from nrgprof.errors import (
    CapUnsupported,
    DomainMismatch,
    PermissionDenied,
    SourceUnavailable,
    TimestampRegression,
    UnknownDomain,
)
from nrgprof.trace import ExecutionTrace, bursty_trace, constant_trace, trace_energy_between


def r(energy, ts=0, domain=PKG):
    return CounterReading(domain, ts, energy)


# --- delta_energy ----------------------------------------------------------

def test_delta_identity():
    assert delta_energy(r(500), r(500), CounterRange(1000)) == 0


def test_delta_no_wrap():
    assert delta_energy(r(100, 0), r(700, 5), CounterRange(1000)) == 600


def test_delta_wrap():
    assert delta_energy(r(900, 0), r(50, 5), CounterRange(999)) == 150


def test_delta_errors():
    with pytest.raises(DomainMismatch):
        delta_energy(r(0, domain=PKG), r(1, domain=DRAM), 1000)
    with pytest.raises(TimestampRegression):
        delta_energy(r(0, 10), r(1, 5), 1000)


def test_counter_range_and_cap_validation():
    with pytest.raises(ValueError):
        CounterRange(0)
    with pytest.raises(ValueError):
        CapConstraint(PKG, 0, 1_000_000)
    with pytest.raises(ValueError):
        CapConstraint(PKG, 1, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10**6), st.lists(st.integers(0, 10**6), min_size=1, max_size=50), st.integers(0, 10**6))
def test_wrap_round_trip(max_range, increments, start):
    """Reconstructing a wrapped cumulative sequence gives back the true total."""
    start %= max_range + 1
    increments = [i % (max_range + 1) for i in increments]  # at most one wrap between reads
    true = start
    prev = r(start, 0)
    total = 0
    for k, inc in enumerate(increments, 1):
        true += inc
        nxt = r(true % (max_range + 1), k)
        total += delta_energy(prev, nxt, max_range)
        prev = nxt
    assert total == true - start


# --- synthetic source ------------------------------------------------------

def test_synthetic_zero_at_start(ref_trace):
    src = SyntheticSource(ref_trace)
    assert read_counter(src, PKG).energy_uj == 0


def test_synthetic_constant_power():
    src = SyntheticSource(constant_trace({PKG: 2_000_000}, 5_000_000))
    src.advance_to(1_000_000)
    reading = read_counter(src, PKG)
    assert reading == CounterReading(PKG, 1_000_000, 2_000_000)


def test_synthetic_matches_trace_oracle(ref_trace):
    src = SyntheticSource(ref_trace)
    src.advance_to(500_000)
    assert read_counter(src, PKG).energy_uj == trace_energy_between(ref_trace, 0, 500_000, PKG)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1_000_000), st.integers(0, 100_000))
def test_synthetic_delta_equals_oracle(a, span):
    # windows short enough that the 3 J counter wraps at most once
    trace = reference_trace()
    t0, t1 = a, min(a + span, 1_000_000)
    src = SyntheticSource(trace, max_range_uj=3_000_000)
    src.advance_to(t0)
    r0 = src.read(PKG)
    src.advance_to(t1)
    r1 = src.read(PKG)
    assert delta_energy(r0, r1, 3_000_000) == trace_energy_between(trace, t0, t1, PKG)


def test_synthetic_errors(ref_trace):
    src = SyntheticSource(ref_trace, domains=[PKG, DRAM])
    assert [d for d, _ in enumerate_domains(src)] == [PKG, DRAM]
    with pytest.raises(UnknownDomain):
        src.read(PP0)
    src.advance_to(10)
    with pytest.raises(TimestampRegression):
        src.advance_to(5)


def test_synthetic_holds_after_trace_end(ref_trace):
    src = SyntheticSource(ref_trace)
    src.advance_to(ref_trace.end_us)
    end = src.read(PKG).energy_uj
    src.advance_to(ref_trace.end_us + 1_000_000)
    assert src.read(PKG).energy_uj == end


def test_enumerate_deterministic(ref_trace):
    src = SyntheticSource(ref_trace)
    assert enumerate_domains(src) == enumerate_domains(src)
    assert len({d for d, _ in enumerate_domains(src)}) == len(enumerate_domains(src))


# --- power capping ---------------------------------------------------------

def max_window_mean_uw(trace: ExecutionTrace, domain, window_us: int) -> float:
    """Brute force: every integer-µs window start, 1 µs resolution."""
    w = min(window_us, trace.end_us)
    cum = np.concatenate([[0], np.cumsum(power_per_us(trace, domain))])
    return float((cum[w:] - cum[:-w]).max()) / w


def test_cap_identity_below_limit(ref_trace):
    cap = CapConstraint(PKG, 50_000_000, 100_000)
    assert enforce_cap_sim(ref_trace, cap) is ref_trace


def test_cap_constant_over_limit():
    tr = constant_trace({PKG: 20_000_000}, 3_000_000)
    for window in (1_000, 100_000, 1_000_000, 10_000_000):
        out = enforce_cap_sim(tr, CapConstraint(PKG, 10_000_000, window))
        assert [s.power(PKG) for s in out.segments] == [10_000_000]


def test_cap_bursty_seed_11():
    tr = bursty_trace(11, 2_000_000)
    cap = CapConstraint(PKG, 5_000_000, 100_000)
    assert max_window_mean_uw(tr, PKG, cap.window_us) > cap.limit_uw  # the cap has work to do
    out = enforce_cap_sim(tr, cap)
    assert max_window_mean_uw(out, PKG, cap.window_us) <= cap.limit_uw * (1 + 1e-9)
    assert out.total_energy_pj(PKG) <= tr.total_energy_pj(PKG)
    assert all(a.power(PKG) <= b.power(PKG) for a, b in zip(out.segments, tr.segments))


def test_cap_compliant_bursty_is_identity():
    # bursts above the limit, but every window mean stays below it
    tr = bursty_trace(5, 1_000_000, idle_uw=1_000_000, burst_uw=8_000_000,
                      mean_idle_us=80_000, mean_burst_us=10_000)
    limit = int(max_window_mean_uw(tr, PKG, 100_000)) + 1
    assert max(s.power(PKG) for s in tr.segments) > limit
    assert enforce_cap_sim(tr, CapConstraint(PKG, limit, 100_000)) is tr


@pytest.mark.parametrize("seed", range(5))
def test_cap_idempotent_and_only_touches_domain(seed):
    tr = reference_trace(seed=seed, duration_us=500_000)
    cap = CapConstraint(PKG, 7_000_000, 50_000)
    once = enforce_cap_sim(tr, cap)
    assert enforce_cap_sim(once, cap) == once
    assert once.total_energy_pj(PKG) <= tr.total_energy_pj(PKG)
    assert once.total_energy_pj(PP0) == tr.total_energy_pj(PP0)
    assert max_window_mean_uw(once, PKG, 50_000) <= cap.limit_uw


def test_synthetic_set_cap_from_now_on():
    tr = constant_trace({PKG: 20_000_000}, 2_000_000)
    src = SyntheticSource(tr)
    src.advance_to(1_000_000)
    before = src.read(PKG).energy_uj
    assert set_power_cap(src, CapConstraint(PKG, 10_000_000, 1_000_000)).limit_uw == 10_000_000
    src.advance_to(2_000_000)
    assert before == 20_000_000
    assert src.read(PKG).energy_uj - before == 10_000_000


def test_synthetic_cap_at_start():
    src = SyntheticSource(constant_trace({PKG: 20_000_000}, 1_000_000))
    src.set_cap(CapConstraint(PKG, 10_000_000, 100_000))
    src.advance_to(1_000_000)
    assert src.read(PKG).energy_uj == 10_000_000


# --- powercap tree ---------------------------------------------------------

def make_zone(path, name, energy=0, max_range=262143328850, constraints=True):
    path.mkdir(parents=True)
    (path / "name").write_text(name + "\n")
    (path / "energy_uj").write_text(f"{energy}\n")
    (path / "max_energy_range_uj").write_text(f"{max_range}\n")
    if constraints:
        (path / "constraint_0_power_limit_uw").write_text("95000000\n")
        (path / "constraint_0_time_window_us").write_text("999424\n")


@pytest.fixture
def powercap(tmp_path):
    make_zone(tmp_path / "intel-rapl:0", "package-0", energy=1234)
    make_zone(tmp_path / "intel-rapl:0:0", "core", energy=77, constraints=False)
    return tmp_path


def test_powercap_enumerate(powercap):
    src = PowercapSource(powercap)
    doms = enumerate_domains(src)
    assert [d for d, _ in doms] == [PKG, PP0]
    assert doms[0][1] == CounterRange(262143328850)
    assert src.read(PKG).energy_uj == 1234
    assert src.read(PP0).energy_uj == 77


def test_powercap_nested_layout_and_sockets(tmp_path):
    make_zone(tmp_path / "intel-rapl:0", "package-0")
    make_zone(tmp_path / "intel-rapl:0" / "intel-rapl:0:0", "core")
    make_zone(tmp_path / "intel-rapl:0" / "intel-rapl:0:1", "uncore")
    make_zone(tmp_path / "intel-rapl:1", "package-1")
    make_zone(tmp_path / "intel-rapl:1" / "intel-rapl:1:0", "dram")
    make_zone(tmp_path / "intel-rapl:1" / "intel-rapl:1:1", "psys")  # not an on-chip domain we model
    doms = [d for d, _ in PowercapSource(tmp_path).domains()]
    assert doms == [PKG, EnergyDomain(DomainKind.PACKAGE, 1), PP0, PP1, EnergyDomain(DomainKind.DRAM, 1)]


def test_powercap_env_override(powercap, monkeypatch):
    monkeypatch.setenv("NRGPROF_POWERCAP_ROOT", str(powercap))
    assert PowercapSource().root == powercap


def test_powercap_empty_root(tmp_path):
    with pytest.raises(SourceUnavailable):
        enumerate_domains(PowercapSource(tmp_path))
    with pytest.raises(SourceUnavailable):
        PowercapSource(tmp_path / "missing").domains()


def test_powercap_timestamps_monotonic(powercap):
    src = PowercapSource(powercap)
    stamps = [src.read(PKG).timestamp_us for _ in range(20)]
    assert stamps == sorted(stamps)


def test_powercap_set_cap(powercap):
    src = PowercapSource(powercap)
    set_power_cap(src, CapConstraint(PKG, 10_000_000, 1_000_000))
    assert (powercap / "intel-rapl:0" / "constraint_0_power_limit_uw").read_text().strip() == "10000000"
    assert (powercap / "intel-rapl:0" / "constraint_0_time_window_us").read_text().strip() == "1000000"
    with pytest.raises(CapUnsupported):
        src.set_cap(CapConstraint(PP0, 1, 1))


def test_powercap_read_only(powercap):
    path = powercap / "intel-rapl:0" / "constraint_0_power_limit_uw"
    os.chmod(path, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    with pytest.raises(PermissionDenied):
        set_power_cap(PowercapSource(powercap), CapConstraint(PKG, 10_000_000, 1_000_000))
    assert path.read_text().strip() == "95000000"


# --- replay log ------------------------------------------------------------

def test_replay_source_round_trip(ref_trace):
    src = SyntheticSource(ref_trace, domains=[PKG, DRAM], max_range_uj=1_000_000)
    readings = []
    for t in range(0, 1_000_001, 50_000):
        src.advance_to(t)
        readings += [src.read(PKG), src.read(DRAM)]
    buf = io.StringIO()
    write_reading_log(readings, src.ranges(), buf)
    buf.seek(0)
    rep = ReplaySource(buf)
    assert rep.domains() == src.domains()
    rep.advance_to(520_000)
    assert rep.read(PKG) == readings[20]  # latest at or before 520 ms is the 500 ms row
    with pytest.raises(UnknownDomain):
        rep.read(PP0)


def test_replay_source_bad_header():
    with pytest.raises(SourceUnavailable):
        ReplaySource(io.StringIO("t,d,e\n"))


def test_many_wraps_reconstruct_total():
    rng = random.Random(0)
    trace = reference_trace(seed=7)
    total = trace.energy_uj_at(trace.end_us, PKG)
    max_range = total // 6
    src = SyntheticSource(trace, max_range_uj=max_range)
    prev = src.read(PKG)
    acc = 0
    t = 0
    while t < trace.end_us:
        t = min(trace.end_us, t + rng.randint(1, 40_000))
        src.advance_to(t)
        cur = src.read(PKG)
        acc += delta_energy(prev, cur, max_range)
        prev = cur
    assert acc == total
