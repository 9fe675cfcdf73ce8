from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REF_POWER, REF_SHARES, function_per_us, power_per_us, reference_trace
from nrgprof.domains import PKG, PP0, PP1, EnergyDomain
from nrgprof.errors import InvalidShares, OutOfRange, TraceFormatError
from nrgprof.trace import (
    FunctionRegistry,
    TraceSegment,
    ExecutionTrace,
    TraceSpec,
    constant_trace,
    dumps_trace,
    function_at,
    function_energy_pj,
    generate_trace,
    loads_trace,
    oracle_shares,
    trace_energy_between,
    trace_energy_exact,
)


def test_registry_reserves_zero():
    reg = FunctionRegistry(["main", "work"])
    assert reg[0].name == "unattributed"
    assert reg["work"].id == 2
    assert reg.intern("main").id == 1
    assert [f.name for f in reg] == ["unattributed", "main", "work"]
    with pytest.raises(ValueError):
        reg.intern("")


def test_generate_single_function():
    tr = generate_trace(TraceSpec({"only": 1.0}, 500_000, {PKG: 3_000_000}), seed=1)
    assert {s.function.name for s in tr.segments} == {"only"}
    assert oracle_shares(tr) == {"only": 1.0}


def test_generate_is_deterministic():
    spec = TraceSpec({"A": 0.6, "B": 0.4}, 1_000_000, {PKG: 5_000_000})
    assert generate_trace(spec, 3) == generate_trace(spec, 3)
    assert generate_trace(spec, 3) != generate_trace(spec, 4)


def test_generate_shares_exact(ref_trace):
    for domain in (PKG, PP0):
        shares = oracle_shares(ref_trace, domain)
        for name, target in REF_SHARES.items():
            assert shares[name] == pytest.approx(target, abs=1e-6)


def test_generated_trace_is_contiguous(ref_trace):
    assert ref_trace.segments[0].start_us == 0
    assert ref_trace.end_us == 1_000_000
    for a, b in zip(ref_trace.segments, ref_trace.segments[1:]):
        assert a.end_us == b.start_us


@pytest.mark.parametrize("shares", [{"A": 0.5, "B": 0.4}, {"A": 1.2, "B": -0.2}, {}])
def test_invalid_shares(shares):
    with pytest.raises(InvalidShares):
        generate_trace(TraceSpec(shares, 1000, {PKG: 1}), 0)


def test_energy_zero_length(ref_trace):
    assert trace_energy_between(ref_trace, 123_456, 123_456, PKG) == 0


def test_energy_constant():
    tr = constant_trace({PKG: 3_000_000}, 2_000_000)
    assert trace_energy_between(tr, 0, 2_000_000, PKG) == 6_000_000


def test_energy_matches_brute_force_riemann(ref_trace):
    t0, t1 = 250_000, 750_000
    for domain in (PKG, PP0):
        # 1 µs resolution Riemann sum in pJ, converted to µJ
        brute = int(power_per_us(ref_trace, domain)[t0:t1].sum()) / 1e6
        assert abs(trace_energy_between(ref_trace, t0, t1, domain) - brute) <= 1


def test_energy_out_of_range(ref_trace):
    with pytest.raises(OutOfRange):
        trace_energy_between(ref_trace, 0, ref_trace.end_us + 1, PKG)
    with pytest.raises(OutOfRange):
        trace_energy_between(ref_trace, 10, 5, PKG)


def test_function_at_first_and_boundaries(ref_trace):
    assert function_at(ref_trace, 0) == ref_trace.segments[0].function
    for seg in ref_trace.segments:
        assert function_at(ref_trace, seg.start_us) == seg.function
        assert function_at(ref_trace, seg.end_us - 1) == seg.function


def test_function_at_matches_linear_scan(ref_trace):
    per_us = function_per_us(ref_trace)
    for t in (0, 1, 499_999, 500_000, 500_001, 999_999):
        assert function_at(ref_trace, t).name == per_us[t]


def test_function_at_out_of_range(ref_trace):
    with pytest.raises(OutOfRange):
        function_at(ref_trace, ref_trace.end_us)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_energy_additive(ref_trace, data):
    a, b, c = sorted(data.draw(st.lists(st.integers(0, ref_trace.end_us), min_size=3, max_size=3)))
    for d in (PKG, PP0, PP1):
        assert trace_energy_between(ref_trace, a, b, d) + trace_energy_between(ref_trace, b, c, d) \
            == trace_energy_between(ref_trace, a, c, d)


def test_total_is_sum_of_functions(ref_trace):
    for d in REF_POWER:
        per_fn = function_energy_pj(ref_trace, d)
        assert sum(per_fn.values()) == ref_trace.total_energy_pj(d)
        assert trace_energy_exact(ref_trace, 0, ref_trace.end_us, d) * 10**6 == ref_trace.total_energy_pj(d)


def test_uniform_power_spread_zero():
    tr = reference_trace(power_spread=0.0)
    powers = {seg.power(PKG) for seg in tr.segments}
    # power only absorbs the integer-µs rounding of each function's time budget
    assert max(powers) / min(powers) - 1 < 1e-4


def test_file_round_trip(ref_trace):
    text = dumps_trace(ref_trace)
    assert text.startswith("trace v1\n")
    back = loads_trace(text)
    assert back == ref_trace
    assert dumps_trace(back) == text


def test_file_format_details():
    text = "trace v1\nfn 1 my func\nfn 2 other\nseg 0 10 1 pkg=5,pp1=0\nseg 10 25 2 pkg:1=7,dram=3\n"
    tr = loads_trace(text)
    assert tr.segments[0].function.name == "my func"
    assert tr.segments[1].power(EnergyDomain.parse("pkg:1")) == 7
    assert trace_energy_between(tr, 0, 25, PKG) == 0  # 50 pJ floors to 0 µJ


@pytest.mark.parametrize("text", [
    "",
    "trace v2\n",
    "trace v1\nseg 0 10 1 pkg=5\n",          # unknown function id
    "trace v1\nfn 1 a\nseg 0 10 1 gpu=5\n",  # unknown domain
    "trace v1\nfn 1 a\nseg 5 10 1 pkg=5\n",  # does not start at 0
    "trace v1\nfn 1 a\nbogus\n",
])
def test_file_format_errors(text):
    with pytest.raises(TraceFormatError):
        loads_trace(text)


def test_segment_validation():
    reg = FunctionRegistry(["f"])
    with pytest.raises(ValueError):
        TraceSegment(10, 10, reg["f"], {PKG: 1})
    with pytest.raises(ValueError):
        TraceSegment(0, 10, reg["f"], {PKG: -1})
    with pytest.raises(ValueError):
        ExecutionTrace([TraceSegment(0, 5, reg["f"]), TraceSegment(6, 9, reg["f"])])


def test_slice_preserves_energy(ref_trace):
    part = ref_trace.slice(200_000, 700_000)
    assert part.end_us == 500_000
    assert part.total_energy_pj(PKG) == ref_trace.energy_pj_at(700_000, PKG) - ref_trace.energy_pj_at(200_000, PKG)
