from __future__ import annotations

import numpy as np
import pytest

from nrgprof.domains import DRAM, PKG, PP0, PP1
from nrgprof.trace import ExecutionTrace, TraceSpec, generate_trace

REF_SHARES = {"A": 0.6, "B": 0.25, "C": 0.1, "D": 0.05}
REF_POWER = {PKG: 10_000_000, PP0: 6_000_000, PP1: 0, DRAM: 1_500_000}


def reference_trace(duration_us: int = 1_000_000, seed: int = 42, **kw) -> ExecutionTrace:
    return generate_trace(TraceSpec(REF_SHARES, duration_us, REF_POWER, **kw), seed)


@pytest.fixture(scope="session")
def ref_trace() -> ExecutionTrace:
    """Seed-42 four-function trace, 1 s long."""
    return reference_trace()


def power_per_us(trace: ExecutionTrace, domain) -> np.ndarray:
    """Brute-force oracle helper: the trace's power sampled at every microsecond."""
    out = np.zeros(trace.end_us, dtype=np.int64)
    for seg in trace.segments:
        out[seg.start_us:seg.end_us] = seg.power(domain)
    return out


def function_per_us(trace: ExecutionTrace) -> list[str]:
    names = []
    for seg in trace.segments:
        names.extend([seg.function.name] * seg.duration_us)
    return names


# acceptance summary: one line per criterion, printed after the run
_CRITERIA: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion():
    """``record(label, ok, detail)``; ``ok=None`` marks an environment-gated skip."""
    def record(label: str, ok: bool | None, detail: str = "") -> bool | None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        _CRITERIA.append((label, status, detail))
        print(f"{status}  {label}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {label}  {detail}")
