"""Thread-sweep benchmark harness and throughput/energy efficiency metrics.

Each run of the workload is wrapped in a top-level span, so on-chip
energy per run is exactly the span's energy.  Event counts come from the
workload itself: it must print a line ``events: <n>`` on stdout.
"""

from __future__ import annotations

import configparser
import logging
import os
import re
import shlex
import shutil
import statistics
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from nrgprof.counters import EnergySource, SyntheticSource
from nrgprof.domains import NODE, EnergyDomain, sorted_domains
from nrgprof.errors import CoverageError, NrgProfError, SpawnFailure
from nrgprof.meters import PduEndpoint, PowerSeries, integrate, poll_pdu
from nrgprof.spans import SpanProfiler, SpanReport
from nrgprof.trace import ExecutionTrace, concat_traces

logger = logging.getLogger(__name__)

EVENTS_RE = re.compile(r"^events:\s*(\d+)\s*$", re.MULTILINE)
DEFAULT_COOLDOWN_S = 10.0


@dataclass
class WorkloadSpec:
    """``command`` arguments may contain ``{threads}`` and ``{events}`` placeholders."""

    command: list[str]
    thread_counts: list[int]
    events_per_run: int = 1
    repetitions: int = 1
    machine_meta: dict[str, str] = field(default_factory=dict)
    cooldown_s: float = DEFAULT_COOLDOWN_S

    def __post_init__(self) -> None:
        if not self.command:
            raise ValueError("empty workload command")
        if not self.thread_counts or any(t <= 0 for t in self.thread_counts):
            raise ValueError("thread_counts must be a non-empty list of positive integers")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.events_per_run <= 0:
            raise ValueError("events_per_run must be positive")

    @property
    def cores(self) -> int:
        if "cores" in self.machine_meta:
            return int(self.machine_meta["cores"])
        return os.cpu_count() or 1

    @property
    def label(self) -> str:
        return str(self.machine_meta.get("label") or self.machine_meta.get("arch") or "machine")

    def argv(self, threads: int) -> list[str]:
        return [a.format(threads=threads, events=self.events_per_run) for a in self.command]


def load_sweep_config(path: str | os.PathLike) -> WorkloadSpec:
    """Read a sweep file::

        [sweep]
        command = ./bench --threads {threads}
        threads = 1, 2, 4, 8
        events = 1000
        repetitions = 3
        cooldown = 10

        [machine]
        cores = 4
        arch = x86_64
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    sec = cp["sweep"]
    return WorkloadSpec(
        command=shlex.split(sec["command"]),
        thread_counts=[int(x) for x in re.split(r"[,\s]+", sec["threads"].strip()) if x],
        events_per_run=sec.getint("events", 1),
        repetitions=sec.getint("repetitions", 1),
        machine_meta=dict(cp["machine"]) if cp.has_section("machine") else {},
        cooldown_s=sec.getfloat("cooldown", DEFAULT_COOLDOWN_S),
    )


@dataclass
class RunResult:
    threads: int
    wall_time_us: int
    events: int
    energy_uj: dict[EnergyDomain, int]
    external_j: float | None = None
    exit_status: int = 0
    repetition: int = 0
    events_declared: bool = True
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.exit_status == 0 and self.error is None and self.wall_time_us > 0


@dataclass
class EfficiencyMetrics:
    events_per_second: float
    events_per_second_per_core: float
    joules_per_event: dict[EnergyDomain, float] = field(default_factory=dict)
    events_per_joule: dict[EnergyDomain, float] = field(default_factory=dict)
    zero_events: bool = False


@dataclass
class Outcome:
    exit_status: int
    stdout: str = ""


class Executor(Protocol):
    def __call__(self, argv: list[str], threads: int) -> Outcome: ...


def subprocess_executor(argv: list[str], threads: int) -> Outcome:
    proc = subprocess.run(argv, stdout=subprocess.PIPE, text=True,
                          env={**os.environ, "OMP_NUM_THREADS": str(threads)})
    return Outcome(proc.returncode, proc.stdout)


class SyntheticWorkload:
    """Executor that plays one trace per run on a synthetic source.

    ``runs`` maps a thread count to the trace and event count of that run;
    the source timeline is the concatenation of the traces in sweep order.
    """

    def __init__(self, spec: WorkloadSpec, runs: Mapping[int, tuple[ExecutionTrace, int]]) -> None:
        self.order = [t for t in spec.thread_counts for _ in range(spec.repetitions)]
        self.runs = dict(runs)
        self.source = SyntheticSource(concat_traces(self.runs[t][0] for t in self.order))
        self._next = 0

    def __call__(self, argv: list[str], threads: int) -> Outcome:
        expected = self.order[self._next]
        if threads != expected:
            raise RuntimeError(f"synthetic workload expected a {expected}-thread run, got {threads}")
        self._next += 1
        trace, events = self.runs[threads]
        self.source.advance(trace.end_us)
        return Outcome(0, f"events: {events}\n")


class ExternalMeter(Protocol):
    def start(self) -> None: ...
    def stop(self) -> PowerSeries: ...


class SeriesMeter:
    """A pre-recorded (or synthetic) series, already on the harness timebase."""

    def __init__(self, series: PowerSeries) -> None:
        self.series = series

    def start(self) -> None:
        pass

    def stop(self) -> PowerSeries:
        return self.series


class PduMeter:
    """Polls a PDU on a background thread for the duration of the sweep.

    PDU timestamps are unix seconds; they are moved onto the monotonic
    timebase with a constant offset taken when polling starts.
    """

    def __init__(self, endpoint: PduEndpoint, max_duration_s: float = 24 * 3600) -> None:
        self.endpoint = endpoint
        self.max_duration_s = max_duration_s
        self._stop = threading.Event()
        self._series: PowerSeries | None = None
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self.endpoint.offset_us = time.monotonic_ns() // 1000 - time.time_ns() // 1000

        def run() -> None:
            try:
                self._series = poll_pdu(self.endpoint, self.max_duration_s, stop=self._stop)
            except NrgProfError as exc:
                logger.warning("PDU polling failed: %s", exc)

        self._thread = threading.Thread(target=run, name="nrgprof-pdu", daemon=True)
        self._thread.start()

    def stop(self) -> PowerSeries:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self._series or PowerSeries()


def parse_events(stdout: str) -> int | None:
    found = EVENTS_RE.findall(stdout)
    return int(found[-1]) if found else None


def run_sweep(spec: WorkloadSpec, source: EnergySource, meter: ExternalMeter | None = None,
              executor: Executor | None = None, sleep: Callable[[float], None] = time.sleep,
              profiler: SpanProfiler | None = None) -> list[RunResult]:
    """One run per (thread count, repetition), each inside its own top-level span."""
    if executor is None:
        if shutil.which(spec.command[0]) is None:
            raise SpawnFailure(f"workload command {spec.command[0]!r} is not executable")
        executor = subprocess_executor
    profiler = profiler or SpanProfiler(source)
    if meter is not None:
        meter.start()
    results: list[RunResult] = []
    spans: list[SpanReport] = []
    first = True
    for threads in spec.thread_counts:
        for rep in range(spec.repetitions):
            if not first and spec.cooldown_s > 0 and not source.virtual:
                sleep(spec.cooldown_s)
            first = False
            argv = spec.argv(threads)
            span = profiler.begin_span(f"run threads={threads} rep={rep}")
            error = None
            try:
                outcome = executor(argv, threads)
            except OSError as exc:
                outcome = Outcome(-1)
                error = f"spawn failed: {exc}"
            report = profiler.end_span(span)
            events = parse_events(outcome.stdout)
            if events is None:
                logger.warning("run threads=%d rep=%d printed no 'events:' line", threads, rep)
            if outcome.exit_status != 0 and error is None:
                error = f"exit status {outcome.exit_status}"
            results.append(RunResult(
                threads=threads, wall_time_us=report.duration_us, events=events or 0,
                energy_uj=dict(report.energy_uj), exit_status=outcome.exit_status, repetition=rep,
                events_declared=events is not None, error=error,
            ))
            spans.append(report)
    if meter is not None:
        series = meter.stop()
        for result, report in zip(results, spans):
            try:
                result.external_j = integrate(series, report.start_us, report.end_us, allow_gaps=True)
            except CoverageError as exc:
                logger.warning("no external energy for threads=%d rep=%d: %s",
                               result.threads, result.repetition, exc)
    return results


def compute_metrics(result: RunResult, cores: int) -> EfficiencyMetrics:
    """Throughput and energy efficiency of one run.

    External energy, when present, is reported under the ``node`` domain.
    Per-event energy is omitted (and ``zero_events`` set) when no events ran.
    """
    if result.wall_time_us <= 0:
        raise ValueError("run has no wall time")
    if cores <= 0:
        raise ValueError("cores must be positive")
    seconds = result.wall_time_us / 1e6
    eps = result.events / seconds
    energy_j = {d: e / 1e6 for d, e in result.energy_uj.items()}
    if result.external_j is not None:
        energy_j[NODE] = result.external_j
    m = EfficiencyMetrics(eps, eps / cores, zero_events=result.events == 0)
    for d in sorted_domains(energy_j):
        j = energy_j[d]
        if result.events > 0:
            m.joules_per_event[d] = j / result.events
        if j > 0:
            m.events_per_joule[d] = result.events / j
    return m


def metric_values(m: EfficiencyMetrics) -> dict[str, float]:
    """Flat ``name -> value`` view used for medians, ratios and tables."""
    out = {"events_per_second": m.events_per_second, "events_per_second_per_core": m.events_per_second_per_core}
    for d, v in m.joules_per_event.items():
        out[f"joules_per_event[{d.label}]"] = v
    for d, v in m.events_per_joule.items():
        out[f"events_per_joule[{d.label}]"] = v
    return out


def median_metrics(results: Iterable[RunResult], cores: int) -> dict[str, float]:
    rows = [metric_values(compute_metrics(r, cores)) for r in results if r.ok]
    keys = sorted({k for row in rows for k in row})
    return {k: statistics.median(row[k] for row in rows if k in row) for k in keys}


@dataclass
class Sweep:
    label: str
    cores: int
    results: list[RunResult]

    @classmethod
    def from_spec(cls, spec: WorkloadSpec, results: list[RunResult]) -> Sweep:
        return cls(spec.label, spec.cores, results)


@dataclass
class ComparisonRow:
    threads: int
    a: dict[str, float] | None
    b: dict[str, float] | None
    ratios: dict[str, float]
    overcommit_a: bool
    overcommit_b: bool


@dataclass
class Comparison:
    a_label: str
    b_label: str
    rows: list[ComparisonRow]


def compare_runs(a: Sweep, b: Sweep) -> Comparison:
    """Side-by-side median metrics per thread count with ``b / a`` ratios."""
    if not a.results or not b.results:
        raise ValueError("both sweeps need at least one run")
    rows = []
    for threads in sorted({r.threads for r in a.results} | {r.threads for r in b.results}):
        ma = median_metrics([r for r in a.results if r.threads == threads], a.cores) or None
        mb = median_metrics([r for r in b.results if r.threads == threads], b.cores) or None
        ratios = {}
        if ma and mb:
            for k in sorted(set(ma) & set(mb)):
                if ma[k] != 0:
                    ratios[k] = mb[k] / ma[k]
        rows.append(ComparisonRow(threads, ma, mb, ratios, threads > a.cores, threads > b.cores))
    return Comparison(a.label, b.label, rows)


def domains_of(results: Sequence[RunResult]) -> list[EnergyDomain]:
    doms = {d for r in results for d in r.energy_uj}
    if any(r.external_j is not None for r in results):
        doms.add(NODE)
    return sorted_domains(doms)
