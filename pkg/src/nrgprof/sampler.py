"""Statistical energy sampling.

Counters are read every ``period_us``.  The energy measured since the
previous tick is added to a per-domain residual; each time the residual
reaches the domain's threshold, one hit is credited to the function that is
executing at the tick.  The sub-threshold remainder carries over to the
next tick, so per domain::

    sum(hits) * threshold + residual == measured energy

holds exactly.  Every tick also credits one perf tick (the time profile).
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from nrgprof.counters import CounterRange, CounterReading, EnergySource, SyntheticSource, delta_energy
from nrgprof.domains import PKG, EnergyDomain, sorted_domains
from nrgprof.errors import ConfigMismatch, EmptyProfile, UnknownDomain
from nrgprof.trace import ExecutionTrace, FunctionId, function_at

logger = logging.getLogger(__name__)

DEFAULT_PERIOD_US = 10_000
CALIBRATION_FACTOR = 5

#: maps a sampling instant (µs, source clock) to the executing function
Context = Callable[[int], "str | FunctionId"]


@dataclass(frozen=True)
class SamplerConfig:
    threshold_uj: Mapping[EnergyDomain, int]
    period_us: int = DEFAULT_PERIOD_US
    domains: tuple[EnergyDomain, ...] | None = None

    def __post_init__(self) -> None:
        if self.period_us <= 0:
            raise ValueError(f"period must be > 0 µs, got {self.period_us}")
        if any(t <= 0 for t in self.threshold_uj.values()):
            raise ValueError("every threshold must be > 0 µJ")
        missing = set(self.domains or ()) - set(self.threshold_uj)
        if missing:
            raise ValueError(f"no threshold for {', '.join(map(str, sorted_domains(missing)))}")

    @property
    def tracked(self) -> list[EnergyDomain]:
        return sorted_domains(self.domains if self.domains is not None else self.threshold_uj)

    def compatible(self, other: SamplerConfig) -> bool:
        return (self.period_us == other.period_us
                and dict(self.threshold_uj) == dict(other.threshold_uj)
                and self.tracked == other.tracked)


@dataclass
class Accumulator:
    ranges: dict[EnergyDomain, CounterRange]
    residual_uj: dict[EnergyDomain, int] = field(default_factory=dict)
    last: dict[EnergyDomain, CounterReading] = field(default_factory=dict)


@dataclass
class Profile:
    config: SamplerConfig
    hits: dict[str, dict[EnergyDomain, int]] = field(default_factory=dict)
    perf_ticks: dict[str, int] = field(default_factory=dict)
    total_ticks: int = 0
    wall_time_us: int = 0
    #: sub-threshold energy left over at the end of the run
    residual_uj: dict[EnergyDomain, int] = field(default_factory=dict)
    #: total wrap-corrected energy measured over the run
    measured_uj: dict[EnergyDomain, int] = field(default_factory=dict)
    #: sampler self time (live runs only)
    overhead_us: int = 0

    def __post_init__(self) -> None:
        for d in self.config.tracked:
            self.residual_uj.setdefault(d, 0)
            self.measured_uj.setdefault(d, 0)

    @property
    def functions(self) -> list[str]:
        return list(self.perf_ticks)

    def total_hits(self, domain: EnergyDomain) -> int:
        return sum(h.get(domain, 0) for h in self.hits.values())

    def _touch(self, name: str) -> dict[EnergyDomain, int]:
        row = self.hits.get(name)
        if row is None:
            row = self.hits[name] = {d: 0 for d in self.config.tracked}
            self.perf_ticks.setdefault(name, 0)
        return row


def _name(current: str | FunctionId) -> str:
    return current.name if isinstance(current, FunctionId) else current


def tick(acc: Accumulator, readings: Mapping[EnergyDomain, CounterReading] | Iterable[CounterReading],
         current: str | FunctionId, profile: Profile, config: SamplerConfig) -> dict[EnergyDomain, int]:
    """Feed one sampling instant's readings; return the hits it emitted per domain.

    The first tick of a run only records the baseline.
    """
    if not isinstance(readings, Mapping):
        readings = {r.domain: r for r in readings}
    name = _name(current)
    baseline = not acc.last
    emitted: dict[EnergyDomain, int] = {}
    deltas = {}
    for d in config.tracked:
        try:
            reading = readings[d]
        except KeyError:
            raise UnknownDomain(d) from None
        if not baseline:
            # validates every domain before any state changes
            deltas[d] = delta_energy(acc.last[d], reading, acc.ranges[d])
    for d in config.tracked:
        acc.last[d] = readings[d]
    if baseline:
        for d in config.tracked:
            acc.residual_uj.setdefault(d, 0)
        return emitted

    row = profile._touch(name)
    for d, delta in deltas.items():
        threshold = config.threshold_uj[d]
        residual = acc.residual_uj.get(d, 0) + delta
        n, residual = divmod(residual, threshold)
        acc.residual_uj[d] = residual
        profile.residual_uj[d] = residual
        profile.measured_uj[d] += delta
        row[d] += n
        emitted[d] = n
    profile.perf_ticks[name] += 1
    profile.total_ticks += 1
    return emitted


def trace_context(trace: ExecutionTrace) -> Context:
    """Replay context: the function executing at ``t`` in ``trace``.

    A tick exactly at the end of the trace is credited to the last segment.
    """
    last = trace.end_us - 1

    def context(t_us: int) -> str:
        return function_at(trace, min(t_us, last)).name

    return context


def _read_tracked(source: EnergySource, config: SamplerConfig) -> dict[EnergyDomain, CounterReading]:
    return {d: source.read(d) for d in config.tracked}


def _new_run(source: EnergySource, config: SamplerConfig) -> tuple[Accumulator, Profile]:
    ranges = source.ranges()
    missing = [d for d in config.tracked if d not in ranges]
    if missing:
        raise UnknownDomain(", ".join(map(str, missing)))
    return Accumulator({d: ranges[d] for d in config.tracked}), Profile(config)


def run_sampling(source: EnergySource, context: Context, config: SamplerConfig, duration_us: int,
                 stop: threading.Event | None = None) -> Profile:
    """Sample ``source`` for ``duration_us``.

    Virtual sources are stepped tick by tick.  Live sources are read on
    absolute deadlines ``start + n * period`` so the period does not drift;
    ``stop`` ends a live run early.
    """
    if source.virtual:
        return _run_virtual(source, context, config, duration_us)
    return _run_live(source, context, config, duration_us, stop)


def _run_virtual(source, context, config, duration_us):
    acc, profile = _new_run(source, config)
    t0 = source.now_us()
    n_ticks = duration_us // config.period_us
    for n in range(n_ticks + 1):
        t = t0 + n * config.period_us
        source.advance_to(t)
        tick(acc, _read_tracked(source, config), context(t), profile, config)
    profile.wall_time_us = n_ticks * config.period_us
    return profile


def _run_live(source, context, config, duration_us, stop):
    acc, profile = _new_run(source, config)
    period_s = config.period_us / 1e6
    start = time.monotonic()
    end = start + duration_us / 1e6
    self_time = 0.0
    n = 0
    while True:
        deadline = start + n * period_s
        if deadline > end or (stop is not None and stop.is_set()):
            break
        delay = deadline - time.monotonic()
        if delay > 0:
            if stop is not None:
                if stop.wait(delay):
                    break
            else:
                time.sleep(delay)
        t_work = time.perf_counter()
        tick(acc, _read_tracked(source, config), context(source.now_us()), profile, config)
        self_time += time.perf_counter() - t_work
        n += 1
    profile.wall_time_us = round((time.monotonic() - start) * 1e6)
    profile.overhead_us = round(self_time * 1e6)
    return profile


class LiveSampler:
    """Runs :func:`run_sampling` on a background thread alongside a workload."""

    def __init__(self, source: EnergySource, context: Context, config: SamplerConfig,
                 max_duration_us: int = 24 * 3600 * 1_000_000) -> None:
        self._args = (source, context, config, max_duration_us)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._result: Profile | None = None
        self._error: BaseException | None = None

    def _run(self) -> None:
        try:
            self._result = run_sampling(*self._args, stop=self._stop)
        except BaseException as exc:  # handed back to the caller in stop()
            self._error = exc

    def start(self) -> LiveSampler:
        self._thread = threading.Thread(target=self._run, name="nrgprof-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> Profile:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._error is not None:
            raise self._error
        assert self._result is not None
        return self._result

    def __enter__(self) -> LiveSampler:
        return self.start()

    def __exit__(self, *exc) -> None:
        if self._thread is not None and not self._stop.is_set():
            self.profile = self.stop()


def estimate_shares(profile: Profile, domain: EnergyDomain = PKG) -> dict[str, float]:
    total = profile.total_hits(domain)
    if total == 0:
        raise EmptyProfile(f"no hits on {domain}")
    return {name: row.get(domain, 0) / total for name, row in profile.hits.items()}


def merge_profiles(a: Profile, b: Profile) -> Profile:
    """Sum hits, ticks, residuals and measured energy of two runs with the same config."""
    if not a.config.compatible(b.config):
        raise ConfigMismatch("profiles were sampled with different periods, thresholds or domains")
    out = Profile(a.config)
    for src in (a, b):
        for name, row in src.hits.items():
            dst = out._touch(name)
            for d, n in row.items():
                dst[d] = dst.get(d, 0) + n
        for name, n in src.perf_ticks.items():
            out.perf_ticks[name] = out.perf_ticks.get(name, 0) + n
        for d in a.config.tracked:
            out.residual_uj[d] += src.residual_uj.get(d, 0)
            out.measured_uj[d] += src.measured_uj.get(d, 0)
        out.total_ticks += src.total_ticks
        out.wall_time_us += src.wall_time_us
        out.overhead_us += src.overhead_us
    return out


def calibrate_threshold(source: EnergySource, period_us: int = DEFAULT_PERIOD_US,
                        probe_us: int = 1_000_000, domains: Iterable[EnergyDomain] | None = None,
                        factor: int = CALIBRATION_FACTOR) -> dict[EnergyDomain, int]:
    """Threshold per domain = idle power x period x ``factor``.

    Measures idle power over ``probe_us`` (advancing the clock of virtual
    sources, sleeping on live ones), so an idle machine produces sparse hits.
    """
    ranges = source.ranges()
    doms = list(ranges) if domains is None else list(domains)
    before = {d: source.read(d) for d in doms}
    t0 = source.now_us()
    if source.virtual:
        source.advance_to(t0 + probe_us)
    else:
        time.sleep(probe_us / 1e6)
    elapsed = max(1, source.now_us() - t0)
    out = {}
    for d in doms:
        energy = delta_energy(before[d], source.read(d), ranges[d])
        out[d] = max(1, energy * period_us * factor // elapsed)
    return out


def replay(trace: ExecutionTrace, config: SamplerConfig, duration_us: int | None = None) -> Profile:
    """Sample a trace on a fresh synthetic source from t = 0."""
    source = SyntheticSource(trace)
    return run_sampling(source, trace_context(trace), config,
                        trace.end_us if duration_us is None else duration_us)
