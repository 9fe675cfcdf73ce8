"""Cumulative energy counters: readings, wrap correction, sources and capping.

All quantities are integers in µJ, µW and µs.  Three sources share one
interface:

* :class:`SyntheticSource` integrates an :class:`ExecutionTrace` on a virtual clock.
* :class:`PowercapSource` reads the Linux powercap tree (``intel-rapl:<s>[:<d>]``).
* :class:`ReplaySource` replays a recorded reading log (e.g. from an on-board
  monitor exposed through files) on a virtual clock.
"""

from __future__ import annotations

import bisect
import csv
import logging
import os
import re
import stat
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, TextIO

from nrgprof.domains import DomainKind, EnergyDomain, sorted_domains
from nrgprof.errors import (
    CapUnsupported,
    DomainMismatch,
    PermissionDenied,
    SourceUnavailable,
    TimestampRegression,
    UnknownDomain,
)
from nrgprof.trace import ExecutionTrace, TraceSegment

logger = logging.getLogger(__name__)

POWERCAP_ROOT_ENV = "NRGPROF_POWERCAP_ROOT"
DEFAULT_POWERCAP_ROOT = "/sys/class/powercap"
# typical max_energy_range_uj published by intel-rapl package zones
DEFAULT_MAX_RANGE_UJ = 262_143_328_850


@dataclass(frozen=True)
class CounterReading:
    domain: EnergyDomain
    timestamp_us: int
    energy_uj: int


@dataclass(frozen=True)
class CounterRange:
    max_range_uj: int

    def __post_init__(self) -> None:
        if self.max_range_uj <= 0:
            raise ValueError(f"max_range_uj must be > 0, got {self.max_range_uj}")


@dataclass(frozen=True)
class CapConstraint:
    domain: EnergyDomain
    limit_uw: int
    window_us: int

    def __post_init__(self) -> None:
        if self.limit_uw <= 0:
            raise ValueError(f"power limit must be > 0 µW, got {self.limit_uw}")
        if self.window_us <= 0:
            raise ValueError(f"time window must be > 0 µs, got {self.window_us}")


def delta_energy(prev: CounterReading, next: CounterReading, range: CounterRange | int) -> int:
    """Energy between two readings of one domain, correcting at most one wrap."""
    if prev.domain != next.domain:
        raise DomainMismatch(f"{prev.domain} vs {next.domain}")
    if next.timestamp_us < prev.timestamp_us:
        raise TimestampRegression(
            f"{next.domain}: reading at {next.timestamp_us} older than {prev.timestamp_us}")
    max_range = range.max_range_uj if isinstance(range, CounterRange) else range
    d = next.energy_uj - prev.energy_uj
    if d < 0:
        d += max_range + 1
    return d


class EnergySource:
    """Interface shared by all counter sources.

    ``virtual`` sources run on a simulated clock that the caller advances
    with :meth:`advance_to`; live sources use the monotonic wall clock.
    """

    virtual = False
    #: temporal precision of one reading
    precision_us = 1000

    def domains(self) -> list[tuple[EnergyDomain, CounterRange]]:
        raise NotImplementedError

    def read(self, domain: EnergyDomain) -> CounterReading:
        raise NotImplementedError

    def set_cap(self, cap: CapConstraint) -> None:
        raise CapUnsupported(f"{type(self).__name__} does not support power capping")

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def advance_to(self, t_us: int) -> None:
        raise TypeError(f"{type(self).__name__} runs on the wall clock")

    def ranges(self) -> dict[EnergyDomain, CounterRange]:
        return dict(self.domains())

    def read_all(self, domains: Iterable[EnergyDomain] | None = None) -> dict[EnergyDomain, CounterReading]:
        if domains is None:
            domains = [d for d, _ in self.domains()]
        return {d: self.read(d) for d in domains}


def read_counter(source: EnergySource, domain: EnergyDomain) -> CounterReading:
    return source.read(domain)


def enumerate_domains(source: EnergySource) -> list[tuple[EnergyDomain, CounterRange]]:
    return source.domains()


def set_power_cap(source: EnergySource, cap: CapConstraint) -> CapConstraint:
    """Apply ``cap`` to the source and return it as acknowledgement."""
    source.set_cap(cap)
    return cap


# --- synthetic -------------------------------------------------------------


class SyntheticSource(EnergySource):
    """Counters integrating a trace on a virtual clock.

    Past the end of the trace the workload is over and counters hold.
    """

    virtual = True
    precision_us = 1

    def __init__(self, trace: ExecutionTrace, domains: Iterable[EnergyDomain] | None = None,
                 max_range_uj: int | Mapping[EnergyDomain, int] = DEFAULT_MAX_RANGE_UJ):
        self.trace = trace
        doms = list(trace.domains if domains is None else domains)
        if len(set(doms)) != len(doms):
            raise ValueError("duplicate domains")
        if isinstance(max_range_uj, int):
            self._ranges = {d: CounterRange(max_range_uj) for d in doms}
        else:
            self._ranges = {d: CounterRange(max_range_uj[d]) for d in doms}
        self._domains = sorted_domains(doms)
        self._now = 0
        self.caps: list[CapConstraint] = []

    def domains(self) -> list[tuple[EnergyDomain, CounterRange]]:
        return [(d, self._ranges[d]) for d in self._domains]

    def now_us(self) -> int:
        return self._now

    def advance_to(self, t_us: int) -> None:
        if t_us < self._now:
            raise TimestampRegression(f"virtual clock cannot go back from {self._now} to {t_us}")
        self._now = t_us

    def advance(self, dt_us: int) -> None:
        self.advance_to(self._now + dt_us)

    def read(self, domain: EnergyDomain) -> CounterReading:
        rng = self._ranges.get(domain)
        if rng is None:
            raise UnknownDomain(domain)
        t = min(self._now, self.trace.end_us)
        energy = self.trace.energy_uj_at(t, domain) % (rng.max_range_uj + 1)
        return CounterReading(domain, self._now, energy)

    def set_cap(self, cap: CapConstraint) -> None:
        """Cap the draw from the current virtual time onward."""
        if cap.domain not in self._ranges:
            raise UnknownDomain(cap.domain)
        self.caps.append(cap)
        t = self._now
        if t >= self.trace.end_us:
            return
        if t == 0:
            self.trace = enforce_cap_sim(self.trace, cap)
            return
        head = self.trace.slice(0, t)
        tail = enforce_cap_sim(self.trace.slice(t, self.trace.end_us), cap)
        shifted = [TraceSegment(s.start_us + t, s.end_us + t, s.function, s.power_uw) for s in tail.segments]
        self.trace = ExecutionTrace(list(head.segments) + shifted, self.trace.registry)


# --- cap simulation --------------------------------------------------------


def _capped_cumulative(trace: ExecutionTrace, domain: EnergyDomain, ceiling: int) -> list[int]:
    cum = [0]
    for seg in trace.segments:
        cum.append(cum[-1] + min(seg.power(domain), ceiling) * seg.duration_us)
    return cum


def _max_window_pj(trace: ExecutionTrace, domain: EnergyDomain, ceiling: int, window_us: int) -> int:
    """Largest energy (pJ) any window of ``window_us`` sees under power ``min(p, ceiling)``.

    The window integral is piecewise linear in its start position, so the
    maximum sits where one of its edges touches a segment boundary.
    """
    starts = [s.start_us for s in trace.segments]
    cum = _capped_cumulative(trace, domain, ceiling)
    end = trace.end_us

    def at(t: int) -> int:
        if t >= end:
            return cum[-1]
        i = bisect.bisect_right(starts, t) - 1
        seg = trace.segments[i]
        return cum[i] + min(seg.power(domain), ceiling) * (t - seg.start_us)

    last = end - window_us
    best = 0
    for b in starts + [end]:
        for s in (b, b - window_us):
            if 0 <= s <= last:
                best = max(best, at(s + window_us) - at(s))
    return best


def enforce_cap_sim(trace: ExecutionTrace, cap: CapConstraint) -> ExecutionTrace:
    """Clip ``cap.domain`` power so every sliding window's mean stays within the limit.

    The clip is a single power ceiling: the largest integer µW level ``c`` for
    which ``min(p(t), c)`` keeps every window of ``cap.window_us`` (or the
    whole trace, if shorter) at or below ``cap.limit_uw`` on average.  A trace
    that already complies is returned unchanged, so the operation is
    idempotent, and clipping can only remove energy.
    """
    window = min(cap.window_us, trace.end_us)
    budget = cap.limit_uw * window
    peak = max(seg.power(cap.domain) for seg in trace.segments)
    if _max_window_pj(trace, cap.domain, peak, window) <= budget:
        return trace
    lo, hi = 0, peak  # lo compliant, hi not
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _max_window_pj(trace, cap.domain, mid, window) <= budget:
            lo = mid
        else:
            hi = mid
    out = []
    for seg in trace.segments:
        power = dict(seg.power_uw)
        if power.get(cap.domain, 0) > lo:
            power[cap.domain] = lo
        out.append(TraceSegment(seg.start_us, seg.end_us, seg.function, power))
    return ExecutionTrace(out, trace.registry)


# --- powercap --------------------------------------------------------------

_ZONE_RE = re.compile(r"^intel-rapl:(\d+)(?::(\d+))?$")
_SUBZONE_KINDS = {"core": DomainKind.PP0, "uncore": DomainKind.PP1, "dram": DomainKind.DRAM}


def powercap_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(POWERCAP_ROOT_ENV, DEFAULT_POWERCAP_ROOT))


class PowercapSource(EnergySource):
    """Live RAPL counters read from the powercap sysfs tree, uncached."""

    precision_us = 1000

    def __init__(self, root: str | os.PathLike | None = None) -> None:
        self.root = powercap_root(root)
        self._zones: dict[EnergyDomain, tuple[Path, CounterRange]] | None = None

    def _discover(self) -> dict[EnergyDomain, tuple[Path, CounterRange]]:
        if not self.root.is_dir():
            raise SourceUnavailable(f"powercap root {self.root} does not exist")
        candidates: dict[str, Path] = {}
        for path in sorted(self.root.glob("intel-rapl:*")) + sorted(self.root.glob("intel-rapl:*/intel-rapl:*")):
            candidates.setdefault(path.name, path)
        zones: dict[EnergyDomain, tuple[Path, CounterRange]] = {}
        for name in sorted(candidates, key=lambda n: [int(x) for x in n.split(":")[1:]] if _ZONE_RE.match(n) else [1 << 30]):
            m = _ZONE_RE.match(name)
            if not m:
                continue
            path = candidates[name]
            socket = int(m.group(1))
            try:
                zone_name = (path / "name").read_text().strip()
                max_range = int((path / "max_energy_range_uj").read_text().strip())
            except (OSError, ValueError) as exc:
                logger.debug("skipping powercap zone %s: %s", path, exc)
                continue
            if m.group(2) is None:
                kind = DomainKind.PACKAGE
            else:
                kind = _SUBZONE_KINDS.get(zone_name)
                if kind is None:
                    logger.debug("ignoring powercap zone %s (%s)", path, zone_name)
                    continue
            domain = EnergyDomain(kind, socket)
            if domain in zones:
                logger.warning("duplicate powercap domain %s at %s", domain, path)
                continue
            zones[domain] = (path, CounterRange(max_range))
        if not zones:
            raise SourceUnavailable(f"no intel-rapl zones under {self.root}")
        return zones

    def domains(self) -> list[tuple[EnergyDomain, CounterRange]]:
        self._zones = self._discover()
        return [(d, self._zones[d][1]) for d in sorted_domains(self._zones)]

    def _zone(self, domain: EnergyDomain) -> Path:
        if self._zones is None:
            self._zones = self._discover()
        try:
            return self._zones[domain][0]
        except KeyError:
            raise UnknownDomain(domain) from None

    def read(self, domain: EnergyDomain) -> CounterReading:
        path = self._zone(domain) / "energy_uj"
        ts = self.now_us()
        try:
            energy = int(path.read_text())
        except (OSError, ValueError) as exc:
            raise SourceUnavailable(f"cannot read {path}: {exc}") from exc
        return CounterReading(domain, ts, energy)

    def set_cap(self, cap: CapConstraint) -> None:
        zone = self._zone(cap.domain)
        files = {
            zone / "constraint_0_power_limit_uw": cap.limit_uw,
            zone / "constraint_0_time_window_us": cap.window_us,
        }
        for path in files:
            if not path.exists():
                raise CapUnsupported(f"{path} missing")
            # root ignores DAC on ordinary files; honour the published mode like sysfs does
            if not path.stat().st_mode & (stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH):
                raise PermissionDenied(f"{path} is read-only")
        for path, value in files.items():
            try:
                path.write_text(f"{value}\n")
            except PermissionError as exc:
                raise PermissionDenied(f"cannot write {path}: {exc}") from exc
            except OSError as exc:
                raise CapUnsupported(f"cannot write {path}: {exc}") from exc


# --- replay log ------------------------------------------------------------

LOG_FIELDS = ("timestamp_us", "domain", "energy_uj", "max_range_uj")


def write_reading_log(readings: Iterable[CounterReading], ranges: Mapping[EnergyDomain, CounterRange],
                      fp: TextIO) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in readings:
        w.writerow([r.timestamp_us, r.domain.label, r.energy_uj, ranges[r.domain].max_range_uj])


class ReplaySource(EnergySource):
    """Recorded counter readings replayed on a virtual clock.

    Stands in for file-exposed on-board monitors: any device that can dump
    ``timestamp_us,domain,energy_uj,max_range_uj`` rows can be profiled
    offline.  A read returns the latest recorded reading at or before the
    virtual time.
    """

    virtual = True

    def __init__(self, fp: TextIO, precision_us: int = 1000) -> None:
        self.precision_us = precision_us
        rows: dict[EnergyDomain, list[CounterReading]] = {}
        self._ranges: dict[EnergyDomain, CounterRange] = {}
        reader = csv.DictReader(fp)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LOG_FIELDS:
            raise SourceUnavailable(f"reading log header must be {','.join(LOG_FIELDS)}")
        for row in reader:
            d = EnergyDomain.parse(row["domain"])
            r = CounterReading(d, int(row["timestamp_us"]), int(row["energy_uj"]))
            seq = rows.setdefault(d, [])
            if seq and r.timestamp_us < seq[-1].timestamp_us:
                raise TimestampRegression(f"{d}: log goes back in time at {r.timestamp_us}")
            seq.append(r)
            self._ranges[d] = CounterRange(int(row["max_range_uj"]))
        if not rows:
            raise SourceUnavailable("empty reading log")
        self._rows = rows
        self._times = {d: [r.timestamp_us for r in seq] for d, seq in rows.items()}
        self._now = min(seq[0].timestamp_us for seq in rows.values())

    def domains(self) -> list[tuple[EnergyDomain, CounterRange]]:
        return [(d, self._ranges[d]) for d in sorted_domains(self._ranges)]

    def now_us(self) -> int:
        return self._now

    def advance_to(self, t_us: int) -> None:
        if t_us < self._now:
            raise TimestampRegression(f"virtual clock cannot go back from {self._now} to {t_us}")
        self._now = t_us

    def read(self, domain: EnergyDomain) -> CounterReading:
        times = self._times.get(domain)
        if times is None:
            raise UnknownDomain(domain)
        i = bisect.bisect_right(times, self._now) - 1
        if i < 0:
            raise SourceUnavailable(f"no {domain} reading recorded at or before {self._now}")
        return self._rows[domain][i]
