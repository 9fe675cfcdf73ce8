"""Instrumentation profiling: bracket named tasks with counter readings.

Each span records a reading of every domain when it begins and when it
ends; the wrap-corrected difference is the task's inclusive energy.
Exclusive energy subtracts the inclusive energy of direct children.

Spans opened from different threads live on independent stacks.  The
counters are package-wide, so concurrent spans on different stacks all see
each other's energy; such spans are reported with ``shared_counter=True``
instead of being split by some made-up rule.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Iterator

from nrgprof.counters import CounterRange, CounterReading, EnergySource, delta_energy
from nrgprof.domains import EnergyDomain
from nrgprof.errors import AlreadyEnded, NotInnermost, OpenSpans
from nrgprof.trace import UNATTRIBUTED

ROOT_NAME = "<root>"
LOW_CONFIDENCE_FACTOR = 10


@dataclass
class SpanReport:
    name: str
    start_us: int
    end_us: int
    energy_uj: dict[EnergyDomain, int]
    energy_uj_exclusive: dict[EnergyDomain, int]
    avg_power_uw: dict[EnergyDomain, float]
    children: list[SpanReport] = field(default_factory=list)
    degenerate: bool = False
    low_confidence: bool = False
    shared_counter: bool = False

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us

    def walk(self) -> Iterator[SpanReport]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(eq=False)
class TaskSpan:
    name: str
    start: dict[EnergyDomain, CounterReading]
    start_us: int
    parent: TaskSpan | None = None
    stack: Hashable = None
    end: dict[EnergyDomain, CounterReading] | None = None
    children: list[SpanReport] = field(default_factory=list)
    shared_counter: bool = False
    report: SpanReport | None = None


def _build_report(name: str, start: dict[EnergyDomain, CounterReading], end: dict[EnergyDomain, CounterReading],
                  start_us: int, end_us: int, ranges: dict[EnergyDomain, CounterRange],
                  children: list[SpanReport], precision_us: int, shared: bool = False) -> SpanReport:
    duration = end_us - start_us
    energy = {d: delta_energy(start[d], end[d], ranges[d]) for d in start}
    exclusive = {d: e - sum(c.energy_uj[d] for c in children) for d, e in energy.items()}
    if duration > 0:
        power = {d: e * 1_000_000 / duration for d, e in energy.items()}
    else:
        power = {d: 0.0 for d in energy}
    return SpanReport(
        name=name, start_us=start_us, end_us=end_us,
        energy_uj=energy, energy_uj_exclusive=exclusive, avg_power_uw=power,
        children=list(children),
        degenerate=duration == 0,
        low_confidence=duration < LOW_CONFIDENCE_FACTOR * precision_us,
        shared_counter=shared,
    )


class SpanProfiler:
    """Instrumentation profiler attached to one counter source.

    Creating the profiler takes the run's opening readings; :meth:`span_tree`
    closes the run and returns the root report.
    """

    def __init__(self, source: EnergySource, domains: Iterable[EnergyDomain] | None = None) -> None:
        self.source = source
        ranges = source.ranges()
        self.domains = list(ranges) if domains is None else list(domains)
        self.ranges = {d: ranges[d] for d in self.domains}
        self._lock = threading.Lock()
        self._stacks: dict[Hashable, list[TaskSpan]] = {}
        self._open: list[TaskSpan] = []
        self._top: list[SpanReport] = []
        self._root_start = self._read()
        self._root_start_us = source.now_us()

    def _read(self) -> dict[EnergyDomain, CounterReading]:
        return {d: self.source.read(d) for d in self.domains}

    def begin_span(self, name: str, stack: Hashable = None) -> TaskSpan:
        if stack is None:
            stack = threading.get_ident()
        start_us = self.source.now_us()
        readings = self._read()
        with self._lock:
            frames = self._stacks.setdefault(stack, [])
            span = TaskSpan(name, readings, start_us, frames[-1] if frames else None, stack)
            others = [s for s in self._open if s.stack != stack]
            if others:
                span.shared_counter = True
                for s in others:
                    s.shared_counter = True
            frames.append(span)
            self._open.append(span)
        return span

    def end_span(self, span: TaskSpan) -> SpanReport:
        if span.report is not None:
            raise AlreadyEnded(span.name)
        frames = self._stacks.get(span.stack, [])
        if not frames or frames[-1] is not span:
            inner = frames[-1].name if frames else None
            raise NotInnermost(f"cannot end {span.name!r} while {inner!r} is open")
        end_us = self.source.now_us()
        span.end = self._read()
        report = _build_report(span.name, span.start, span.end, span.start_us, end_us, self.ranges,
                               span.children, self.source.precision_us, span.shared_counter)
        with self._lock:
            frames.pop()
            self._open.remove(span)
            span.report = report
            if span.parent is not None:
                span.parent.children.append(report)
            else:
                self._top.append(report)
        return report

    @contextlib.contextmanager
    def span(self, name: str, stack: Hashable = None) -> Iterator[TaskSpan]:
        handle = self.begin_span(name, stack)
        try:
            yield handle
        finally:
            self.end_span(handle)

    def current_function(self, t_us: int | None = None) -> str:
        """Name of the innermost open span, or ``unattributed``.

        Used as the sampler's attribution context in live mode; reads a
        single list element so it is safe without taking the lock.
        """
        open_spans = self._open
        return open_spans[-1].name if open_spans else UNATTRIBUTED

    def span_tree(self) -> SpanReport:
        if self._open:
            raise OpenSpans(", ".join(s.name for s in self._open))
        end_us = self.source.now_us()
        end = self._read()
        return _build_report(ROOT_NAME, self._root_start, end, self._root_start_us, end_us,
                             self.ranges, self._top, self.source.precision_us)


def begin_span(profiler: SpanProfiler, name: str) -> TaskSpan:
    return profiler.begin_span(name)


def end_span(profiler: SpanProfiler, span: TaskSpan) -> SpanReport:
    return profiler.end_span(span)


def span_tree(profiler: SpanProfiler) -> SpanReport:
    return profiler.span_tree()
