"""Piecewise-constant workload traces with exact energy integrals.

A trace is a contiguous list of segments, each running one function at a
fixed power per domain.  Energy inside a trace is tracked in picojoules
(µW × µs), which is an exact Python integer; the microjoule view used by
counters floors the *cumulative* picojoule value, so it is additive over
adjacent intervals and never drifts from a real counter by more than 1 µJ.
"""

from __future__ import annotations

import bisect
import io
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, TextIO

from nrgprof.domains import PKG, EnergyDomain, sorted_domains
from nrgprof.errors import InvalidShares, OutOfRange, TraceFormatError

PJ_PER_UJ = 1_000_000
UNATTRIBUTED = "unattributed"


@dataclass(frozen=True)
class FunctionId:
    name: str
    id: int


class FunctionRegistry:
    """Bijective name <-> dense id table.  Id 0 is always ``unattributed``."""

    def __init__(self, names: Iterable[str] = ()) -> None:
        self._names: list[str] = [UNATTRIBUTED]
        self._ids: dict[str, int] = {UNATTRIBUTED: 0}
        for name in names:
            self.intern(name)

    def intern(self, name: str) -> FunctionId:
        if not name:
            raise ValueError("function name must be non-empty")
        fid = self._ids.get(name)
        if fid is None:
            fid = len(self._names)
            self._names.append(name)
            self._ids[name] = fid
        return FunctionId(name, fid)

    def add(self, fid: int, name: str) -> FunctionId:
        """Register ``name`` under an explicit id (used when loading files)."""
        if fid == 0:
            if name != UNATTRIBUTED:
                raise ValueError("id 0 is reserved for 'unattributed'")
            return FunctionId(name, 0)
        if name in self._ids and self._ids[name] != fid:
            raise ValueError(f"function {name!r} already registered as {self._ids[name]}")
        while len(self._names) <= fid:
            self._names.append("")
        if self._names[fid] not in ("", name):
            raise ValueError(f"id {fid} already bound to {self._names[fid]!r}")
        self._names[fid] = name
        self._ids[name] = fid
        return FunctionId(name, fid)

    def __getitem__(self, key: int | str) -> FunctionId:
        if isinstance(key, str):
            return FunctionId(key, self._ids[key])
        name = self._names[key]
        if not name:
            raise KeyError(key)
        return FunctionId(name, key)

    def __contains__(self, name: object) -> bool:
        return name in self._ids

    def __iter__(self) -> Iterator[FunctionId]:
        for fid, name in enumerate(self._names):
            if name:
                yield FunctionId(name, fid)

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FunctionRegistry) and self._names == other._names


@dataclass(frozen=True)
class TraceSegment:
    start_us: int
    end_us: int
    function: FunctionId
    power_uw: Mapping[EnergyDomain, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.end_us <= self.start_us:
            raise ValueError(f"segment end {self.end_us} must be after start {self.start_us}")
        if any(p < 0 for p in self.power_uw.values()):
            raise ValueError("segment power must be >= 0")

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us

    def power(self, domain: EnergyDomain) -> int:
        return self.power_uw.get(domain, 0)


class ExecutionTrace:
    """Immutable, contiguous sequence of segments starting at t = 0."""

    def __init__(self, segments: Iterable[TraceSegment], registry: FunctionRegistry | None = None):
        self.segments: tuple[TraceSegment, ...] = tuple(segments)
        if not self.segments:
            raise ValueError("a trace needs at least one segment")
        if self.segments[0].start_us != 0:
            raise ValueError("first segment must start at 0")
        for prev, seg in zip(self.segments, self.segments[1:]):
            if seg.start_us != prev.end_us:
                raise ValueError(f"segments not contiguous at {prev.end_us}/{seg.start_us}")
        if registry is None:
            registry = FunctionRegistry()
            for seg in self.segments:
                registry.add(seg.function.id, seg.function.name)
        self.registry = registry
        self._starts = [s.start_us for s in self.segments]
        domains: set[EnergyDomain] = set()
        for seg in self.segments:
            domains.update(seg.power_uw)
        self.domains: tuple[EnergyDomain, ...] = tuple(sorted_domains(domains))
        # cumulative picojoules at each segment start, plus the end
        self._cum: dict[EnergyDomain, list[int]] = {}
        for d in self.domains:
            acc = [0]
            for seg in self.segments:
                acc.append(acc[-1] + seg.power(d) * seg.duration_us)
            self._cum[d] = acc

    @property
    def end_us(self) -> int:
        return self.segments[-1].end_us

    def __len__(self) -> int:
        return len(self.segments)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExecutionTrace):
            return NotImplemented
        return self.segments == other.segments and self.registry == other.registry

    def __repr__(self) -> str:
        return f"ExecutionTrace({len(self.segments)} segments, end_us={self.end_us})"

    def segment_index(self, t_us: int) -> int:
        """Index of the segment containing ``t_us`` under the half-open rule."""
        if not 0 <= t_us < self.end_us:
            raise OutOfRange(f"t={t_us} outside [0, {self.end_us})")
        return bisect.bisect_right(self._starts, t_us) - 1

    def energy_pj_at(self, t_us: int, domain: EnergyDomain) -> int:
        """Exact cumulative energy from 0 to ``t_us`` in picojoules."""
        if not 0 <= t_us <= self.end_us:
            raise OutOfRange(f"t={t_us} outside [0, {self.end_us}]")
        cum = self._cum.get(domain)
        if cum is None:
            return 0
        if t_us == self.end_us:
            return cum[-1]
        i = bisect.bisect_right(self._starts, t_us) - 1
        seg = self.segments[i]
        return cum[i] + seg.power(domain) * (t_us - seg.start_us)

    def energy_uj_at(self, t_us: int, domain: EnergyDomain) -> int:
        """Cumulative energy as an ideal (never wrapping) µJ counter would report it."""
        return self.energy_pj_at(t_us, domain) // PJ_PER_UJ

    def total_energy_pj(self, domain: EnergyDomain) -> int:
        cum = self._cum.get(domain)
        return cum[-1] if cum else 0

    def slice(self, t0_us: int, t1_us: int) -> ExecutionTrace:
        """Sub-trace covering [t0, t1), re-based to start at 0."""
        if not 0 <= t0_us < t1_us <= self.end_us:
            raise OutOfRange(f"bad slice [{t0_us}, {t1_us}) of trace ending at {self.end_us}")
        out = []
        for seg in self.segments[self.segment_index(t0_us):]:
            if seg.start_us >= t1_us:
                break
            s, e = max(seg.start_us, t0_us), min(seg.end_us, t1_us)
            out.append(TraceSegment(s - t0_us, e - t0_us, seg.function, seg.power_uw))
        return ExecutionTrace(out, self.registry)


def concat_traces(traces: Iterable[ExecutionTrace]) -> ExecutionTrace:
    """Lay traces end to end.  Function ids are re-interned by name."""
    registry = FunctionRegistry()
    out: list[TraceSegment] = []
    offset = 0
    for tr in traces:
        for seg in tr.segments:
            out.append(TraceSegment(seg.start_us + offset, seg.end_us + offset,
                                    registry.intern(seg.function.name), seg.power_uw))
        offset += tr.end_us
    return ExecutionTrace(out, registry)


def trace_energy_between(trace: ExecutionTrace, t0_us: int, t1_us: int, domain: EnergyDomain) -> int:
    """Energy in µJ a wrap-free counter accumulates between ``t0_us`` and ``t1_us``."""
    if not 0 <= t0_us <= t1_us <= trace.end_us:
        raise OutOfRange(f"interval [{t0_us}, {t1_us}] outside trace [0, {trace.end_us}]")
    return trace.energy_uj_at(t1_us, domain) - trace.energy_uj_at(t0_us, domain)


def trace_energy_exact(trace: ExecutionTrace, t0_us: int, t1_us: int, domain: EnergyDomain) -> Fraction:
    """Unquantized integral in µJ."""
    if not 0 <= t0_us <= t1_us <= trace.end_us:
        raise OutOfRange(f"interval [{t0_us}, {t1_us}] outside trace [0, {trace.end_us}]")
    pj = trace.energy_pj_at(t1_us, domain) - trace.energy_pj_at(t0_us, domain)
    return Fraction(pj, PJ_PER_UJ)


def function_at(trace: ExecutionTrace, t_us: int) -> FunctionId:
    return trace.segments[trace.segment_index(t_us)].function


def function_energy_pj(trace: ExecutionTrace, domain: EnergyDomain) -> dict[str, int]:
    """Exact picojoules spent in each function over the whole trace."""
    out: dict[str, int] = {}
    for seg in trace.segments:
        name = seg.function.name
        out[name] = out.get(name, 0) + seg.power(domain) * seg.duration_us
    return out


def function_time_us(trace: ExecutionTrace) -> dict[str, int]:
    out: dict[str, int] = {}
    for seg in trace.segments:
        out[seg.function.name] = out.get(seg.function.name, 0) + seg.duration_us
    return out


def oracle_shares(trace: ExecutionTrace, domain: EnergyDomain = PKG) -> dict[str, float]:
    energy = function_energy_pj(trace, domain)
    total = sum(energy.values())
    if total == 0:
        raise ValueError(f"trace has no energy on {domain}")
    return {name: e / total for name, e in energy.items()}


# --- generation -----------------------------------------------------------


@dataclass(frozen=True)
class TraceSpec:
    """Recipe for a stationary synthetic workload.

    ``shares`` are target energy shares per function (identical on every
    domain).  ``domain_power_uw`` is the mean power of each domain.  Each
    function draws a power multiplier in ``[1 - power_spread, 1 + power_spread]``
    and receives time in inverse proportion, so energy shares are exact while
    time shares differ.  Its time is cut into ``segments_per_function`` chunks
    whose lengths vary by at most 2x, and all chunks are shuffled.
    """

    shares: Mapping[str, float]
    duration_us: int
    domain_power_uw: Mapping[EnergyDomain, int]
    segments_per_function: int = 10
    power_spread: float = 0.5


def _split_integer(total: int, weights: list[float], minimum: int = 0) -> list[int]:
    """Largest-remainder apportionment of ``total`` into parts proportional to weights."""
    n = len(weights)
    spare = total - minimum * n
    if spare < 0:
        raise ValueError(f"cannot split {total} into {n} parts of at least {minimum}")
    wsum = sum(weights)
    raw = [spare * w / wsum for w in weights]
    parts = [math.floor(r) for r in raw]
    short = spare - sum(parts)
    order = sorted(range(n), key=lambda i: (raw[i] - parts[i], -i), reverse=True)
    for i in order[:short]:
        parts[i] += 1
    return [p + minimum for p in parts]


def _check_shares(shares: Mapping[str, float]) -> None:
    if not shares:
        raise InvalidShares("no functions given")
    if any(s < 0 or not math.isfinite(s) for s in shares.values()):
        raise InvalidShares("shares must be finite and >= 0")
    if abs(sum(shares.values()) - 1.0) > 1e-9:
        raise InvalidShares(f"shares sum to {sum(shares.values())!r}, expected 1")


def generate_trace(spec: TraceSpec, seed: int) -> ExecutionTrace:
    _check_shares(spec.shares)
    if spec.duration_us <= 0:
        raise ValueError("duration must be positive")
    if not 0 <= spec.power_spread < 1:
        raise ValueError("power_spread must be in [0, 1)")
    rng = random.Random(seed)
    names = [n for n, s in spec.shares.items() if s > 0]
    registry = FunctionRegistry(names)

    mult = {n: 1.0 + rng.uniform(-spec.power_spread, spec.power_spread) for n in names}
    k = max(1, spec.segments_per_function)
    times = _split_integer(spec.duration_us, [spec.shares[n] / mult[n] for n in names], minimum=1)

    chunks: list[tuple[str, int, dict[EnergyDomain, int]]] = []
    for name, t_fn in zip(names, times):
        # power chosen so that power * time reproduces the share exactly up to 1 µW rounding
        power = {
            d: round(Fraction(base) * Fraction(spec.shares[name]) * spec.duration_us / t_fn)
            for d, base in spec.domain_power_uw.items()
        }
        n_chunks = min(k, t_fn)
        for length in _split_integer(t_fn, [rng.uniform(1.0, 2.0) for _ in range(n_chunks)], 1):
            chunks.append((name, length, power))
    rng.shuffle(chunks)

    segments = []
    t = 0
    for name, length, power in chunks:
        segments.append(TraceSegment(t, t + length, registry[name], power))
        t += length
    return ExecutionTrace(segments, registry)


def constant_trace(power_uw: Mapping[EnergyDomain, int], duration_us: int,
                   function: str = "main") -> ExecutionTrace:
    registry = FunctionRegistry([function])
    return ExecutionTrace([TraceSegment(0, duration_us, registry[function], dict(power_uw))], registry)


def bursty_trace(seed: int, duration_us: int, *, domain: EnergyDomain = PKG,
                 idle_uw: int = 2_000_000, burst_uw: int = 25_000_000,
                 mean_idle_us: int = 60_000, mean_burst_us: int = 30_000) -> ExecutionTrace:
    """Alternating idle / burst phases with seeded random lengths and burst heights."""
    rng = random.Random(seed)
    registry = FunctionRegistry(["idle", "burst"])
    segments = []
    t = 0
    bursting = False
    while t < duration_us:
        mean = mean_burst_us if bursting else mean_idle_us
        length = min(duration_us - t, rng.randint(max(1, mean // 4), mean * 7 // 4))
        power = rng.randint(burst_uw // 2, burst_uw) if bursting else idle_uw
        name = "burst" if bursting else "idle"
        segments.append(TraceSegment(t, t + length, registry[name], {domain: power}))
        t += length
        bursting = not bursting
    return ExecutionTrace(segments, registry)


# --- file format ----------------------------------------------------------

HEADER = "trace v1"


def dump_trace(trace: ExecutionTrace, fp: TextIO) -> None:
    fp.write(HEADER + "\n")
    used = {seg.function.id for seg in trace.segments}
    for fid in trace.registry:
        if fid.id in used:
            fp.write(f"fn {fid.id} {fid.name}\n")
    for seg in trace.segments:
        powers = ",".join(f"{d.label}={seg.power_uw[d]}" for d in sorted_domains(seg.power_uw))
        fp.write(f"seg {seg.start_us} {seg.end_us} {seg.function.id} {powers}\n")


def dumps_trace(trace: ExecutionTrace) -> str:
    buf = io.StringIO()
    dump_trace(trace, buf)
    return buf.getvalue()


def load_trace(fp: TextIO) -> ExecutionTrace:
    registry = FunctionRegistry()
    segments = []
    saw_header = False
    for lineno, raw in enumerate(fp, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not saw_header:
            if line != HEADER:
                raise TraceFormatError(lineno, f"expected header {HEADER!r}")
            saw_header = True
            continue
        tag, _, rest = line.partition(" ")
        try:
            if tag == "fn":
                fid, _, name = rest.partition(" ")
                registry.add(int(fid), name.strip())
            elif tag == "seg":
                fields = rest.split()
                if len(fields) not in (3, 4):
                    raise ValueError("expected 'seg <start> <end> <fn_id> <domain>=<uw>,...'")
                start, end, fid = (int(x) for x in fields[:3])
                power: dict[EnergyDomain, int] = {}
                if len(fields) == 4:
                    for item in fields[3].split(","):
                        dom, _, uw = item.partition("=")
                        d = EnergyDomain.parse(dom)
                        if d in power:
                            raise ValueError(f"domain {dom} given twice")
                        power[d] = int(uw)
                segments.append(TraceSegment(start, end, registry[fid], power))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise TraceFormatError(lineno, str(exc)) from None
    if not saw_header:
        raise TraceFormatError(0, "empty trace file")
    try:
        return ExecutionTrace(segments, registry)
    except ValueError as exc:
        raise TraceFormatError(0, str(exc)) from None


def loads_trace(text: str) -> ExecutionTrace:
    return load_trace(io.StringIO(text))
