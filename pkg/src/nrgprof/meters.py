"""Node-level power from external meters (rack PDUs, plug-in meters).

Series hold instantaneous power samples in µW on the harness's monotonic
µs timebase.  Energy over an interval is the trapezoidal integral, which is
exact for piecewise-linear power; meters that report interval means can
integrate in step mode instead.
"""

from __future__ import annotations

import configparser
import csv
import enum
import logging
import os
import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TextIO

import requests

from nrgprof.errors import CoverageError, MalformedResponse, NonMonotonicTimestamps, ParseError, Unreachable

logger = logging.getLogger(__name__)

CSV_HEADER = ("timestamp_us", "power_uw")
PJ_PER_J = 10**12
MAX_BRIDGED_SAMPLES = 3

PDU_URL_ENV = "NRGPROF_PDU_URL"
PDU_TOKEN_ENV = "NRGPROF_PDU_TOKEN"


class Origin(enum.Enum):
    PDU_API = "pdu_api"
    PLUG_METER_CSV = "plug_meter_csv"
    OTHER = "other"


@dataclass(frozen=True)
class Gap:
    """Missing polls between two recorded points."""

    after_us: int
    before_us: int
    missing: int


@dataclass(frozen=True)
class PowerSeries:
    points: tuple[tuple[int, int], ...] = ()
    origin: Origin = Origin.OTHER
    nominal_accuracy_pct: float = 3.0
    gaps: tuple[Gap, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple((int(t), int(p)) for t, p in self.points))
        for (ta, _), (tb, _) in zip(self.points, self.points[1:]):
            if tb <= ta:
                raise NonMonotonicTimestamps(f"timestamp {tb} does not follow {ta}")
        if any(p < 0 for _, p in self.points):
            raise ValueError("power must be >= 0")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def timestamps(self) -> list[int]:
        return [t for t, _ in self.points]

    @property
    def powers(self) -> list[int]:
        return [p for _, p in self.points]

    def shifted(self, offset_us: int) -> PowerSeries:
        """Same series moved by a constant clock offset."""
        return PowerSeries(tuple((t + offset_us, p) for t, p in self.points), self.origin,
                           self.nominal_accuracy_pct,
                           tuple(Gap(g.after_us + offset_us, g.before_us + offset_us, g.missing) for g in self.gaps))


@dataclass(frozen=True)
class BaselineEstimate:
    idle_power_uw: float
    window: tuple[int, int]
    stddev_uw: float
    n_points: int = 0

    def __post_init__(self) -> None:
        if self.window[1] <= self.window[0]:
            raise ValueError("baseline window must have positive length")
        if self.idle_power_uw < 0:
            raise ValueError("idle power must be >= 0")


# --- CSV -------------------------------------------------------------------


def ingest_csv(stream: TextIO, origin: Origin = Origin.PLUG_METER_CSV,
               nominal_accuracy_pct: float = 3.0) -> PowerSeries:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")
    points: list[tuple[int, int]] = []
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(lineno, f"expected 2 fields, got {len(row)}")
        try:
            t, p = int(row[0]), int(row[1])
        except ValueError:
            raise ParseError(lineno, f"non-integer field in {row!r}") from None
        if p < 0:
            raise ParseError(lineno, "negative power")
        if points and t <= points[-1][0]:
            raise NonMonotonicTimestamps(f"line {lineno}: timestamp {t} does not follow {points[-1][0]}")
        points.append((t, p))
    return PowerSeries(tuple(points), origin, nominal_accuracy_pct)


def export_csv(series: PowerSeries, stream: TextIO) -> None:
    stream.write(",".join(CSV_HEADER) + "\n")
    for t, p in series.points:
        stream.write(f"{t},{p}\n")


def random_walk_series(seed: int, n: int, *, interval_us: int = 1_000_000, start_uw: int = 100_000_000,
                       step_uw: int = 2_000_000, t0_us: int = 0) -> PowerSeries:
    """Seeded bounded random walk, a stand-in for a noisy node power log."""
    rng = random.Random(seed)
    p = start_uw
    points = []
    for i in range(n):
        points.append((t0_us + i * interval_us, p))
        p = max(0, p + rng.randint(-step_uw, step_uw))
    return PowerSeries(tuple(points))


# --- PDU polling -----------------------------------------------------------


@dataclass
class PduEndpoint:
    """HTTP endpoint answering GET with ``{"power_w": <number>, "ts": <unix seconds>}``.

    ``offset_us`` is added to every converted timestamp to move the PDU's
    clock onto the harness timebase.
    """

    url: str
    interval_s: float = 1.0
    timeout_s: float = 2.0
    headers: dict[str, str] = field(default_factory=dict)
    offset_us: int = 0

    @classmethod
    def from_env(cls, **overrides) -> PduEndpoint:
        url = overrides.pop("url", None) or os.environ.get(PDU_URL_ENV)
        if not url:
            raise Unreachable(f"no PDU url given (set {PDU_URL_ENV})")
        ep = cls(url, **overrides)
        token = os.environ.get(PDU_TOKEN_ENV)
        if token:
            ep.headers.setdefault("Authorization", f"Bearer {token}")
        return ep

    @classmethod
    def from_config(cls, path: str | os.PathLike) -> PduEndpoint:
        """Read a ``[pdu]`` section with ``url``, ``interval``, ``timeout``, ``token``, ``offset_us``."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        sec = cp["pdu"]
        ep = cls(sec["url"], interval_s=sec.getfloat("interval", 1.0), timeout_s=sec.getfloat("timeout", 2.0),
                 offset_us=sec.getint("offset_us", 0))
        if sec.get("token"):
            ep.headers["Authorization"] = f"Bearer {sec['token']}"
        return ep


def _parse_pdu(resp: requests.Response) -> tuple[int, int]:
    try:
        body = resp.json()
        power_w = float(body["power_w"])
        ts = float(body["ts"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"bad PDU response {resp.text[:80]!r}: {exc}") from None
    if power_w < 0 or power_w != power_w or ts != ts:
        raise MalformedResponse(f"bad PDU values power_w={power_w} ts={ts}")
    return round(ts * 1_000_000), round(power_w * 1_000_000)


def poll_pdu(endpoint: PduEndpoint, duration_s: float, session: requests.Session | None = None,
             stop: threading.Event | None = None) -> PowerSeries:
    """Poll once per ``endpoint.interval_s`` for ``duration_s`` (or until ``stop`` is set).

    Failed polls (connection errors, timeouts, HTTP errors) are recorded as
    gaps, never interpolated.  If every poll fails the PDU is unreachable.
    """
    session = session or requests.Session()
    n_polls = max(1, round(duration_s / endpoint.interval_s))
    points: list[tuple[int, int]] = []
    gaps: list[Gap] = []
    pending = 0
    start = time.monotonic()
    for i in range(n_polls):
        delay = start + i * endpoint.interval_s - time.monotonic()
        if stop is not None:
            if stop.wait(max(0.0, delay)):
                break
        elif delay > 0:
            time.sleep(delay)
        try:
            resp = session.get(endpoint.url, headers=endpoint.headers, timeout=endpoint.timeout_s)
            resp.raise_for_status()
        except requests.RequestException as exc:
            logger.warning("PDU poll %d failed: %s", i, exc)
            pending += 1
            continue
        ts, power = _parse_pdu(resp)
        ts += endpoint.offset_us
        if points and ts <= points[-1][0]:
            if ts == points[-1][0]:
                logger.debug("PDU returned a stale sample at %d", ts)
                pending += 1
                continue
            raise MalformedResponse(f"PDU clock went back from {points[-1][0]} to {ts}")
        if pending and points:
            gaps.append(Gap(points[-1][0], ts, pending))
        pending = 0
        points.append((ts, power))
    if not points:
        raise Unreachable(f"no successful poll of {endpoint.url}")
    return PowerSeries(tuple(points), Origin.PDU_API, gaps=tuple(gaps))


# --- integration -----------------------------------------------------------


def _check_coverage(series: PowerSeries, t0: int, t1: int, allow_gaps: bool) -> None:
    if t1 < t0:
        raise ValueError(f"interval end {t1} before start {t0}")
    if not series.points or series.points[0][0] > t0 or series.points[-1][0] < t1:
        first = series.points[0][0] if series.points else None
        last = series.points[-1][0] if series.points else None
        raise CoverageError(f"series [{first}, {last}] does not cover [{t0}, {t1}]")
    for g in series.gaps:
        if g.after_us < t1 and g.before_us > t0:
            if not allow_gaps or g.missing > MAX_BRIDGED_SAMPLES:
                raise CoverageError(f"{g.missing} missing sample(s) between {g.after_us} and {g.before_us}")


def _integrate_pj(series: PowerSeries, t0: int, t1: int, step: bool) -> Fraction:
    total = Fraction(0)
    pts = series.points
    for (ta, pa), (tb, pb) in zip(pts, pts[1:]):
        s, e = max(ta, t0), min(tb, t1)
        if e <= s:
            continue
        if step:
            total += pa * (e - s)
        else:
            slope = Fraction(pb - pa, tb - ta)
            ps = pa + slope * (s - ta)
            pe = pa + slope * (e - ta)
            total += (ps + pe) * (e - s) / 2
    return total


def integrate(series: PowerSeries, t0_us: int, t1_us: int, *, step: bool = False,
              allow_gaps: bool = False) -> float:
    """Energy in joules over [t0, t1].

    ``allow_gaps`` bridges gaps of at most three missing samples linearly;
    larger gaps are always a :class:`CoverageError`.
    """
    _check_coverage(series, t0_us, t1_us, allow_gaps)
    return float(_integrate_pj(series, t0_us, t1_us, step) / PJ_PER_J)


def measure_idle_baseline(series: PowerSeries, window: tuple[int, int]) -> BaselineEstimate:
    t0, t1 = window
    _check_coverage(series, t0, t1, allow_gaps=True)
    inside = [p for t, p in series.points if t0 <= t <= t1]
    if not inside:
        raise CoverageError(f"no samples inside baseline window {window}")
    return BaselineEstimate(statistics.fmean(inside), (t0, t1), statistics.pstdev(inside), len(inside))


def net_energy(series: PowerSeries, span: tuple[int, int], baseline: BaselineEstimate, *,
               step: bool = False, allow_gaps: bool = False) -> float:
    """Energy above the idle baseline over ``span``, in joules (may be negative)."""
    t0, t1 = span
    gross = integrate(series, t0, t1, step=step, allow_gaps=allow_gaps)
    net = gross - baseline.idle_power_uw * (t1 - t0) / PJ_PER_J
    if net < 0:
        logger.warning("net energy over [%d, %d] is negative (%.6g J); baseline above run power", t0, t1, net)
    return net
