"""Parsing of human-written quantities ("10ms", "5W", "10uj") into integer base units."""

from __future__ import annotations

import re
from fractions import Fraction

_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Zµ]*)\s*$")

_TIME_US = {"": 1, "us": 1, "µs": 1, "ms": 1_000, "s": 1_000_000, "min": 60_000_000}
_ENERGY_UJ = {"": 1, "uj": 1, "µj": 1, "mj": 1_000, "j": 1_000_000}
_POWER_UW = {"": 1, "uw": 1, "µw": 1, "mw": 1_000, "w": 1_000_000, "kw": 1_000_000_000}


def _parse(text: str, table: dict[str, int], what: str) -> int:
    m = _QTY.match(text)
    if not m:
        raise ValueError(f"cannot parse {what} {text!r}")
    value, unit = m.groups()
    scale = table.get(unit.lower() if unit not in table else unit)
    if scale is None:
        raise ValueError(f"unknown {what} unit {unit!r} in {text!r}")
    return round(Fraction(value) * scale)


def parse_duration_us(text: str) -> int:
    """Bare numbers are microseconds."""
    return _parse(text, _TIME_US, "duration")


def parse_energy_uj(text: str) -> int:
    return _parse(text, _ENERGY_UJ, "energy")


def parse_power_uw(text: str) -> int:
    return _parse(text, _POWER_UW, "power")
