"""Exception hierarchy shared by all nrgprof modules."""

from __future__ import annotations


class NrgProfError(Exception):
    """Base class for every error raised by nrgprof."""


# counters
class UnknownDomain(NrgProfError, KeyError):
    pass


class SourceUnavailable(NrgProfError):
    """Counter source cannot be read (wrong host, missing tree, permissions)."""


class DomainMismatch(NrgProfError, ValueError):
    pass


class TimestampRegression(NrgProfError, ValueError):
    pass


class CapUnsupported(NrgProfError):
    pass


class PermissionDenied(NrgProfError, PermissionError):
    pass


# trace
class InvalidShares(NrgProfError, ValueError):
    pass


class OutOfRange(NrgProfError, ValueError):
    pass


class TraceFormatError(NrgProfError, ValueError):
    def __init__(self, line: int, msg: str) -> None:
        super().__init__(f"line {line}: {msg}")
        self.line = line


# spans
class NotInnermost(NrgProfError):
    pass


class AlreadyEnded(NrgProfError):
    pass


class OpenSpans(NrgProfError):
    pass


# sampler / report
class EmptyProfile(NrgProfError):
    pass


class ConfigMismatch(NrgProfError, ValueError):
    pass


# meters
class ParseError(NrgProfError, ValueError):
    def __init__(self, line: int, msg: str) -> None:
        super().__init__(f"line {line}: {msg}")
        self.line = line


class NonMonotonicTimestamps(NrgProfError, ValueError):
    pass


class Unreachable(NrgProfError):
    pass


class MalformedResponse(NrgProfError):
    pass


class CoverageError(NrgProfError):
    """Requested interval is not covered by the series (likely misaligned clocks)."""


# harness
class SpawnFailure(NrgProfError):
    pass
