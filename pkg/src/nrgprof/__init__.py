"""Function-level energy profiling over cumulative energy counters."""

from nrgprof.domains import DomainKind, EnergyDomain
from nrgprof.errors import NrgProfError

__all__ = ["DomainKind", "EnergyDomain", "NrgProfError"]
__version__ = "0.1.0"
