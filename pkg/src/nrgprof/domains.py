"""Energy domain vocabulary shared by counters, traces and reports."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class DomainKind(enum.Enum):
    PACKAGE = "pkg"
    PP0 = "pp0"
    PP1 = "pp1"
    DRAM = "dram"
    NODE = "node"


# report column order
KIND_ORDER = (DomainKind.PACKAGE, DomainKind.PP0, DomainKind.PP1, DomainKind.DRAM, DomainKind.NODE)


@dataclass(frozen=True, order=False)
class EnergyDomain:
    """A measurement scope: a RAPL-style domain on one socket, or the whole node."""

    kind: DomainKind
    socket: int = 0

    def __post_init__(self) -> None:
        if self.socket < 0:
            raise ValueError(f"socket index must be >= 0, got {self.socket}")

    @property
    def label(self) -> str:
        """Short spelling used in trace files, CLI flags and report columns.

        Socket 0 is spelled bare (``pkg``); other sockets get a suffix (``pkg:1``).
        """
        if self.socket == 0:
            return self.kind.value
        return f"{self.kind.value}:{self.socket}"

    @classmethod
    def parse(cls, text: str) -> EnergyDomain:
        name, _, socket = text.strip().partition(":")
        try:
            kind = DomainKind(name.lower())
        except ValueError:
            raise ValueError(f"unknown energy domain {text!r}") from None
        if socket and not socket.isdigit():
            raise ValueError(f"bad socket index in {text!r}")
        return cls(kind, int(socket) if socket else 0)

    def sort_key(self) -> tuple[int, int]:
        return (KIND_ORDER.index(self.kind), self.socket)

    def __str__(self) -> str:
        return self.label


PKG = EnergyDomain(DomainKind.PACKAGE)
PP0 = EnergyDomain(DomainKind.PP0)
PP1 = EnergyDomain(DomainKind.PP1)
DRAM = EnergyDomain(DomainKind.DRAM)
NODE = EnergyDomain(DomainKind.NODE)


def sorted_domains(domains) -> list[EnergyDomain]:
    return sorted(domains, key=EnergyDomain.sort_key)
