"""Deterministic time model for computation and communication.

Nothing sleeps: every phase is charged analytically and folded into a
``SimClock``. Parallel entities (clients under one MES, MESs under the cloud)
contribute only their slowest member; sequential phases add up.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

from .errors import InputError

PHASES = ("client_compute", "mes_compute", "cloud_compute", "comm_client_mes", "comm_mes_cloud")


@dataclass(frozen=True)
class LinkModel:
    latency_s: float
    bandwidth_Bps: float

    def __post_init__(self):
        if self.latency_s < 0:
            raise InputError("latency must be >= 0")
        if not self.bandwidth_Bps > 0:
            raise InputError("bandwidth must be > 0")


@dataclass(frozen=True)
class ComputeModel:
    """Seconds per (sample x parameter) of forward+backward work, per tier."""

    client_s: float = 1e-6
    mes_s: float = 2.5e-7
    cloud_s: float = 2.5e-7

    def __post_init__(self):
        if min(self.client_s, self.mes_s, self.cloud_s) < 0:
            raise InputError("compute costs must be >= 0")


@dataclass(frozen=True)
class NetworkModel:
    # client <-> MES (or client <-> its only server in flat protocols run at the edge)
    lan: LinkModel = field(default_factory=lambda: LinkModel(0.005, 100e6))
    # MES <-> cloud, and client <-> cloud in the flat protocols
    wan: LinkModel = field(default_factory=lambda: LinkModel(0.040, 20e6))
    compute: ComputeModel = field(default_factory=ComputeModel)


def transfer_time(nbytes: float, link: LinkModel) -> float:
    if nbytes < 0:
        raise InputError("byte count must be >= 0")
    return link.latency_s + nbytes / link.bandwidth_Bps


@dataclass
class PhaseTimes:
    """Durations along one execution path, broken down by phase."""

    client_compute: float = 0.0
    mes_compute: float = 0.0
    cloud_compute: float = 0.0
    comm_client_mes: float = 0.0
    comm_mes_cloud: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, name) for name in PHASES)

    def __add__(self, other: "PhaseTimes") -> "PhaseTimes":
        return PhaseTimes(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in PHASES}


def slowest(paths: Sequence[PhaseTimes]) -> PhaseTimes:
    """Critical path among parallel entities (first one wins ties)."""
    if not paths:
        return PhaseTimes()
    best = paths[0]
    for p in paths[1:]:
        if p.total > best.total:
            best = p
    return best


def round_time(
    groups: Sequence[Sequence[PhaseTimes]],
    edge: Sequence[PhaseTimes] | None = None,
    cloud: PhaseTimes | None = None,
) -> PhaseTimes:
    """Critical path of one round.

    ``groups[m]`` holds the per-client paths under MES ``m``; ``edge[m]`` is
    the work that MES does after its slowest client finishes; ``cloud`` runs
    after the slowest MES.
    """
    per_mes = []
    for m, clients in enumerate(groups):
        path = slowest(clients)
        if edge is not None:
            path = path + edge[m]
        per_mes.append(path)
    total = slowest(per_mes)
    if cloud is not None:
        total = total + cloud
    return total


@dataclass
class SimClock:
    elapsed_s: float = 0.0
    breakdown: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))

    def advance(self, phases: PhaseTimes) -> float:
        step = 0.0
        for name, value in phases.as_dict().items():
            if value < 0:
                raise InputError(f"negative duration for {name}")
            self.breakdown[name] += value
            step += value
        self.elapsed_s += step
        return step
