"""Workload plans: what gets submitted, and when."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Optional


class WorkloadKind(str, enum.Enum):
    UNIFORM = "UNIFORM"
    MIXED = "MIXED"
    PULSED = "PULSED"


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters by kind.

    UNIFORM: ``count`` jobs of ``duration_s``.  MIXED: ``groups`` of
    ``(count, duration_s)``, submitted in order.  PULSED: ``batch_count``
    batches of ``batch_size`` jobs, one every ``batch_interval_s``.
    All times are unscaled seconds.
    """

    kind: WorkloadKind
    count: int = 0
    duration_s: float = 60.0
    groups: tuple[tuple[int, float], ...] = ()
    batch_count: int = 0
    batch_size: int = 0
    batch_interval_s: float = 300.0
    requirements: str = "true"
    rank: Optional[str] = None
    owner: str = "bench"

    def __post_init__(self):
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        counts = [self.count, self.batch_count, self.batch_size] + [c for c, _ in self.groups]
        if any(c < 0 for c in counts):
            raise ValueError("counts must be >= 0")
        durations = [self.duration_s] + [d for _, d in self.groups]
        if any(not (math.isfinite(d) and d > 0) for d in durations):
            raise ValueError("durations must be positive")
        if not self.batch_interval_s > 0:
            raise ValueError("batch_interval_s must be positive")

    @classmethod
    def uniform(cls, count: int, duration_s: float, **kw) -> "WorkloadSpec":
        return cls(WorkloadKind.UNIFORM, count=count, duration_s=duration_s, **kw)

    @classmethod
    def mixed(cls, groups, **kw) -> "WorkloadSpec":
        return cls(WorkloadKind.MIXED, groups=tuple((int(c), float(d)) for c, d in groups), **kw)

    @classmethod
    def pulsed(cls, batch_count: int, batch_size: int, batch_interval_s: float, duration_s: float, **kw) -> "WorkloadSpec":
        return cls(WorkloadKind.PULSED, batch_count=batch_count, batch_size=batch_size,
                   batch_interval_s=batch_interval_s, duration_s=duration_s, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value, "count": self.count, "duration_s": self.duration_s,
            "groups": [list(g) for g in self.groups], "batch_count": self.batch_count,
            "batch_size": self.batch_size, "batch_interval_s": self.batch_interval_s,
        }


@dataclass(frozen=True)
class Submission:
    t: float  # unscaled seconds after the start of the run
    count: int
    duration_s: float
    owner: str = "bench"
    requirements: str = "true"
    rank: Optional[str] = None
    attributes: dict = field(default_factory=dict)


def generate_workload(spec: WorkloadSpec) -> list[Submission]:
    common = {"owner": spec.owner, "requirements": spec.requirements, "rank": spec.rank}
    if spec.kind is WorkloadKind.UNIFORM:
        return [Submission(0.0, spec.count, spec.duration_s, **common)] if spec.count else []
    if spec.kind is WorkloadKind.MIXED:
        return [Submission(0.0, c, d, **common) for c, d in spec.groups if c]
    if not spec.batch_size:
        return []
    return [Submission(k * spec.batch_interval_s, spec.batch_size, spec.duration_s, **common) for k in range(spec.batch_count)]


def total_jobs(plan: list[Submission]) -> int:
    return sum(s.count for s in plan)


def ideal_throughput(slots: int, mean_duration_s: float) -> float:
    """Completions per second a fully busy cluster sustains: slots / mean job length."""
    if slots < 0:
        raise ValueError("slots must be >= 0")
    if not mean_duration_s > 0:
        raise ValueError("mean_duration_s must be positive")
    return slots / mean_duration_s
