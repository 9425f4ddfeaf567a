"""Domain records shared by the store, the service, the agents and the harness.

Every record is an immutable value.  Mutation happens by building a new
record with :func:`dataclasses.replace` and handing it to the store inside a
transaction, so a record fetched from the store is always a consistent
snapshot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Optional

from .expr import Expression, Literal, parse_expression, to_text

__all__ = [
    "HistoryEvent",
    "HistoryKind",
    "IllegalTransition",
    "InvalidStateCombination",
    "JobPhase",
    "JobRecord",
    "JobState",
    "LifecycleEvent",
    "MachineRecord",
    "MachineState",
    "MatchRecord",
    "RunRecord",
    "TERMINAL",
    "VmId",
    "derive_job_state",
    "derive_machine_state",
    "validate_event",
    "validate_attributes",
]


class JobState(str, enum.Enum):
    IDLE = "IDLE"
    MATCHED = "MATCHED"
    RUNNING = "RUNNING"


class MachineState(str, enum.Enum):
    UNCLAIMED = "UNCLAIMED"
    MATCHED = "MATCHED"
    CLAIMED = "CLAIMED"


class JobPhase(str, enum.Enum):
    STARTING = "STARTING"
    EXECUTING = "EXECUTING"


class HistoryKind(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    MATCHED = "MATCHED"
    STARTED = "STARTED"
    COMPLETED = "COMPLETED"
    DROPPED = "DROPPED"
    REMOVED = "REMOVED"
    # Machine-level note, written when a host reports a new boot epoch.
    MACHINE_BOOT = "MACHINE_BOOT"


class LifecycleEvent(str, enum.Enum):
    MATCH_CREATED = "MATCH_CREATED"
    MATCH_EXPIRED = "MATCH_EXPIRED"
    MATCH_ACCEPTED = "MATCH_ACCEPTED"
    RUN_COMPLETED = "RUN_COMPLETED"
    RUN_DROPPED = "RUN_DROPPED"
    JOB_REMOVED = "JOB_REMOVED"


# Sentinel successor for COMPLETED/REMOVED jobs; they leave the jobs relation.
TERMINAL = "TERMINAL"


class VmId(NamedTuple):
    """A schedulable slot: ``(host_id, slot_index)``; orders lexicographically."""

    host_id: str
    slot_index: int

    def __str__(self) -> str:
        return f"{self.host_id}/{self.slot_index}"

    @classmethod
    def coerce(cls, value: Any) -> "VmId":
        if isinstance(value, VmId):
            return value
        if isinstance(value, str):
            host, _, slot = value.rpartition("/")
            return cls(host, int(slot))
        host, slot = value
        return cls(str(host), int(slot))


class InvalidStateCombination(ValueError):
    pass


class IllegalTransition(ValueError):
    def __init__(self, state, event):
        super().__init__(f"illegal transition: {event} from {state}")
        self.state = state
        self.event = event


def derive_job_state(has_match: bool, has_run: bool) -> JobState:
    if has_match and has_run:
        raise InvalidStateCombination("a job cannot hold a match and a run at once")
    if has_run:
        return JobState.RUNNING
    if has_match:
        return JobState.MATCHED
    return JobState.IDLE


def derive_machine_state(has_match: bool, has_run: bool) -> MachineState:
    if has_match and has_run:
        raise InvalidStateCombination("a machine cannot hold a match and a run at once")
    if has_run:
        return MachineState.CLAIMED
    if has_match:
        return MachineState.MATCHED
    return MachineState.UNCLAIMED


_EDGES = {
    (JobState.IDLE, LifecycleEvent.MATCH_CREATED): JobState.MATCHED,
    (JobState.MATCHED, LifecycleEvent.MATCH_EXPIRED): JobState.IDLE,
    (JobState.MATCHED, LifecycleEvent.MATCH_ACCEPTED): JobState.RUNNING,
    (JobState.RUNNING, LifecycleEvent.RUN_COMPLETED): TERMINAL,
    (JobState.RUNNING, LifecycleEvent.RUN_DROPPED): JobState.IDLE,
}


def validate_event(current: JobState, event: LifecycleEvent):
    """Return the successor of ``current`` under ``event`` or raise IllegalTransition."""
    current = JobState(current)
    event = LifecycleEvent(event)
    if event is LifecycleEvent.JOB_REMOVED:
        return TERMINAL
    try:
        return _EDGES[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


def validate_attributes(attrs: Mapping[str, Any]) -> dict[str, Any]:
    """Attribute maps hold flat scalars only."""
    out = {}
    for key, value in attrs.items():
        if not isinstance(key, str) or not key:
            raise ValueError(f"attribute names must be non-empty strings, got {key!r}")
        if not isinstance(value, (bool, int, float, str)):
            raise ValueError(f"attribute {key!r} must be a scalar, got {type(value).__name__}")
        out[key] = value
    return out


TRUE_EXPR = Literal(True)


@dataclass(frozen=True)
class JobRecord:
    job_id: int
    owner: str
    duration_s: float
    requirements: Expression = TRUE_EXPR
    rank: Optional[Expression] = None
    attributes: Mapping[str, Any] = field(default_factory=dict)
    state: JobState = JobState.IDLE
    submit_time: float = 0.0
    retry_count: int = 0
    phase: Optional[JobPhase] = None
    release_requested: bool = False

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s!r}")

    def evaluation_attrs(self) -> dict[str, Any]:
        """Attributes visible to ``job.<name>`` references."""
        attrs = {"owner": self.owner, "duration_s": self.duration_s, "job_id": self.job_id}
        attrs.update(self.attributes)
        return attrs

    def descriptor(self) -> dict[str, Any]:
        return {"job_id": self.job_id, "duration_s": self.duration_s, "attributes": dict(self.attributes)}

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "owner": self.owner,
            "duration_s": self.duration_s,
            "requirements": to_text(self.requirements),
            "rank": None if self.rank is None else to_text(self.rank),
            "attributes": dict(self.attributes),
            "state": self.state.value,
            "submit_time": self.submit_time,
            "retry_count": self.retry_count,
            "phase": None if self.phase is None else self.phase.value,
            "release_requested": self.release_requested,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JobRecord":
        return cls(
            job_id=int(d["job_id"]),
            owner=d["owner"],
            duration_s=float(d["duration_s"]),
            requirements=parse_expression(d.get("requirements") or "true"),
            rank=None if d.get("rank") is None else parse_expression(d["rank"]),
            attributes=dict(d.get("attributes") or {}),
            state=JobState(d.get("state", "IDLE")),
            submit_time=float(d.get("submit_time", 0.0)),
            retry_count=int(d.get("retry_count", 0)),
            phase=None if d.get("phase") is None else JobPhase(d["phase"]),
            release_requested=bool(d.get("release_requested", False)),
        )


@dataclass(frozen=True)
class MachineRecord:
    vm_id: VmId
    attributes: Mapping[str, Any] = field(default_factory=dict)
    state: MachineState = MachineState.UNCLAIMED
    last_heartbeat: float = 0.0
    boot_epoch: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "vm_id": [self.vm_id.host_id, self.vm_id.slot_index],
            "attributes": dict(self.attributes),
            "state": self.state.value,
            "last_heartbeat": self.last_heartbeat,
            "boot_epoch": self.boot_epoch,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MachineRecord":
        return cls(
            vm_id=VmId.coerce(d["vm_id"]),
            attributes=dict(d.get("attributes") or {}),
            state=MachineState(d.get("state", "UNCLAIMED")),
            last_heartbeat=float(d.get("last_heartbeat", 0.0)),
            boot_epoch=int(d.get("boot_epoch", 0)),
        )


@dataclass(frozen=True)
class MatchRecord:
    job_id: int
    vm_id: VmId
    created_at: float
    expires_at: float

    def __post_init__(self):
        if not self.expires_at > self.created_at:
            raise ValueError("match must expire after it is created")

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "vm_id": [self.vm_id.host_id, self.vm_id.slot_index],
            "created_at": self.created_at,
            "expires_at": self.expires_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MatchRecord":
        return cls(int(d["job_id"]), VmId.coerce(d["vm_id"]), float(d["created_at"]), float(d["expires_at"]))


@dataclass(frozen=True)
class RunRecord:
    job_id: int
    vm_id: VmId
    started_at: float
    last_seen: float = 0.0
    # Consecutive heartbeats from the slot that did not mention the job.
    missed_reports: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "vm_id": [self.vm_id.host_id, self.vm_id.slot_index],
            "started_at": self.started_at,
            "last_seen": self.last_seen,
            "missed_reports": self.missed_reports,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunRecord":
        return cls(
            int(d["job_id"]),
            VmId.coerce(d["vm_id"]),
            float(d["started_at"]),
            float(d.get("last_seen", 0.0)),
            int(d.get("missed_reports", 0)),
        )


@dataclass(frozen=True)
class HistoryEvent:
    seq: int
    job_id: Optional[int]
    kind: HistoryKind
    timestamp: float
    vm_id: Optional[VmId] = None
    exit_code: Optional[int] = None
    # Client idempotency token, SUBMITTED events only.
    token: Optional[str] = None
    # Boot attributes, MACHINE_BOOT events only.
    attributes: Optional[Mapping[str, Any]] = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "seq": self.seq,
            "job_id": self.job_id,
            "kind": self.kind.value,
            "timestamp": self.timestamp,
            "vm_id": None if self.vm_id is None else [self.vm_id.host_id, self.vm_id.slot_index],
        }
        if self.exit_code is not None:
            d["exit_code"] = self.exit_code
        if self.token is not None:
            d["token"] = self.token
        if self.attributes is not None:
            d["attributes"] = dict(self.attributes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HistoryEvent":
        return cls(
            seq=int(d["seq"]),
            job_id=None if d.get("job_id") is None else int(d["job_id"]),
            kind=HistoryKind(d["kind"]),
            timestamp=float(d["timestamp"]),
            vm_id=None if d.get("vm_id") is None else VmId.coerce(d["vm_id"]),
            exit_code=d.get("exit_code"),
            token=d.get("token"),
            attributes=d.get("attributes"),
        )


TERMINAL_KINDS = frozenset({HistoryKind.COMPLETED, HistoryKind.REMOVED})

__all__ += ["TERMINAL_KINDS"]
