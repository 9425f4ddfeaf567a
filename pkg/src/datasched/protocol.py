"""Heartbeat messages exchanged between node agents and the scheduler.

On the wire everything is JSON; a ``vm_id`` is the two-element array
``[host_id, slot_index]``.  Example report::

    {"host_id": "h001", "boot_epoch": 3,
     "entries": [{"vm_id": ["h001", 0], "attributes": null,
                  "running": {"job_id": 17, "phase": "EXECUTING"},
                  "completed": []}]}

and response::

    {"directives": [{"vm_id": ["h001", 1], "action": "MATCHINFO",
                     "job": {"job_id": 18, "duration_s": 60.0, "attributes": {}}}]}
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .model import JobPhase, VmId, validate_attributes


class ProtocolError(ValueError):
    pass


class Action(str, enum.Enum):
    NONE = "NONE"
    MATCHINFO = "MATCHINFO"
    RELEASE = "RELEASE"


def _vm_json(vm: VmId) -> list:
    return [vm.host_id, vm.slot_index]


def _vm_parse(raw: Any) -> VmId:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 2 and isinstance(raw[0], str) and isinstance(raw[1], int)):
        raise ProtocolError(f"vm_id must be [host_id, slot_index], got {raw!r}")
    return VmId(raw[0], raw[1])


@dataclass(frozen=True)
class RunningInfo:
    job_id: int
    phase: JobPhase = JobPhase.EXECUTING


@dataclass(frozen=True)
class CompletedInfo:
    job_id: int
    exit_code: int = 0
    end_time: float = 0.0


@dataclass(frozen=True)
class SlotReport:
    vm_id: VmId
    # Full slot attributes; sent until the service has seen them once per boot.
    attributes: Optional[Mapping[str, Any]] = None
    running: Optional[RunningInfo] = None
    completed: tuple[CompletedInfo, ...] = ()


@dataclass(frozen=True)
class HeartbeatReport:
    host_id: str
    boot_epoch: int
    entries: tuple[SlotReport, ...] = ()

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.vm_id.host_id != self.host_id:
                raise ProtocolError(f"slot {e.vm_id} does not belong to host {self.host_id}")
            if e.vm_id in seen:
                raise ProtocolError(f"slot {e.vm_id} reported twice")
            seen.add(e.vm_id)
            if e.running is not None and any(c.job_id == e.running.job_id for c in e.completed):
                raise ProtocolError(f"job {e.running.job_id} reported both running and completed")

    def to_json(self) -> dict[str, Any]:
        return {
            "host_id": self.host_id,
            "boot_epoch": self.boot_epoch,
            "entries": [
                {
                    "vm_id": _vm_json(e.vm_id),
                    "attributes": None if e.attributes is None else dict(e.attributes),
                    "running": None if e.running is None else {"job_id": e.running.job_id, "phase": e.running.phase.value},
                    "completed": [{"job_id": c.job_id, "exit_code": c.exit_code, "end_time": c.end_time} for c in e.completed],
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "HeartbeatReport":
        try:
            entries = []
            for e in d["entries"]:
                running = e.get("running")
                attrs = e.get("attributes")
                entries.append(SlotReport(
                    vm_id=_vm_parse(e["vm_id"]),
                    attributes=None if attrs is None else validate_attributes(attrs),
                    running=None if running is None else RunningInfo(int(running["job_id"]), JobPhase(running["phase"])),
                    completed=tuple(
                        CompletedInfo(int(c["job_id"]), int(c.get("exit_code", 0)), float(c.get("end_time", 0.0)))
                        for c in e.get("completed") or ()
                    ),
                ))
            report = cls(str(d["host_id"]), int(d["boot_epoch"]), tuple(entries))
        except ProtocolError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed heartbeat: {exc}") from None
        report.validate()
        return report


@dataclass(frozen=True)
class Directive:
    vm_id: VmId
    action: Action
    # MATCHINFO: the job descriptor (job_id, duration_s, attributes).
    job: Optional[Mapping[str, Any]] = None
    # RELEASE: the job the slot must abandon.
    job_id: Optional[int] = None


@dataclass(frozen=True)
class HeartbeatResponse:
    directives: tuple[Directive, ...] = field(default_factory=tuple)

    def to_json(self) -> dict[str, Any]:
        out = []
        for d in self.directives:
            item: dict[str, Any] = {"vm_id": _vm_json(d.vm_id), "action": d.action.value}
            if d.job is not None:
                item["job"] = dict(d.job)
            if d.job_id is not None:
                item["job_id"] = d.job_id
            out.append(item)
        return {"directives": out}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "HeartbeatResponse":
        try:
            return cls(tuple(
                Directive(_vm_parse(x["vm_id"]), Action(x["action"]), x.get("job"), x.get("job_id"))
                for x in d["directives"]
            ))
        except ProtocolError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed heartbeat response: {exc}") from None
