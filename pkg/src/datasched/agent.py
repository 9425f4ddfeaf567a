"""Node agents: one object per simulated host, owning ``vm_count`` slots.

:class:`NodeAgent` is the pull-model agent.  It heartbeats the scheduler,
accepts the matches it is offered and runs jobs as timed sleeps.  Besides
the periodic heartbeat it reports early when it has news (a job finished or
was abandoned, a slot was released), and after a report that carried news it
sends one quick follow-up so a freed slot can pick up the match the service
made for it in the meantime.  Without the early report a slot would idle for
up to a full heartbeat interval after every job.

:class:`PushAgent` runs the same starters but takes work pushed to it through
``claim()``; only the push baseline uses it.

Both run on an event loop from :mod:`datasched.runtime`, so the same code
runs under the virtual clock and in real time.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import random
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .model import JobPhase, VmId, validate_attributes
from .protocol import (
    Action,
    CompletedInfo,
    HeartbeatReport,
    HeartbeatResponse,
    ProtocolError,
    RunningInfo,
    SlotReport,
)

log = logging.getLogger(__name__)

# Host attributes that are split evenly across slots; everything else is copied.
DIVISIBLE_ATTRS = ("memory_mb", "disk_mb", "cpus")


@dataclass
class AgentConfig:
    server: str = "http://127.0.0.1:8600"
    host_id: str = "host-0"
    vm_count: int = 1
    heartbeat_interval_s: float = 60.0
    time_scale: float = 1.0
    attributes: dict[str, Any] = field(default_factory=dict)
    fault_rate: float = 0.0
    seed: int = 0
    # Delay before an early report, in already-scaled seconds.
    report_delay_s: float = 0.002
    # Where the boot counter is persisted; None keeps it in memory.
    state_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.vm_count, bool) or not isinstance(self.vm_count, int) or self.vm_count < 1:
            raise ValueError(f"vm_count must be an integer >= 1, got {self.vm_count!r}")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ValueError(f"fault_rate must be in [0, 1], got {self.fault_rate!r}")
        for name in ("heartbeat_interval_s", "time_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.report_delay_s < 0:
            raise ValueError("report_delay_s must be >= 0")
        if not self.host_id or "/" in self.host_id:
            raise ValueError(f"bad host_id {self.host_id!r}")
        self.attributes = validate_attributes(self.attributes)

    @property
    def heartbeat_interval(self) -> float:
        return self.heartbeat_interval_s / self.time_scale


def slot_attributes(host_attrs: dict[str, Any], vm_count: int, host_id: str, slot: int) -> dict[str, Any]:
    attrs: dict[str, Any] = {}
    for k, v in host_attrs.items():
        if k in DIVISIBLE_ATTRS and type(v) in (int, float):
            attrs[k] = v // vm_count if type(v) is int else v / vm_count
        else:
            attrs[k] = v
    attrs.setdefault("host", host_id)
    attrs.setdefault("slot", slot)
    return attrs


class SlotPhase(str, enum.Enum):
    UNCLAIMED = "UNCLAIMED"
    STARTING = "STARTING"
    EXECUTING = "EXECUTING"


@dataclass
class SlotState:
    vm_id: VmId
    attributes: dict[str, Any]
    phase: SlotPhase = SlotPhase.UNCLAIMED
    job: Optional[dict[str, Any]] = None
    completions: list[CompletedInfo] = field(default_factory=list)
    attrs_sent: bool = False
    # Bumped on every start/release so a stale starter timer can tell it lost.
    generation: int = 0
    timer: Any = None

    @property
    def job_id(self) -> Optional[int]:
        return None if self.job is None else int(self.job["job_id"])


class _StarterHost:
    """Slots plus the in-process starters that 'run' jobs as timed sleeps."""

    def __init__(self, config: AgentConfig, loop, emit: Optional[Callable[[dict], None]] = None):
        self.config = config
        self.loop = loop
        self._emit = emit
        self.rng = random.Random(f"{config.seed}:{config.host_id}")
        self.slots = [
            SlotState(VmId(config.host_id, i), slot_attributes(config.attributes, config.vm_count, config.host_id, i))
            for i in range(config.vm_count)
        ]
        self._by_vm = {s.vm_id: s for s in self.slots}
        self.counters = {"accepted": 0, "completed": 0, "abandoned": 0, "released": 0, "stale": 0, "refused": 0}
        self.stopped = True

    def emit(self, event: dict[str, Any]) -> None:
        if self._emit is not None:
            self._emit(event)

    def slot(self, vm_id) -> Optional[SlotState]:
        return self._by_vm.get(VmId.coerce(vm_id))

    def _start_job(self, slot: SlotState, job: dict[str, Any]) -> None:
        slot.generation += 1
        slot.phase = SlotPhase.STARTING
        slot.job = dict(job)
        self.counters["accepted"] += 1
        self.loop.call_soon(self._execute, slot, slot.generation)

    def _execute(self, slot: SlotState, generation: int) -> None:
        if slot.generation != generation or self.stopped:
            return
        slot.phase = SlotPhase.EXECUTING
        duration = float(slot.job["duration_s"]) / self.config.time_scale
        slot.timer = self.loop.call_later(duration, self._finish, slot, generation)

    def _finish(self, slot: SlotState, generation: int) -> None:
        if slot.generation != generation or self.stopped:
            return
        job_id = slot.job_id
        now = self.loop.time()
        abandoned = self.rng.random() < self.config.fault_rate
        slot.phase = SlotPhase.UNCLAIMED
        slot.job = None
        slot.timer = None
        if abandoned:
            self.counters["abandoned"] += 1
            self.emit({"t": now, "event": "ABANDON", "job": job_id, "vm": [slot.vm_id.host_id, slot.vm_id.slot_index]})
        else:
            self.counters["completed"] += 1
        self._finished(slot, job_id, abandoned, now)

    def _finished(self, slot: SlotState, job_id: int, abandoned: bool, now: float) -> None:
        raise NotImplementedError

    def _kill(self, slot: SlotState) -> None:
        slot.generation += 1
        if slot.timer is not None:
            slot.timer.cancel()
        slot.timer = None
        slot.phase = SlotPhase.UNCLAIMED
        slot.job = None


# --------------------------------------------------------------------------
# Transports


class DirectTransport:
    """In-process calls into a service; ``resolve()`` returns None while it is down.

    ``roundtrip=True`` pushes every message through its JSON encoding, so the
    codec is exercised without sockets.
    """

    def __init__(self, resolve: Callable[[], Any], roundtrip: bool = False):
        self._resolve = resolve
        self.roundtrip = roundtrip

    def _service(self):
        svc = self._resolve()
        if svc is None:
            raise ConnectionError("scheduler unavailable")
        return svc

    def heartbeat(self, report: HeartbeatReport) -> HeartbeatResponse:
        from .service import ServiceUnavailable

        svc = self._service()
        if self.roundtrip:
            report = HeartbeatReport.from_json(json.loads(json.dumps(report.to_json())))
        try:
            resp = svc.handle_heartbeat(report)
        except ServiceUnavailable as exc:
            raise ConnectionError(str(exc)) from exc
        if self.roundtrip:
            resp = HeartbeatResponse.from_json(json.loads(json.dumps(resp.to_json())))
        return resp

    def accept_match(self, job_id: int, vm_id: VmId) -> str:
        from .service import ServiceUnavailable

        try:
            return self._service().accept_match(job_id, vm_id)
        except ServiceUnavailable as exc:
            raise ConnectionError(str(exc)) from exc


def post_json(url: str, body: Any, timeout: float = 10.0) -> Any:
    """POST a JSON body; returns the decoded reply or raises ConnectionError/ProtocolError."""
    data = json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method="POST", headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read() or b"null")
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode(errors="replace")
        if exc.code >= 500:
            raise ConnectionError(f"{url}: HTTP {exc.code} {detail}") from None
        raise ProtocolError(f"{url}: HTTP {exc.code} {detail}") from None
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise ConnectionError(f"{url}: {exc}") from None


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def heartbeat(self, report: HeartbeatReport) -> HeartbeatResponse:
        return HeartbeatResponse.from_json(post_json(self.base + "/v1/heartbeat", report.to_json(), self.timeout))

    def accept_match(self, job_id: int, vm_id: VmId) -> str:
        reply = post_json(self.base + "/v1/accept-match", {"job_id": job_id, "vm_id": [vm_id.host_id, vm_id.slot_index]}, self.timeout)
        return reply["status"]


# --------------------------------------------------------------------------
# Pull agent


class NodeAgent(_StarterHost):
    def __init__(self, config: AgentConfig, transport, loop, emit: Optional[Callable[[dict], None]] = None, boot_epoch: int = 0):
        super().__init__(config, loop, emit)
        self.transport = transport
        self.boot_epoch = boot_epoch
        self.counters.update({"heartbeats": 0, "failures": 0})
        self._timer = None
        self._timer_at = math.inf
        self._news = False
        self._failures = 0

    @property
    def interval(self) -> float:
        return self.config.heartbeat_interval

    def _next_epoch(self) -> int:
        if self.config.state_dir is None:
            return self.boot_epoch + 1
        path = Path(self.config.state_dir) / f"{self.config.host_id}.epoch"
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            prev = int(path.read_text().strip() or 0)
        except (OSError, ValueError):
            prev = 0
        epoch = max(prev, self.boot_epoch) + 1
        tmp = path.with_suffix(".tmp")
        tmp.write_text(str(epoch))
        tmp.replace(path)
        return epoch

    def start(self, first_delay: float = 0.0) -> None:
        """Boot: new epoch, attributes resent, first heartbeat after ``first_delay``."""
        self.boot_epoch = self._next_epoch()
        for s in self.slots:
            s.attrs_sent = False
        self.stopped = False
        self._news = True
        self._schedule(first_delay)

    def stop(self) -> None:
        """Stop heartbeating; running starters are killed (the host went away)."""
        self.stopped = True
        if self._timer is not None:
            self._timer.cancel()
        self._timer, self._timer_at = None, math.inf
        for s in self.slots:
            self._kill(s)
            s.completions.clear()

    def _schedule(self, delay: float) -> None:
        when = self.loop.time() + delay
        if self._timer is not None:
            if self._timer_at <= when:
                return
            self._timer.cancel()
        self._timer_at = when
        self._timer = self.loop.call_at(when, self._fire)

    def _fire(self) -> None:
        self._timer, self._timer_at = None, math.inf
        if not self.stopped:
            self.heartbeat()

    def _urgent(self) -> None:
        self._news = True
        if not self.stopped:
            self._schedule(self.config.report_delay_s)

    def build_report(self) -> HeartbeatReport:
        entries = []
        for s in self.slots:
            running = None
            if s.phase is not SlotPhase.UNCLAIMED:
                phase = JobPhase.STARTING if s.phase is SlotPhase.STARTING else JobPhase.EXECUTING
                running = RunningInfo(s.job_id, phase)
            entries.append(SlotReport(
                s.vm_id,
                None if s.attrs_sent else dict(s.attributes),
                running,
                tuple(s.completions),
            ))
        return HeartbeatReport(self.config.host_id, self.boot_epoch, tuple(entries))

    def heartbeat(self) -> None:
        report = self.build_report()
        had_news = self._news
        self._news = False
        self.counters["heartbeats"] += 1
        try:
            resp = self.transport.heartbeat(report)
        except (ConnectionError, ProtocolError) as exc:
            self._news = self._news or had_news
            self._failures += 1
            self.counters["failures"] += 1
            backoff = min(self.interval, min(0.5, self.interval / 10) * 2 ** (self._failures - 1))
            log.debug("%s: heartbeat failed (%s); retry in %.3fs", self.config.host_id, exc, backoff)
            self._schedule(backoff)
            return
        self._failures = 0
        for entry, s in zip(report.entries, self.slots):
            s.attrs_sent = True
            if entry.completed:
                delivered = set(id(c) for c in entry.completed)
                s.completions = [c for c in s.completions if id(c) not in delivered]
        self.apply_directives(resp)
        if self.stopped:
            return
        if (had_news or self._news) and any(s.phase is SlotPhase.UNCLAIMED for s in self.slots):
            self._schedule(self.config.report_delay_s)
        else:
            self._schedule(self.interval)

    def apply_directives(self, resp: HeartbeatResponse) -> None:
        for d in resp.directives:
            slot = self.slot(d.vm_id)
            if slot is None:
                log.warning("%s: directive for foreign slot %s", self.config.host_id, d.vm_id)
                continue
            if d.action is Action.MATCHINFO:
                if slot.phase is not SlotPhase.UNCLAIMED or d.job is None:
                    self.counters["refused"] += 1
                    log.warning("%s: MATCHINFO for occupied slot %s refused", self.config.host_id, slot.vm_id)
                    continue
                job_id = int(d.job["job_id"])
                try:
                    status = self.transport.accept_match(job_id, slot.vm_id)
                except (ConnectionError, ProtocolError) as exc:
                    # The match stays live server-side; it is offered again next heartbeat.
                    log.debug("%s: accept_match failed: %s", self.config.host_id, exc)
                    continue
                if status == "OK":
                    self._start_job(slot, d.job)
                else:
                    self.counters["stale"] += 1
                    self._news = True
            elif d.action is Action.RELEASE:
                if slot.job_id is not None and slot.job_id == d.job_id:
                    self._kill(slot)
                    self.counters["released"] += 1
                    self._news = True

    def _finished(self, slot: SlotState, job_id: int, abandoned: bool, now: float) -> None:
        if not abandoned:
            slot.completions.append(CompletedInfo(job_id, 0, now))
        self._urgent()


# --------------------------------------------------------------------------
# Push agent


class PushAgent(_StarterHost):
    """Slots that accept work pushed by the baseline scheduler."""

    def __init__(
        self,
        config: AgentConfig,
        loop,
        on_complete: Callable[[VmId, int, int, float], None],
        emit: Optional[Callable[[dict], None]] = None,
    ):
        super().__init__(config, loop, emit)
        self.on_complete = on_complete
        self.stopped = False

    def claim(self, vm_id, job: dict[str, Any]) -> bool:
        slot = self.slot(vm_id)
        if slot is None or slot.phase is not SlotPhase.UNCLAIMED or self.stopped:
            self.counters["refused"] += 1
            return False
        self._start_job(slot, job)
        return True

    def stop(self) -> None:
        self.stopped = True
        for s in self.slots:
            self._kill(s)

    def _finished(self, slot: SlotState, job_id: int, abandoned: bool, now: float) -> None:
        if not abandoned:
            self.on_complete(slot.vm_id, job_id, 0, now)
