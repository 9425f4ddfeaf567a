"""The scheduler service: wire requests in, store transactions out.

Every mutation is one store transaction built from the current state under
the service lock, so the journal is the complete record of what the service
did.  Agents are never contacted; whatever an agent needs to know rides on
the response to its own heartbeat.

The scheduling pass runs on a timer and, in addition, right after any
heartbeat that frees a slot while jobs are waiting.  It is deferred until the
heartbeat's own transaction has committed, so a slot learns of its match on
the following heartbeat, never on the one that freed it.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

from .expr import ExpressionSyntaxError, parse_expression
from .matchmaker import find_matches
from .model import (
    HistoryEvent,
    HistoryKind,
    JobPhase,
    JobRecord,
    JobState,
    MachineRecord,
    MachineState,
    MatchRecord,
    RunRecord,
    VmId,
    validate_attributes,
)
from .protocol import Action, Directive, HeartbeatReport, HeartbeatResponse
from .store import Commit, Relation, Store, StoreError, TupleOp

log = logging.getLogger(__name__)

J, M, MT, R, H = Relation.JOBS, Relation.MACHINES, Relation.MATCHES, Relation.RUNS, Relation.HISTORY
ins, upd, dele = TupleOp.insert, TupleOp.update, TupleOp.delete

# A run is dropped after this many consecutive reports from its slot omit it.
OMITTED_REPORTS_TO_DROP = 2


class ServiceError(Exception):
    status = 500


class ValidationError(ServiceError):
    status = 400


class BadFilter(ServiceError):
    status = 400


class NotFound(ServiceError):
    status = 404


class AlreadyTerminal(ServiceError):
    status = 409


class ServiceUnavailable(ServiceError):
    status = 503


@dataclass
class ServiceConfig:
    """Service settings.

    Intervals are given in unscaled seconds and divided by ``time_scale``; the
    service itself only ever sees the scaled values.
    """

    listen: str = "127.0.0.1:8600"
    journal_dir: Optional[str] = None
    heartbeat_interval_s: float = 60.0
    match_expiry_intervals: float = 3
    dead_node_intervals: float = 3
    schedule_interval_s: float = 1.0
    durability: str = "full"
    time_scale: float = 1.0
    max_retries: Optional[int] = None
    check: str = "incremental"
    # Snapshot the store once this many journal records have accumulated; 0 = never.
    checkpoint_every: int = 50000

    def __post_init__(self):
        for name in ("heartbeat_interval_s", "schedule_interval_s", "time_scale", "dead_node_intervals"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not self.match_expiry_intervals >= 1:
            raise ValueError("match_expiry_intervals must be >= 1")
        if self.durability not in ("full", "batched"):
            raise ValueError(f"durability must be 'full' or 'batched', got {self.durability!r}")
        if self.max_retries is not None and self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def heartbeat_interval(self) -> float:
        return self.heartbeat_interval_s / self.time_scale

    @property
    def schedule_interval(self) -> float:
        return self.schedule_interval_s / self.time_scale

    @property
    def match_ttl(self) -> float:
        return self.match_expiry_intervals * self.heartbeat_interval

    @property
    def dead_after(self) -> float:
        return self.dead_node_intervals * self.heartbeat_interval


@dataclass(frozen=True)
class ExpireCounts:
    expired_matches: int = 0
    requeued: int = 0
    dead_machines: int = 0


class _Batch:
    """Ops plus the structured events to emit once they commit."""

    __slots__ = ("ops", "events")

    def __init__(self):
        self.ops: list[TupleOp] = []
        self.events: list[dict[str, Any]] = []

    def history(self, kind: HistoryKind, now: float, job_id=None, vm_id=None, **extra) -> None:
        self.ops.append(ins(H, HistoryEvent(0, job_id, kind, now, vm_id, **extra)))


def _vm(vm: Optional[VmId]):
    return None if vm is None else [vm.host_id, vm.slot_index]


class SchedulerService:
    def __init__(
        self,
        config: ServiceConfig,
        store: Store,
        clock: Callable[[], float] = time.time,
        loop=None,
        emit: Optional[Callable[[dict], None]] = None,
        record_latency: Optional[Callable[[float, float], None]] = None,
    ):
        self.config = config
        self.store = store
        self.clock = clock
        self.loop = loop
        self._emit_fn = emit
        self._record_latency = record_latency
        self._lock = threading.RLock()
        self._handles: dict[str, Any] = {}
        self._pass_pending = False
        self._running = False
        self._stopped = False
        self.started_at = clock()
        self.counters = {"heartbeats": 0, "passes": 0, "triggered_passes": 0, "matches": 0, "unknown_completions": 0}
        self._txn_source = "-"
        self._checkpoint_lsn = store.recovery.snapshot_lsn if store.recovery is not None else 0
        store.subscribe(self._on_commit)
        # Rebuilt from history so that retries and re-registration survive restarts.
        self._tokens: dict[str, list[int]] = {}
        self._boot_attrs: dict[VmId, dict] = {}
        for ev in store.state.history.values():
            if ev.kind is HistoryKind.SUBMITTED and ev.token is not None:
                self._tokens.setdefault(ev.token, []).append(ev.job_id)
            elif ev.kind is HistoryKind.MACHINE_BOOT and ev.attributes is not None:
                self._boot_attrs[ev.vm_id] = dict(ev.attributes)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        """Begin the periodic scheduling pass and stale-state sweep on the loop."""
        if self.loop is None:
            raise RuntimeError("start() needs an event loop")
        self._running = True
        sweep = max(self.config.schedule_interval, self.config.heartbeat_interval / 2)
        self._repeat(self.config.schedule_interval, self._periodic_pass)
        self._repeat(sweep, self._periodic_expire)
        if self.config.checkpoint_every:
            self._repeat(self.config.heartbeat_interval, self._periodic_checkpoint)

    def stop(self) -> None:
        self._running = False
        self._stopped = True
        for h in self._handles.values():
            h.cancel()
        self._handles.clear()

    def _repeat(self, every: float, fn: Callable[[], None]) -> None:
        name = fn.__name__

        def tick():
            if not self._running:
                return
            try:
                fn()
            except Exception:
                log.exception("periodic task %s failed", name)
            if self._running:
                self._handles[name] = self.loop.call_later(every, tick)
        self._handles[name] = self.loop.call_later(every, tick)

    def _periodic_pass(self) -> None:
        self.scheduling_pass(self.clock())

    def _periodic_expire(self) -> None:
        self.expire_stale(self.clock())

    def _periodic_checkpoint(self) -> None:
        with self._lock:
            if self.store.last_lsn - self._checkpoint_lsn >= self.config.checkpoint_every:
                _, self._checkpoint_lsn = self.store.checkpoint()

    # -- plumbing ----------------------------------------------------------

    def emit(self, event: dict[str, Any]) -> None:
        if self._emit_fn is not None:
            self._emit_fn(event)

    def _on_commit(self, commit: Commit, ops: list[TupleOp]) -> None:
        if self._emit_fn is not None:
            self._emit_fn({"t": commit.timestamp, "event": "TXN", "txn": commit.txn_id, "ops": len(ops), "source": self._txn_source})

    def _commit(self, batch: _Batch, now: float, source: str) -> Commit:
        self._txn_source = source
        try:
            commit = self.store.execute_txn(batch.ops, timestamp=now)
        except StoreError:
            raise
        except OSError as exc:
            raise ServiceUnavailable(f"store write failed: {exc}") from exc
        for ev in batch.events:
            self.emit(ev)
        return commit

    # -- submission and removal -------------------------------------------

    def submit_job(
        self,
        owner: str,
        duration_s: float,
        count: int = 1,
        requirements: str = "true",
        rank: Optional[str] = None,
        attributes: Optional[dict] = None,
        token: Optional[str] = None,
    ) -> list[int]:
        if not isinstance(owner, str) or not owner:
            raise ValidationError("owner must be a non-empty string")
        if isinstance(duration_s, bool) or not isinstance(duration_s, (int, float)) or not (math.isfinite(duration_s) and duration_s > 0):
            raise ValidationError(f"duration_s must be a positive number, got {duration_s!r}")
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise ValidationError(f"count must be an integer >= 1, got {count!r}")
        try:
            req = parse_expression(requirements or "true")
            rk = None if rank in (None, "") else parse_expression(rank)
        except ExpressionSyntaxError as exc:
            raise ValidationError(f"bad expression: {exc}") from None
        try:
            attrs = validate_attributes(attributes or {})
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        with self._lock:
            if token is not None and token in self._tokens:
                return list(self._tokens[token])
            now = self.clock()
            base = self.store.state.max_job_id + 1
            ids = list(range(base, base + count))
            batch = _Batch()
            for job_id in ids:
                batch.ops.append(ins(J, JobRecord(job_id, owner, float(duration_s), req, rk, attrs, submit_time=now)))
                batch.history(HistoryKind.SUBMITTED, now, job_id, token=token)
                batch.events.append({"t": now, "event": "SUBMITTED", "job": job_id})
            try:
                self._commit(batch, now, "submit")
            except StoreError as exc:
                raise ServiceUnavailable(str(exc)) from exc
            if token is not None:
                self._tokens[token] = ids
            return ids

    def remove_job(self, job_id: int) -> str:
        """Remove a job; returns ``"REMOVED"`` or ``"RELEASE_PENDING"`` for a running job."""
        with self._lock:
            now = self.clock()
            st = self.store.state
            job = st.jobs.get(job_id)
            if job is None:
                if 0 < job_id <= st.max_job_id:
                    raise AlreadyTerminal(f"job {job_id} already finished")
                raise NotFound(f"no job {job_id}")
            batch = _Batch()
            if job.state is JobState.RUNNING:
                if job.release_requested:
                    return "RELEASE_PENDING"
                batch.ops.append(upd(J, replace(job, release_requested=True)))
                self._commit(batch, now, "remove")
                return "RELEASE_PENDING"
            if job.state is JobState.MATCHED:
                match = st.matches[job_id]
                machine = st.machines[match.vm_id]
                batch.ops.append(dele(MT, job_id))
                batch.ops.append(upd(M, replace(machine, state=MachineState.UNCLAIMED)))
            batch.ops.append(dele(J, job_id))
            batch.history(HistoryKind.REMOVED, now, job_id)
            batch.events.append({"t": now, "event": "REMOVED", "job": job_id})
            self._commit(batch, now, "remove")
            return "REMOVED"

    # -- helpers shared by heartbeat handling and the sweeps ----------------

    def _drop_run(self, batch: _Batch, run: RunRecord, job: JobRecord, now: float, cause: str) -> None:
        """Ops that take a run away from its slot and requeue (or retire) the job."""
        batch.ops.append(dele(R, run.job_id))
        batch.history(HistoryKind.DROPPED, now, job.job_id, run.vm_id)
        batch.events.append({"t": now, "event": "DROPPED", "job": job.job_id, "vm": _vm(run.vm_id), "cause": cause})
        limit = self.config.max_retries
        if job.release_requested or (limit is not None and job.retry_count + 1 > limit):
            batch.ops.append(dele(J, job.job_id))
            batch.history(HistoryKind.REMOVED, now, job.job_id)
            batch.events.append({"t": now, "event": "REMOVED", "job": job.job_id})
        else:
            batch.ops.append(upd(J, replace(job, state=JobState.IDLE, retry_count=job.retry_count + 1, phase=None)))

    def _unmatch(self, batch: _Batch, match: MatchRecord, job: JobRecord, now: float) -> None:
        batch.ops.append(dele(MT, match.job_id))
        batch.ops.append(upd(J, replace(job, state=JobState.IDLE)))
        batch.events.append({"t": now, "event": "MATCH_EXPIRED", "job": job.job_id, "vm": _vm(match.vm_id)})

    # -- heartbeats --------------------------------------------------------

    def handle_heartbeat(self, report: HeartbeatReport) -> HeartbeatResponse:
        t0 = time.perf_counter()
        report.validate()
        with self._lock:
            now = self.clock()
            st = self.store.state
            batch = _Batch()
            directives: list[Directive] = []
            freed = False
            for entry in report.entries:
                vm = entry.vm_id
                machine = st.machines.get(vm)
                slot_ops = _Batch()
                restarted = False
                if machine is None:
                    attrs = entry.attributes if entry.attributes is not None else self._boot_attrs.get(vm, {})
                    machine = MachineRecord(vm, dict(attrs), MachineState.UNCLAIMED, now, report.boot_epoch)
                    first = ins(M, machine)
                    freed = True
                    if entry.attributes is not None:
                        slot_ops.history(HistoryKind.MACHINE_BOOT, now, None, vm, attributes=dict(attrs))
                        self._boot_attrs[vm] = dict(attrs)
                else:
                    first = None
                    if machine.boot_epoch != report.boot_epoch:
                        # The host restarted: whatever it held is gone.
                        self._clear_slot(slot_ops, vm, now, "host-restart")
                        attrs = entry.attributes if entry.attributes is not None else machine.attributes
                        machine = replace(machine, attributes=dict(attrs), state=MachineState.UNCLAIMED, boot_epoch=report.boot_epoch)
                        slot_ops.history(HistoryKind.MACHINE_BOOT, now, None, vm, attributes=dict(attrs))
                        self._boot_attrs[vm] = dict(attrs)
                        freed = True
                        restarted = True
                    machine = replace(machine, last_heartbeat=now)

                run_id = st.run_by_vm.get(vm)
                # After a restart any run on the slot was just dropped above.
                run = None if run_id is None or restarted else st.runs[run_id]
                handled_run = False
                directive: Optional[Directive] = None

                for c in entry.completed:
                    if run is not None and not handled_run and c.job_id == run.job_id:
                        job = st.jobs[run.job_id]
                        slot_ops.ops.append(dele(R, run.job_id))
                        slot_ops.ops.append(dele(J, run.job_id))
                        slot_ops.history(HistoryKind.COMPLETED, now, run.job_id, vm, exit_code=c.exit_code)
                        slot_ops.events.append({"t": now, "event": "COMPLETED", "job": job.job_id, "vm": _vm(vm), "exit_code": c.exit_code})
                        machine = replace(machine, state=MachineState.UNCLAIMED)
                        handled_run = True
                        freed = True
                    else:
                        self.counters["unknown_completions"] += 1
                        log.info("completion for job %s on %s has no run; acknowledged", c.job_id, vm)

                if entry.running is not None:
                    jid = entry.running.job_id
                    if run is not None and not handled_run and run.job_id == jid:
                        job = st.jobs[jid]
                        handled_run = True
                        if job.release_requested:
                            directive = Directive(vm, Action.RELEASE, job_id=jid)
                            slot_ops.ops.append(dele(R, jid))
                            slot_ops.ops.append(dele(J, jid))
                            slot_ops.history(HistoryKind.REMOVED, now, jid, vm)
                            slot_ops.events.append({"t": now, "event": "REMOVED", "job": jid, "vm": _vm(vm)})
                            machine = replace(machine, state=MachineState.UNCLAIMED)
                            freed = True
                        else:
                            if run.missed_reports:
                                slot_ops.ops.append(upd(R, replace(run, missed_reports=0, last_seen=now)))
                            if job.phase is not entry.running.phase:
                                slot_ops.ops.append(upd(J, replace(job, phase=entry.running.phase)))
                    else:
                        # Running something the service does not know about (removed, or
                        # dropped as dead): tell the slot to let it go.
                        directive = Directive(vm, Action.RELEASE, job_id=jid)

                if run is not None and not handled_run:
                    missed = run.missed_reports + 1
                    if missed >= OMITTED_REPORTS_TO_DROP:
                        self._drop_run(slot_ops, run, st.jobs[run.job_id], now, "omitted")
                        machine = replace(machine, state=MachineState.UNCLAIMED)
                        freed = True
                    else:
                        slot_ops.ops.append(upd(R, replace(run, missed_reports=missed)))

                if directive is None:
                    match_id = st.match_by_vm.get(vm)
                    match = None if match_id is None else st.matches[match_id]
                    if match is not None and match.expires_at > now and not restarted:
                        directive = Directive(vm, Action.MATCHINFO, job=st.jobs[match.job_id].descriptor())
                    else:
                        directive = Directive(vm, Action.NONE)
                directives.append(directive)

                batch.ops.append(first if first is not None else upd(M, machine))
                batch.ops.extend(slot_ops.ops)
                batch.events.extend(slot_ops.events)
            self.counters["heartbeats"] += 1
            try:
                self._commit(batch, now, "heartbeat")
            except StoreError as exc:
                log.error("heartbeat from %s rejected: %s", report.host_id, exc)
                raise ServiceUnavailable(str(exc)) from exc
            if freed and st.idle:
                self._request_pass()
        elapsed = time.perf_counter() - t0
        if self._record_latency is not None:
            self._record_latency(now, elapsed)
        return HeartbeatResponse(tuple(directives))

    def _clear_slot(self, batch: _Batch, vm: VmId, now: float, cause: str) -> None:
        st = self.store.state
        run_id = st.run_by_vm.get(vm)
        if run_id is not None:
            self._drop_run(batch, st.runs[run_id], st.jobs[run_id], now, cause)
        match_id = st.match_by_vm.get(vm)
        if match_id is not None:
            self._unmatch(batch, st.matches[match_id], st.jobs[match_id], now)

    def _request_pass(self) -> None:
        if self.loop is None or self._pass_pending:
            return
        self._pass_pending = True

        def run():
            self._pass_pending = False
            if self._stopped:
                return
            self.counters["triggered_passes"] += 1
            self.scheduling_pass(self.clock())
        self.loop.call_soon_threadsafe(run)

    # -- matching ----------------------------------------------------------

    def accept_match(self, job_id: int, vm_id) -> str:
        vm = VmId.coerce(vm_id)
        with self._lock:
            now = self.clock()
            st = self.store.state
            match = st.matches.get(job_id)
            if match is not None and match.vm_id == vm:
                job = st.jobs[job_id]
                machine = st.machines[vm]
                batch = _Batch()
                if match.expires_at <= now:
                    self._unmatch(batch, match, job, now)
                    batch.ops.append(upd(M, replace(machine, state=MachineState.UNCLAIMED)))
                    self._commit(batch, now, "accept")
                    self._request_pass()
                    return "STALE"
                batch.ops.append(dele(MT, job_id))
                batch.ops.append(ins(R, RunRecord(job_id, vm, now, now)))
                batch.ops.append(upd(J, replace(job, state=JobState.RUNNING, phase=JobPhase.STARTING)))
                batch.ops.append(upd(M, replace(machine, state=MachineState.CLAIMED)))
                batch.history(HistoryKind.STARTED, now, job_id, vm)
                batch.events.append({"t": now, "event": "STARTED", "job": job_id, "vm": _vm(vm)})
                self._commit(batch, now, "accept")
                return "OK"
            run = st.runs.get(job_id)
            if run is not None and run.vm_id == vm:
                return "OK"
            return "STALE"

    def scheduling_pass(self, now: Optional[float] = None) -> int:
        """Match idle jobs to fresh unclaimed slots; one transaction per pair."""
        with self._lock:
            now = self.clock() if now is None else now
            st = self.store.state
            self.counters["passes"] += 1
            if not st.idle or not st.unclaimed:
                return 0
            horizon = now - self.config.dead_after
            fresh = [st.machines[v] for v in st.unclaimed if st.machines[v].last_heartbeat >= horizon]
            if not fresh:
                return 0
            pairs = find_matches(self.store.iter_idle_jobs(), fresh, presorted=True)
            made = 0
            for job_id, vm in pairs:
                job = st.jobs[job_id]
                machine = st.machines[vm]
                batch = _Batch()
                batch.ops.append(ins(MT, MatchRecord(job_id, vm, now, now + self.config.match_ttl)))
                batch.ops.append(upd(J, replace(job, state=JobState.MATCHED)))
                batch.ops.append(upd(M, replace(machine, state=MachineState.MATCHED)))
                batch.history(HistoryKind.MATCHED, now, job_id, vm)
                batch.events.append({"t": now, "event": "MATCHED", "job": job_id, "vm": _vm(vm)})
                try:
                    self._commit(batch, now, "match")
                except StoreError as exc:
                    log.error("match %s -> %s skipped: %s", job_id, vm, exc)
                    continue
                made += 1
            self.counters["matches"] += made
            return made

    def expire_stale(self, now: Optional[float] = None) -> ExpireCounts:
        with self._lock:
            now = self.clock() if now is None else now
            st = self.store.state
            expired = requeued = dead = 0
            stale = [m for m in st.matches.values() if m.expires_at <= now]
            if stale:
                batch = _Batch()
                for m in sorted(stale, key=lambda m: m.job_id):
                    self._unmatch(batch, m, st.jobs[m.job_id], now)
                    batch.ops.append(upd(M, replace(st.machines[m.vm_id], state=MachineState.UNCLAIMED)))
                    expired += 1
                self._commit(batch, now, "expire")
            # A restarted service gives every machine a full window to report in.
            cutoff = now - self.config.dead_after
            silent = sorted(v for v, m in st.machines.items() if max(m.last_heartbeat, self.started_at) < cutoff)
            if silent:
                batch = _Batch()
                for vm in silent:
                    run_id = st.run_by_vm.get(vm)
                    if run_id is not None:
                        self._drop_run(batch, st.runs[run_id], st.jobs[run_id], now, "dead-node")
                        requeued += 1
                    match_id = st.match_by_vm.get(vm)
                    if match_id is not None:
                        self._unmatch(batch, st.matches[match_id], st.jobs[match_id], now)
                        expired += 1
                    batch.ops.append(dele(M, vm))
                    batch.events.append({"t": now, "event": "MACHINE_DEAD", "vm": _vm(vm)})
                    dead += 1
                self._commit(batch, now, "expire")
            if (expired or dead) and st.idle:
                self._request_pass()
            return ExpireCounts(expired, requeued, dead)

    # -- queries -----------------------------------------------------------

    def query(
        self,
        kind: str,
        state: Optional[str] = None,
        owner: Optional[str] = None,
        since: Optional[float] = None,
        job_id: Optional[int] = None,
        limit: int = 100,
        offset: int = 0,
    ) -> dict[str, Any]:
        if not isinstance(limit, int) or not isinstance(offset, int) or limit < 0 or offset < 0 or limit > 10000:
            raise BadFilter("limit must be in [0, 10000] and offset >= 0")
        with self._lock:
            st = self.store.state
            if kind == "jobs":
                if since is not None:
                    raise BadFilter("'since' applies to history only")
                try:
                    want = None if state is None else JobState(state)
                except ValueError:
                    raise BadFilter(f"unknown job state {state!r}") from None
                rows = [j for j in st.jobs.values()
                        if (want is None or j.state is want) and (owner is None or j.owner == owner)
                        and (job_id is None or j.job_id == job_id)]
                rows.sort(key=lambda j: j.job_id)
            elif kind == "machines":
                if owner is not None or since is not None or job_id is not None:
                    raise BadFilter("machines accept only a state filter")
                try:
                    want = None if state is None else MachineState(state)
                except ValueError:
                    raise BadFilter(f"unknown machine state {state!r}") from None
                rows = sorted((m for m in st.machines.values() if want is None or m.state is want), key=lambda m: m.vm_id)
            elif kind == "history":
                if owner is not None or state is not None:
                    raise BadFilter("history accepts since and job_id filters only")
                rows = [e for e in st.history.values()
                        if (since is None or e.timestamp >= since) and (job_id is None or e.job_id == job_id)]
                rows.sort(key=lambda e: e.seq)
            else:
                raise BadFilter(f"unknown query kind {kind!r}")
            page = rows[offset:offset + limit]
            return {"items": [r.to_dict() for r in page], "total": len(rows), "offset": offset, "limit": limit}

    def stats(self) -> dict[str, Any]:
        with self._lock:
            acc = self.store.state.accounting()
            acc["machines"] = len(self.store.state.machines)
            acc["unclaimed"] = len(self.store.state.unclaimed)
            acc.update(self.counters)
            return acc

