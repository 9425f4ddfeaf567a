"""Push-model baseline: a single-threaded schedd with a job throttle.

The schedd keeps the whole job queue in memory (and journaled in the same
store the pull service uses), and once per tick it

1. accrues throttle budget,
2. scans the entire queue, working out for every idle job which free slot
   it would go to (requirements plus rank over all free slots),
3. pushes up to ``floor(budget)`` of those jobs, oldest first, to their
   slots through the agents' claim call, recording a shadow per run, and
4. compacts the journal (snapshot + prune) every ``compact_every``
   transactions.

Nothing here sleeps artificially.  The per-tick scan grows linearly with the
queue, and once a tick takes longer than the tick period the throttle can no
longer be honoured; the achieved start rate then falls with queue length.
All state is owned by one loop; agents and HTTP handlers only post work to
it.
"""

from __future__ import annotations

import logging
import math
import random
import shutil
import tempfile
import time
import traceback
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .agent import AgentConfig, PushAgent
from .expr import ExpressionSyntaxError, compile_expression, is_true, parse_expression
from .model import (
    HistoryEvent,
    HistoryKind,
    JobPhase,
    JobRecord,
    JobState,
    MachineRecord,
    MachineState,
    RunRecord,
    VmId,
    validate_attributes,
)
from .runtime import RealTimeLoop
from .service import ValidationError
from .store import Relation, Store, TupleOp

log = logging.getLogger(__name__)

J, M, R, H = Relation.JOBS, Relation.MACHINES, Relation.RUNS, Relation.HISTORY
ins, upd, dele = TupleOp.insert, TupleOp.update, TupleOp.delete


@dataclass
class ThrottleState:
    """Token bucket that refills at ``rate`` per second, capped at one tick's worth.

    On top of the bucket, a start is refused if it would put more than
    ``floor(rate * window_s)`` starts inside the trailing window.
    """

    rate: float
    tick_s: float = 1.0
    window_s: float = 10.0
    budget: float = 0.0
    last: Optional[float] = None
    recent: deque = field(default_factory=deque)

    def __post_init__(self):
        if not (self.rate > 0 and self.tick_s > 0 and self.window_s > 0):
            raise ValueError("rate, tick_s and window_s must be positive")

    @property
    def cap(self) -> float:
        return max(1.0, self.rate * self.tick_s)

    def accrue(self, now: float) -> None:
        if self.last is not None and now > self.last:
            self.budget = min(self.cap, self.budget + self.rate * (now - self.last))
        self.last = now if self.last is None else max(self.last, now)

    def allowance(self, now: float) -> int:
        while self.recent and self.recent[0] <= now - self.window_s:
            self.recent.popleft()
        window_left = math.floor(self.rate * self.window_s + 1e-9) - len(self.recent)
        return max(0, min(math.floor(self.budget + 1e-9), window_left))

    def consume(self, now: float) -> None:
        self.budget -= 1.0
        self.recent.append(now)


@dataclass
class ShadowRecord:
    job_id: int
    vm_id: VmId
    spawn_time: float
    last_status: str = "RUNNING"


@dataclass
class SlotEntry:
    vm_id: VmId
    attributes: dict[str, Any]
    claim: Callable[[VmId, dict], bool]
    job_id: Optional[int] = None


@dataclass(frozen=True)
class StartEvent:
    t: float
    job_id: int
    vm_id: VmId
    queue_length: int


class Schedd:
    def __init__(
        self,
        store: Store,
        throttle_rate: float = 0.5,
        tick_s: float = 1.0,
        compact_every: int = 500,
        scan: str = "full",
        compaction: bool = True,
        clock: Callable[[], float] = time.monotonic,
        emit: Optional[Callable[[dict], None]] = None,
    ):
        if scan not in ("full", "indexed"):
            raise ValueError("scan must be 'full' or 'indexed'")
        self.store = store
        self.throttle = ThrottleState(throttle_rate, tick_s)
        self.tick_s = tick_s
        self.compact_every = compact_every
        self.scan = scan
        self.compaction = compaction
        self.clock = clock
        self._emit = emit
        # The in-memory queue: every job not yet finished, in submit order.
        self.queue: dict[int, JobRecord] = {}
        self.slots: dict[VmId, SlotEntry] = {}
        self.shadows: dict[int, ShadowRecord] = {}
        self.ops_since_compact = 0
        self.counters = {"ticks": 0, "starts": 0, "completions": 0, "refused": 0, "compactions": 0, "duplicates": 0}
        self.scan_seconds = 0.0
        self.compact_seconds = 0.0
        st = store.state
        for job_id in sorted(st.jobs):
            self.queue[job_id] = st.jobs[job_id]
        for run in st.runs.values():
            self.shadows[run.job_id] = ShadowRecord(run.job_id, run.vm_id, run.started_at)

    def emit(self, ev: dict) -> None:
        if self._emit is not None:
            self._emit(ev)

    def _txn(self, ops: list[TupleOp], now: float) -> None:
        self.store.execute_txn(ops, timestamp=now)
        self.ops_since_compact += 1
        if self.compaction and self.compact_every and self.ops_since_compact >= self.compact_every:
            t0 = time.perf_counter()
            self.store.checkpoint(prune=True)
            self.compact_seconds += time.perf_counter() - t0
            self.counters["compactions"] += 1
            self.ops_since_compact = 0

    # -- registration and submission --------------------------------------

    def register_slot(self, vm_id, attributes: dict[str, Any], claim: Callable[[VmId, dict], bool]) -> None:
        vm = VmId.coerce(vm_id)
        now = self.clock()
        existing = self.store.state.machines.get(vm)
        if existing is not None and existing.state is not MachineState.UNCLAIMED:
            # A re-registering host lost whatever it was running.
            run = self.store.state.runs.get(self.store.state.run_by_vm.get(vm))
            if run is not None:
                self._requeue(run, now)
            existing = self.store.state.machines.get(vm)
        rec = MachineRecord(vm, dict(attributes), MachineState.UNCLAIMED, now, 0)
        self._txn([upd(M, rec) if existing is not None else ins(M, rec)], now)
        self.slots[vm] = SlotEntry(vm, dict(attributes), claim)

    def _requeue(self, run: RunRecord, now: float) -> None:
        job = self.store.state.jobs[run.job_id]
        machine = self.store.state.machines[run.vm_id]
        idle = replace(job, state=JobState.IDLE, phase=None, retry_count=job.retry_count + 1)
        self._txn([dele(R, run.job_id), upd(J, idle), upd(M, replace(machine, state=MachineState.UNCLAIMED)),
                   ins(H, HistoryEvent(0, run.job_id, HistoryKind.DROPPED, now, run.vm_id))], now)
        self.queue[job.job_id] = idle
        self.shadows.pop(job.job_id, None)

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
        if not isinstance(duration_s, (int, float)) or isinstance(duration_s, bool) or not duration_s > 0:
            raise ValidationError(f"duration_s must be positive, got {duration_s!r}")
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise ValidationError(f"count must be an integer >= 1, got {count!r}")
        try:
            req = parse_expression(requirements or "true")
            rk = None if not rank else parse_expression(rank)
            attrs = validate_attributes(attributes or {})
        except (ExpressionSyntaxError, ValueError) as exc:
            raise ValidationError(str(exc)) from None
        now = self.clock()
        base = self.store.state.max_job_id + 1
        ops = []
        jobs = []
        for job_id in range(base, base + count):
            job = JobRecord(job_id, owner, float(duration_s), req, rk, attrs, submit_time=now)
            jobs.append(job)
            ops.append(ins(J, job))
            ops.append(ins(H, HistoryEvent(0, job_id, HistoryKind.SUBMITTED, now, token=token)))
        self._txn(ops, now)
        for job in jobs:
            self.queue[job.job_id] = job
            self.emit({"t": now, "event": "SUBMITTED", "job": job.job_id})
        return [j.job_id for j in jobs]

    # -- the tick ----------------------------------------------------------

    def _best_slot(self, job: JobRecord, job_attrs: dict, free: Sequence[SlotEntry]) -> Optional[SlotEntry]:
        req = compile_expression(job.requirements)
        rank = None if job.rank is None else compile_expression(job.rank)
        best, best_rank = None, 0.0
        for slot in free:
            if not is_true(req(job_attrs, slot.attributes)):
                continue
            r = 0.0
            if rank is not None:
                v = rank(job_attrs, slot.attributes)
                r = float(v) if type(v) in (int, float) else 0.0
            if best is None or r > best_rank:
                best, best_rank = slot, r
        return best

    def schedd_tick(self, now: Optional[float] = None) -> list[StartEvent]:
        now = self.clock() if now is None else now
        self.counters["ticks"] += 1
        self.throttle.accrue(now)
        allowed = self.throttle.allowance(now)
        free = [s for s in self.slots.values() if s.job_id is None]
        if allowed <= 0 or not free or not self.queue:
            return []
        t0 = time.perf_counter()
        # Work out a placement for every idle job in the queue, oldest first.
        placements: list[tuple[JobRecord, SlotEntry]] = []
        if self.scan == "full":
            for job in self.queue.values():
                if job.state is JobState.IDLE:
                    slot = self._best_slot(job, job.evaluation_attrs(), free)
                    if slot is not None:
                        placements.append((job, slot))
        else:
            for job in self.store.iter_idle_jobs():
                if len(placements) >= allowed:
                    break
                slot = self._best_slot(job, job.evaluation_attrs(), free)
                if slot is not None:
                    placements.append((job, slot))
        self.scan_seconds += time.perf_counter() - t0

        starts: list[StartEvent] = []
        taken: set = set()
        for job, slot in placements:
            if len(starts) >= allowed:
                break
            if slot.vm_id in taken:
                # Its preferred slot went to an older job this tick; settle for any other.
                slot = self._best_slot(job, job.evaluation_attrs(), [s for s in free if s.vm_id not in taken])
                if slot is None:
                    continue
            if not self._start(job, slot, now):
                taken.add(slot.vm_id)
                continue
            taken.add(slot.vm_id)
            starts.append(StartEvent(now, job.job_id, slot.vm_id, len(self.queue)))
        return starts

    def _start(self, job: JobRecord, slot: SlotEntry, now: float) -> bool:
        try:
            accepted = slot.claim(slot.vm_id, job.descriptor())
        except Exception as exc:  # network failure counts as a refusal
            log.warning("claim of %s failed: %s", slot.vm_id, exc)
            accepted = False
        if not accepted:
            self.counters["refused"] += 1
            return False
        machine = self.store.state.machines[slot.vm_id]
        running = replace(job, state=JobState.RUNNING, phase=JobPhase.EXECUTING)
        self._txn([
            upd(J, running),
            ins(R, RunRecord(job.job_id, slot.vm_id, now, now)),
            upd(M, replace(machine, state=MachineState.CLAIMED)),
            ins(H, HistoryEvent(0, job.job_id, HistoryKind.STARTED, now, slot.vm_id)),
        ], now)
        self.queue[job.job_id] = running
        slot.job_id = job.job_id
        self.shadows[job.job_id] = ShadowRecord(job.job_id, slot.vm_id, now)
        self.throttle.consume(now)
        self.counters["starts"] += 1
        vm = [slot.vm_id.host_id, slot.vm_id.slot_index]
        self.emit({"t": now, "event": "MATCHED", "job": job.job_id, "vm": vm})
        self.emit({"t": now, "event": "STARTED", "job": job.job_id, "vm": vm})
        return True

    def handle_completion(self, job_id: int, exit_code: int = 0, now: Optional[float] = None) -> bool:
        now = self.clock() if now is None else now
        shadow = self.shadows.get(job_id)
        if shadow is None:
            self.counters["duplicates"] += 1
            log.info("completion for unknown job %s ignored", job_id)
            return False
        machine = self.store.state.machines[shadow.vm_id]
        self._txn([
            dele(R, job_id),
            dele(J, job_id),
            upd(M, replace(machine, state=MachineState.UNCLAIMED)),
            ins(H, HistoryEvent(0, job_id, HistoryKind.COMPLETED, now, shadow.vm_id, exit_code=exit_code)),
        ], now)
        del self.shadows[job_id]
        self.queue.pop(job_id, None)
        slot = self.slots.get(shadow.vm_id)
        if slot is not None and slot.job_id == job_id:
            slot.job_id = None
        self.counters["completions"] += 1
        self.emit({"t": now, "event": "COMPLETED", "job": job_id, "vm": [shadow.vm_id.host_id, shadow.vm_id.slot_index],
                   "exit_code": exit_code})
        return True

    def running_count(self) -> int:
        return sum(1 for s in self.slots.values() if s.job_id is not None)


class ScheddRunner:
    """Drives a Schedd's ticks on a loop; ``tick_log`` records every tick."""

    def __init__(self, schedd: Schedd, loop, on_tick: Optional[Callable[[list], None]] = None):
        self.schedd = schedd
        self.loop = loop
        self.on_tick = on_tick
        self.tick_log: list[tuple[float, float, int, int]] = []  # (start, end, idle jobs queued, starts)
        self._handle = None
        self._running = False

    def start(self, first_delay: float = 0.0) -> None:
        self._running = True
        self._handle = self.loop.call_later(first_delay, self._tick)

    def stop(self) -> None:
        self._running = False
        if self._handle is not None:
            self._handle.cancel()

    def _tick(self) -> None:
        if not self._running:
            return
        start = self.loop.time()
        qlen = len(self.schedd.queue) - len(self.schedd.shadows)
        starts = self.schedd.schedd_tick(start)
        end = self.loop.time()
        self.tick_log.append((start, end, qlen, len(starts)))
        if self.on_tick is not None:
            self.on_tick(starts)
        end = self.loop.time()
        # Next tick one period after this one began, or right away if we overran.
        self._handle = self.loop.call_at(max(start + self.schedd.tick_s, end), self._tick)


# --------------------------------------------------------------------------
# Queue-length sweep


MEASURE_REQUIREMENTS = 'machine.memory_mb >= job.request_memory && machine.arch == "x86_64" && machine.os == "linux"'
MEASURE_RANK = "machine.memory_mb + machine.cpus * 100"


@dataclass
class ThroughputSample:
    queue_length: int
    achieved_rate: float
    starts: int
    elapsed_s: float
    ticks: int
    mean_tick_s: float

    def row(self) -> tuple:
        return (self.queue_length, self.achieved_rate, self.starts, self.elapsed_s, self.ticks, self.mean_tick_s)


SAMPLE_COLUMNS = ("queue_length", "achieved_rate", "starts", "elapsed_s", "ticks", "mean_tick_s")


def _measure_cluster(loop, schedd: Schedd, slots: int, job_duration_s: float, seed: int) -> list[PushAgent]:
    rng = random.Random(seed)
    agents = []
    per_host = 8
    for h in range(math.ceil(slots / per_host)):
        n = min(per_host, slots - h * per_host)
        attrs = {"memory_mb": rng.choice([8192, 16384, 32768]), "cpus": 8, "arch": "x86_64", "os": "linux"}

        def done(vm, job_id, code, now, _s=schedd):
            loop.call_soon(_s.handle_completion, job_id, code)
        agent = PushAgent(AgentConfig(host_id=f"p{h:03d}", vm_count=n, attributes=attrs), loop, done)
        agents.append(agent)
        for s in agent.slots:
            schedd.register_slot(s.vm_id, s.attributes, agent.claim)
    return agents


def _preload(schedd: Schedd, n: int, duration_s: float, chunk: int = 2000) -> None:
    left = n
    while left > 0:
        k = min(chunk, left)
        schedd.submit_job("bench", duration_s, k, MEASURE_REQUIREMENTS, MEASURE_RANK, {"request_memory": 1024})
        left -= k


def measure_point(
    queue_length: int,
    throttle: float = 2.0,
    slots: int = 64,
    job_duration_s: float = 3600.0,
    min_ticks: int = 3,
    min_seconds: float = 5.0,
    compact_every: int = 500,
    scan: str = "full",
    compaction: bool = True,
    durability: str = "full",
    seed: int = 0,
) -> ThroughputSample:
    """Hold ``queue_length`` idle jobs in the queue and measure the schedd's real-time start rate.

    Every started job is replaced right after the tick, so the scan always
    sees the same number of idle jobs.  ``slots`` must exceed the number of
    starts in the measurement for the throttle, not the cluster, to bind.
    """
    tmp = Path(tempfile.mkdtemp(prefix="datasched-baseline-"))
    try:
        store = Store(tmp, durability=durability, check="off")
        loop = RealTimeLoop(time.monotonic)
        schedd = Schedd(store, throttle, 1.0, compact_every, scan, compaction, clock=loop.time)
        agents = _measure_cluster(loop, schedd, slots, job_duration_s, seed)
        _preload(schedd, queue_length, job_duration_s)
        def top_up(starts):
            if starts:
                schedd.submit_job("bench", job_duration_s, len(starts), MEASURE_REQUIREMENTS, MEASURE_RANK,
                                  {"request_memory": 1024})
        runner = ScheddRunner(schedd, loop, top_up)
        runner.start()
        t_begin = loop.time()

        def enough() -> bool:
            log_ = runner.tick_log
            return len(log_) > min_ticks and log_[-1][1] - t_begin >= min_seconds

        loop.run(stop_when=enough, until=t_begin + max(60.0, 20 * min_seconds))
        runner.stop()
        for a in agents:
            a.stop()
        store.close()
        ticks = runner.tick_log
        # The first tick only primes the throttle; measure from its end.
        measured = ticks[1:]
        elapsed = ticks[-1][1] - ticks[0][1] if len(ticks) > 1 else 0.0
        starts = sum(t[3] for t in measured)
        rate = starts / elapsed if elapsed > 0 else 0.0
        mean_tick = sum(t[1] - t[0] for t in ticks) / len(ticks) if ticks else 0.0
        return ThroughputSample(queue_length, rate, starts, elapsed, len(measured), mean_tick)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def scan_cost_per_job(sample_queue: int = 1000, slots: int = 64, seed: int = 0) -> float:
    """Seconds one tick's scan spends per queued job, measured on this machine."""
    store = Store(None, check="off")
    loop = RealTimeLoop(time.monotonic)
    schedd = Schedd(store, 2.0, 1.0, 0, "full", False, clock=loop.time)
    _measure_cluster(loop, schedd, slots, 1e6, seed)
    _preload(schedd, sample_queue, 1e6)
    claims = {}
    for s in schedd.slots.values():
        claims[s.vm_id] = s.claim
        s.claim = lambda vm, job: False  # measure the scan only
    best = math.inf
    for _ in range(3):
        schedd.throttle.budget = 1.0
        schedd.throttle.last = None
        t0 = time.perf_counter()
        schedd.schedd_tick(0.0)
        best = min(best, time.perf_counter() - t0)
    return best / sample_queue


def default_schedule(cost_per_job: float, tick_s: float = 1.0, max_jobs: int = 200_000, knee_multiple: float = 3.0) -> list[int]:
    """Queue lengths from well under the knee (tick work = tick period) to ``knee_multiple`` times it."""
    knee = tick_s / max(cost_per_job, 1e-9)
    top = int(min(max_jobs, knee * knee_multiple))
    fractions = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    return sorted({max(10, int(top * f)) for f in fractions})


def measure_throughput(
    queue_length_schedule: Optional[Sequence[int]] = None,
    throttle: float = 2.0,
    out_csv=None,
    **kwargs,
) -> list[ThroughputSample]:
    """Achieved start rate per queue length; optionally written as CSV."""
    if queue_length_schedule is None:
        queue_length_schedule = default_schedule(scan_cost_per_job(slots=kwargs.get("slots", 64)))
    samples = [measure_point(int(q), throttle, **kwargs) for q in queue_length_schedule]
    if out_csv is not None:
        from .report import write_table
        write_table(out_csv, SAMPLE_COLUMNS, [s.row() for s in samples])
    return samples


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2 + 1
            i = j + 1
        return r
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    rx, ry = ranks(xs), ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    vy = math.sqrt(sum((b - my) ** 2 for b in ry))
    if vx == 0 or vy == 0:
        return 0.0
    return cov / (vx * vy)


# --------------------------------------------------------------------------
# Baseline under a workload (run_experiment with system="baseline")


def run_baseline_experiment(cfg) -> "Any":
    """Run a workload through the baseline in real time with in-process push agents."""
    from .experiment import ExperimentResult
    from .metrics import compute_metrics
    from .workload import generate_workload, total_jobs

    events: list[dict] = []
    t0 = time.perf_counter()
    tmp = Path(tempfile.mkdtemp(prefix="datasched-baseline-"))
    base = time.monotonic()
    loop = RealTimeLoop(lambda: time.monotonic() - base)
    origin = 0.0
    clock = loop.time
    failed, error = False, None
    store = Store(tmp, durability=cfg.durability, check=cfg.check)
    schedd = Schedd(store, cfg.throttle_rate, 1.0, cfg.compact_every, clock=clock, emit=events.append)
    plan = generate_workload(cfg.workload)
    total = total_jobs(plan)
    agents = []
    for i, host in enumerate(cfg.host_ids()):
        acfg = AgentConfig(host_id=host, vm_count=cfg.slots_per_host, time_scale=cfg.time_scale,
                           attributes=cfg.host_attributes, seed=cfg.seed)

        def done(vm, job_id, code, now):
            loop.call_soon(schedd.handle_completion, job_id, code)
        agent = PushAgent(acfg, loop, done, emit=events.append)
        agents.append(agent)
        for s in agent.slots:
            schedd.register_slot(s.vm_id, s.attributes, agent.claim)
    for i, sub in enumerate(plan):
        loop.call_at(origin + sub.t / cfg.time_scale, schedd.submit_job, sub.owner, sub.duration_s, sub.count,
                     sub.requirements, sub.rank, sub.attributes, f"plan-{i}")
    runner = ScheddRunner(schedd, loop)
    runner.start()
    limit = cfg.max_time_s if cfg.max_time_s is not None else 4 * cfg.ideal_makespan_s() + 600
    try:
        loop.run(until=origin + limit / cfg.time_scale,
                 stop_when=lambda: schedd.counters["completions"] >= total)
        if schedd.counters["completions"] < total:
            failed, error = True, "baseline did not finish the workload in time"
    except Exception:
        failed, error = True, traceback.format_exc()
    runner.stop()
    for a in agents:
        a.stop()
    final = store.state.accounting()
    store.close()
    shutil.rmtree(tmp, ignore_errors=True)
    series = compute_metrics(events, cfg.metrics_interval_s, cfg.time_scale, slots=cfg.slots)
    summary = dict(series.summary)
    summary["baseline"] = dict(schedd.counters)
    return ExperimentResult(cfg, events, [], series, summary, failed, error, [], {}, final, {}, time.perf_counter() - t0)
