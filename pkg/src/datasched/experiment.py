"""Experiment orchestration.

``run_experiment`` runs one scenario and returns the raw event log, the
heartbeat latency samples and the computed metrics.  In embedded mode the
service, the store and every agent share one :class:`VirtualLoop`; a fixed
seed gives a byte-identical event log.  Wire mode starts a server process and
agent processes and drives them over HTTP in real time.

Scenario times are unscaled seconds; the loop clock runs in scaled seconds
(unscaled seconds / ``time_scale``) and so does the ``t`` of every event.
"""

from __future__ import annotations

import json
import logging
import math
import random
import shutil
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from .agent import AgentConfig, DirectTransport, NodeAgent
from .journal import segment_paths
from .metrics import MetricsSeries, compute_metrics
from .model import HistoryKind
from .report import emit_report
from .runtime import VirtualLoop
from .service import SchedulerService, ServiceConfig
from .store import Store
from .workload import Submission, WorkloadSpec, generate_workload, ideal_throughput, total_jobs

log = logging.getLogger(__name__)

DEFAULT_HOST_ATTRIBUTES = {"memory_mb": 8192, "disk_mb": 200000, "cpus": 4, "arch": "x86_64", "os": "linux"}


@dataclass
class ScenarioConfig:
    name: str = "custom"
    mode: str = "embedded"
    system: str = "pull"
    hosts: int = 45
    slots_per_host: int = 4
    workload: WorkloadSpec = field(default_factory=lambda: WorkloadSpec.uniform(3600, 60.0))
    time_scale: float = 10.0
    seed: int = 0
    heartbeat_interval_s: float = 60.0
    schedule_interval_s: float = 1.0
    match_expiry_intervals: float = 3
    dead_node_intervals: float = 3
    # fault_rate applies to the first ceil(hosts * faulty_fraction) hosts.
    fault_rate: float = 0.0
    faulty_fraction: float = 1.0
    host_attributes: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_HOST_ATTRIBUTES))
    # Agents boot at uniform offsets in [0, boot_stagger_s]; None = 10% of a heartbeat interval.
    boot_stagger_s: Optional[float] = None
    metrics_interval_s: float = 60.0
    journal_dir: Optional[str] = None
    durability: str = "full"
    check: str = "incremental"
    crash_points: int = 0
    crash_downtime_s: float = 5.0
    torn_tail: bool = True
    # Safety cap on the run length; None = derived from the workload.
    max_time_s: Optional[float] = None
    report_delay_s: float = 0.002
    roundtrip: bool = False
    # Push baseline only: starts per wall-clock second, and journal compaction period.
    throttle_rate: float = 2.0
    compact_every: int = 500
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("embedded", "wire"):
            raise ValueError(f"mode must be embedded or wire, got {self.mode!r}")
        if self.system not in ("pull", "baseline"):
            raise ValueError(f"system must be pull or baseline, got {self.system!r}")
        if self.hosts < 1 or self.slots_per_host < 1:
            raise ValueError("need at least one host and one slot per host")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    @property
    def slots(self) -> int:
        return self.hosts * self.slots_per_host

    def host_ids(self) -> list[str]:
        width = max(3, len(str(self.hosts - 1)))
        return [f"h{i:0{width}d}" for i in range(self.hosts)]

    def faulty_hosts(self) -> int:
        return math.ceil(self.hosts * self.faulty_fraction) if self.fault_rate > 0 else 0

    def ideal_makespan_s(self) -> float:
        """Unscaled seconds a perfectly packed cluster would need (lower bound)."""
        plan = generate_workload(self.workload)
        work = sum(s.count * s.duration_s for s in plan)
        last = max((s.t for s in plan), default=0.0)
        longest = max((s.duration_s for s in plan), default=0.0)
        return max(work / self.slots, last + longest)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["workload"] = self.workload.to_dict()
        return d


@dataclass
class ExperimentResult:
    config: ScenarioConfig
    events: list[dict[str, Any]]
    latencies: list[tuple[float, float]]
    series: MetricsSeries
    summary: dict[str, Any]
    failed: bool = False
    error: Optional[str] = None
    acked_job_ids: list[int] = field(default_factory=list)
    agent_counters: dict[str, dict[str, int]] = field(default_factory=dict)
    final_accounting: dict[str, int] = field(default_factory=dict)
    terminal_jobs: dict[int, str] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def event_log_text(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.log").write_text(self.event_log_text())
        emit_report(self.series, out / "metrics.csv", "csv")
        ideal = None
        plan = generate_workload(self.config.workload)
        n = total_jobs(plan)
        if n:
            mean = sum(s.count * s.duration_s for s in plan) / n
            ideal = ideal_throughput(self.config.slots, mean)
        emit_report(self.series, out / "metrics.dat", "gnuplot", ideal_rate=ideal)
        summary = dict(self.summary)
        summary.update({"failed": self.failed, "error": self.error, "wall_time_s": self.wall_time_s,
                        "scenario": self.config.to_dict()})
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
        return out


def run_experiment(cfg: ScenarioConfig) -> ExperimentResult:
    if cfg.system == "baseline" and cfg.mode == "embedded":
        from .baseline import run_baseline_experiment
        result = run_baseline_experiment(cfg)
    elif cfg.mode == "embedded":
        result = _run_embedded(cfg)
    else:
        from .wire import run_wire_experiment
        result = run_wire_experiment(cfg)
    if cfg.out_dir:
        result.write(cfg.out_dir)
    return result


def _tear_tail(directory: Path, rng: random.Random) -> int:
    """Append a few garbage bytes to the newest segment, like a write cut short."""
    segs = segment_paths(directory)
    if not segs:
        return 0
    junk = bytes(rng.randrange(256) for _ in range(rng.randint(1, 64)))
    with open(segs[-1][1], "ab") as f:
        f.write(junk)
    return len(junk)


class _EmbeddedRun:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.loop = VirtualLoop()
        self.events: list[dict[str, Any]] = []
        self.latencies: list[tuple[float, float]] = []
        self.rng = random.Random(f"{cfg.seed}:harness")
        self.own_dir = cfg.journal_dir is None
        self.jdir = Path(tempfile.mkdtemp(prefix="datasched-")) if self.own_dir else Path(cfg.journal_dir)
        self.service: Optional[SchedulerService] = None
        self.plan = generate_workload(cfg.workload)
        self.total = total_jobs(self.plan)
        self.acked: list[int] = []
        self.pending_submissions = len(self.plan)
        scale = cfg.time_scale
        self.svc_config = ServiceConfig(
            journal_dir=str(self.jdir),
            heartbeat_interval_s=cfg.heartbeat_interval_s,
            match_expiry_intervals=cfg.match_expiry_intervals,
            dead_node_intervals=cfg.dead_node_intervals,
            schedule_interval_s=cfg.schedule_interval_s,
            durability=cfg.durability,
            time_scale=scale,
            check=cfg.check,
        )
        faulty = cfg.faulty_hosts()
        self.agents = []
        for i, host in enumerate(cfg.host_ids()):
            acfg = AgentConfig(
                host_id=host, vm_count=cfg.slots_per_host, heartbeat_interval_s=cfg.heartbeat_interval_s,
                time_scale=scale, attributes=cfg.host_attributes,
                fault_rate=cfg.fault_rate if i < faulty else 0.0, seed=cfg.seed, report_delay_s=cfg.report_delay_s,
            )
            self.agents.append(NodeAgent(acfg, DirectTransport(lambda: self.service, cfg.roundtrip), self.loop, emit=self.events.append))

    def emit(self, ev: dict[str, Any]) -> None:
        self.events.append(ev)

    def open_service(self) -> SchedulerService:
        store = Store(self.jdir, durability=self.cfg.durability, check=self.cfg.check)
        svc = SchedulerService(
            self.svc_config, store, clock=self.loop.time, loop=self.loop, emit=self.emit,
            record_latency=lambda t, s: self.latencies.append((t, s)),
        )
        svc.start()
        return svc

    def submit(self, index: int, sub: Submission) -> None:
        if self.service is None:
            # Server down: the client retries with the same token.
            self.loop.call_later(0.1 / self.cfg.time_scale, self.submit, index, sub)
            return
        ids = self.service.submit_job(
            sub.owner, sub.duration_s, sub.count, sub.requirements, sub.rank, sub.attributes, token=f"plan-{index}",
        )
        self.acked.extend(ids)
        self.pending_submissions -= 1

    def crash(self) -> None:
        svc = self.service
        if svc is None:
            return
        now = self.loop.time()
        svc.stop()
        svc.store.abandon()
        self.service = None
        torn = _tear_tail(self.jdir, self.rng) if self.cfg.torn_tail else 0
        self.emit({"t": now, "event": "CRASH", "torn_bytes": torn})
        self.loop.call_later(self.cfg.crash_downtime_s / self.cfg.time_scale, self.restart)

    def restart(self) -> None:
        svc = self.open_service()
        self.service = svc
        info = svc.store.recovery
        self.emit({"t": self.loop.time(), "event": "RESTART", "replayed_txns": info.replayed_txns,
                   "discarded_bytes": info.discarded_bytes, "last_lsn": info.last_lsn})

    def account(self) -> None:
        if self.service is not None:
            ev = {"t": self.loop.time(), "event": "ACCOUNT"}
            ev.update(self.service.store.state.accounting())
            self.emit(ev)
        self.loop.call_later(self.cfg.metrics_interval_s / self.cfg.time_scale, self.account)

    def done(self) -> bool:
        svc = self.service
        if svc is None or self.pending_submissions:
            return False
        kc = svc.store.state.kind_counts
        return kc[HistoryKind.COMPLETED] + kc[HistoryKind.REMOVED] >= self.total

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        scale = cfg.time_scale
        t0 = time.perf_counter()
        failed, error = False, None
        try:
            self.service = self.open_service()
            stagger = (0.1 * cfg.heartbeat_interval_s if cfg.boot_stagger_s is None else cfg.boot_stagger_s) / scale
            for a in self.agents:
                a.start(first_delay=self.rng.uniform(0.0, stagger))
            for i, sub in enumerate(self.plan):
                self.loop.call_at(sub.t / scale, self.submit, i, sub)
            if cfg.crash_points:
                for t in crash_times(self.rng, cfg):
                    self.loop.call_at(t, self.crash)
            self.loop.call_later(cfg.metrics_interval_s / scale, self.account)
            limit = cfg.max_time_s if cfg.max_time_s is not None else 4 * cfg.ideal_makespan_s() + 20 * cfg.heartbeat_interval_s
            if self.total:
                self.loop.run(until=limit / scale, stop_when=self.done)
            if not self.done() and self.total:
                failed, error = True, f"not all jobs finished within {limit:.0f} unscaled seconds"
        except Exception:
            failed, error = True, traceback.format_exc()
            log.error("experiment %s failed:\n%s", cfg.name, error)
        final: dict[str, int] = {}
        terminal: dict[int, str] = {}
        if self.service is not None:
            st = self.service.store.state
            final = st.accounting()
            for ev in st.history.values():
                if ev.kind in (HistoryKind.COMPLETED, HistoryKind.REMOVED):
                    terminal[ev.job_id] = ev.kind.value
            self.service.stop()
            self.service.store.close()
        for a in self.agents:
            a.stop()
        if self.own_dir:
            shutil.rmtree(self.jdir, ignore_errors=True)
        series = compute_metrics(self.events, cfg.metrics_interval_s, scale, slots=cfg.slots, latencies=self.latencies)
        summary = dict(series.summary)
        summary["ideal_throughput"] = _ideal_for(cfg)
        summary["agents"] = _sum_counters(a.counters for a in self.agents)
        return ExperimentResult(
            cfg, self.events, self.latencies, series, summary, failed, error, list(self.acked),
            {a.config.host_id: dict(a.counters) for a in self.agents}, final, terminal, time.perf_counter() - t0,
        )


def crash_times(rng: random.Random, cfg: ScenarioConfig) -> list[float]:
    """Kill instants (loop clock) spread over the run, each outside the previous downtime."""
    scale = cfg.time_scale
    horizon = 0.9 * cfg.ideal_makespan_s() / scale
    gap = 2 * cfg.crash_downtime_s / scale
    times = sorted(rng.uniform(0.02 * horizon, horizon) for _ in range(cfg.crash_points))
    for i in range(1, len(times)):
        times[i] = max(times[i], times[i - 1] + gap)
    return times


def _ideal_for(cfg: ScenarioConfig) -> Optional[float]:
    plan = generate_workload(cfg.workload)
    n = total_jobs(plan)
    if not n:
        return None
    return ideal_throughput(cfg.slots, sum(s.count * s.duration_s for s in plan) / n)


def _sum_counters(counters) -> dict[str, int]:
    total: dict[str, int] = {}
    for c in counters:
        for k, v in c.items():
            total[k] = total.get(k, 0) + v
    return total


def _run_embedded(cfg: ScenarioConfig) -> ExperimentResult:
    return _EmbeddedRun(cfg).run()


# --------------------------------------------------------------------------
# Named scenarios used by the bench CLI and the acceptance suite


def throughput_scenario(job_length_s: float, hosts: int = 45, slots_per_host: int = 4, count: Optional[int] = None, **kw) -> ScenarioConfig:
    slots = hosts * slots_per_host
    n = count if count is not None else 20 * slots
    return ScenarioConfig(name=f"throughput-{job_length_s:g}s", hosts=hosts, slots_per_host=slots_per_host,
                          workload=WorkloadSpec.uniform(n, job_length_s), **kw)


def mixed_scenario(hosts: int = 45, slots_per_host: int = 12, **kw) -> ScenarioConfig:
    slots = hosts * slots_per_host
    # 12 one-minute jobs and 3 six-minute jobs per slot: 30 minutes of work per slot.
    return ScenarioConfig(name="mixed", hosts=hosts, slots_per_host=slots_per_host,
                          workload=WorkloadSpec.mixed([(12 * slots, 60.0), (3 * slots, 360.0)]), **kw)


def large_cluster_scenario(hosts: int = 10, slots_per_host: int = 200, batches: int = 20, **kw) -> ScenarioConfig:
    slots = hosts * slots_per_host
    kw.setdefault("time_scale", 50.0)
    return ScenarioConfig(name="large-cluster", hosts=hosts, slots_per_host=slots_per_host,
                          workload=WorkloadSpec.pulsed(batches, slots // 4, 300.0, 9000.0), **kw)


def protocol_trace(job_duration_s: float = 90.0, first_heartbeat_s: float = 1.0) -> list[dict[str, Any]]:
    """One job on a one-slot cluster, recorded as the ordered list of store transactions.

    Each entry has the commit timestamp, the operation that caused it and the
    tuple ops in order; heartbeat responses that carried a directive other
    than NONE are listed too, under ``"directive"``.  The service runs with
    default settings on the virtual clock, so the output is fixed.
    """
    loop = VirtualLoop()
    service = SchedulerService(ServiceConfig(), Store(None), clock=loop.time, loop=loop)
    trace: list[dict[str, Any]] = []

    def on_commit(commit, ops):
        trace.append({"t": round(commit.timestamp, 6), "source": service._txn_source,
                      "ops": [_op_text(op) for op in ops]})

    service.store.subscribe(on_commit)

    class Recording(DirectTransport):
        def heartbeat(self, report):
            resp = super().heartbeat(report)
            for d in resp.directives:
                if d.action.value != "NONE":
                    trace.append({"t": round(loop.time(), 6), "directive": d.action.value,
                                  "vm": [d.vm_id.host_id, d.vm_id.slot_index]})
            return resp

    agent = NodeAgent(AgentConfig(host_id="h0", vm_count=1), Recording(lambda: service, roundtrip=True), loop)
    service.start()
    service.submit_job("user", job_duration_s)
    agent.start(first_delay=first_heartbeat_s)
    loop.run(until=100 * job_duration_s, stop_when=lambda: service.store.state.kind_counts[HistoryKind.COMPLETED] == 1)
    service.stop()
    agent.stop()
    return trace


def _op_text(op) -> str:
    parts = [op.kind.value, op.relation.value]
    value = op.value
    if op.relation.value == "history":
        parts.append(value.kind.value)
    elif op.key is not None:
        parts.append(f"{op.key[0]}/{op.key[1]}" if isinstance(op.key, tuple) else str(op.key))
    state = getattr(value, "state", None)
    if state is not None:
        parts.append(f"state={state.value}")
    phase = getattr(value, "phase", None)
    if phase is not None:
        parts.append(f"phase={phase.value}")
    return " ".join(parts)
