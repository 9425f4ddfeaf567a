"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the terminal summary)
before asserting, so a full run always lists every criterion with the
numbers it was judged on.  Runnable on its own with
``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import random
import time
from pathlib import Path

import pytest

import conftest
from datasched.baseline import Schedd, default_schedule, measure_throughput, scan_cost_per_job, spearman_rho
from datasched.experiment import large_cluster_scenario, mixed_scenario, protocol_trace, run_experiment, throughput_scenario
from datasched.model import VmId
from datasched.store import Store
from datasched.workload import generate_workload, total_jobs
from oracles import dual_path_histories, matchmaker_equivalence

GOLDEN = Path(__file__).parent / "golden" / "single_job_trace.json"


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({name}): {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def conserved(series) -> bool:
    return all(r.idle + r.matched + r.running + r.completed + r.removed == r.submitted for r in series.rows)


# -- pattern checks -----------------------------------------------------------


def longest_run_near(values, target, tol=0.1):
    """(start, length) of the longest stretch of values within ``tol`` of ``target``."""
    best = (0, 0)
    start = None
    for i, v in enumerate(list(values) + [None]):
        if v is not None and abs(v - target) <= tol * target:
            if start is None:
                start = i
        elif start is not None:
            if i - start > best[1]:
                best = (start, i - start)
            start = None
    return best


def spike_period(values, after):
    """Intervals between spikes (values above half the peak) that come after index ``after``."""
    peak = max(values)
    spikes = [i for i, v in enumerate(values) if i >= after and v > 0.5 * peak]
    return [b - a for a, b in zip(spikes, spikes[1:])]


def plateau_alternation(values, ratio=5.0):
    """Number of high/low plateau switches, high meaning above the geometric midpoint of min and max."""
    positive = [v for v in values if v > 0]
    if not positive:
        return 0, 0.0
    lo, hi = min(positive), max(positive)
    cut = math.sqrt(lo * hi)
    levels = [v > cut for v in values]
    switches = sum(1 for a, b in zip(levels, levels[1:]) if a != b)
    highs = [v for v in values if v > cut]
    lows = [v for v in values if v <= cut]
    spread = (sum(highs) / len(highs)) / max(1e-9, sum(lows) / len(lows)) if highs and lows else 0.0
    return switches, spread


def test_pattern_helpers():
    assert longest_run_near([0, 9, 9, 8.5, 20, 9], 9) == (1, 3)
    assert spike_period([5, 5, 0, 5, 0, 0, 5, 0, 5], 2) == [3, 2]
    assert plateau_alternation([100, 1, 1, 100, 1])[0] == 3


# -- criteria -------------------------------------------------------------------


def test_criterion_1_golden_trace():
    t0 = time.perf_counter()
    trace = protocol_trace()
    elapsed = time.perf_counter() - t0
    want = json.loads(GOLDEN.read_text())
    ok = trace == want and elapsed < 10
    record(1, "single-job transaction trace", ok, f"{len(trace)} entries, identical={trace == want}, {elapsed:.2f}s")


THROUGHPUT = [(300.0, 0.9), (60.0, 0.9), (18.0, 0.9), (9.0, 0.8), (6.0, 0.8)]


@pytest.mark.parametrize("length,bar", THROUGHPUT)
def test_criterion_2_throughput(length, bar):
    cfg = throughput_scenario(length, hosts=45, slots_per_host=4)
    res = run_experiment(cfg)
    ideal = cfg.slots / length
    steady = res.summary["steady_state_throughput"] or 0.0
    ok = not res.failed and res.summary["completed"] == cfg.workload.count and steady >= bar * ideal
    record(2, f"throughput, {length:g}s jobs", ok,
           f"steady {steady:.3f}/s vs ideal {ideal:.3f}/s = {steady / ideal:.1%} (bar {bar:.0%}), wall {res.wall_time_s:.1f}s")


def test_criterion_3_mixed_workload():
    cfg = mixed_scenario(hosts=45, slots_per_host=12)
    res = run_experiment(cfg)
    turnover = res.series.column("turnover")
    per_interval = cfg.slots / 60.0 * cfg.metrics_interval_s
    start, run = longest_run_near(turnover, per_interval)
    gaps = spike_period(turnover, start + run)
    makespan_min = res.summary["makespan_s"] / 60
    ok = (not res.failed and makespan_min <= 33 and run >= 10 and len(gaps) >= 2
          and all(g == 6 for g in gaps))
    record(3, "mixed workload", ok,
           f"makespan {makespan_min:.1f} min (bar 33), {run} intervals at ~{per_interval:.0f}/interval, spike gaps {gaps}")


def test_criterion_4_large_cluster():
    cfg = large_cluster_scenario(hosts=10, slots_per_host=200)
    res = run_experiment(cfg)
    p99 = [v for v in res.series.column("hb_p99_ms") if v is not None]
    worst = max(p99) if p99 else float("nan")
    switches, spread = plateau_alternation(res.series.column("transactions"))
    total = total_jobs(generate_workload(cfg.workload))
    ok = (not res.failed and res.summary["completed"] == total and conserved(res.series)
          and worst < 250 and switches >= 4 and spread >= 5)
    record(4, "2000-slot pulsed cluster", ok,
           f"{res.summary['completed']}/{total} done, worst per-interval p99 {worst:.1f} ms, "
           f"{switches} plateau switches, high/low txn ratio {spread:.0f}, wall {res.wall_time_s:.1f}s")


def test_criterion_5_crash_recovery(tmp_path):
    cfg = throughput_scenario(60.0, crash_points=10, seed=7, journal_dir=str(tmp_path / "journal"))
    res = run_experiment(cfg)
    crashes = sum(1 for e in res.events if e["event"] == "CRASH")
    lost = [j for j in res.acked_job_ids if j not in res.terminal_jobs]
    ok = not res.failed and crashes == 10 and conserved(res.series) and not lost and res.acked_job_ids
    record(5, "crash recovery", ok,
           f"{crashes} kills, {len(res.acked_job_ids)} acked jobs, {len(lost)} lost, conservation={conserved(res.series)}")


def test_criterion_6_drop_requeue():
    cfg = throughput_scenario(60.0, fault_rate=0.3, faulty_fraction=0.2, seed=3)
    res = run_experiment(cfg)
    abandoned = sum(c["abandoned"] for c in res.agent_counters.values())
    dropped = res.summary["dropped"]
    ok = not res.failed and res.summary["completed"] == cfg.workload.count and dropped == abandoned and dropped > 0
    record(6, "drop requeue", ok,
           f"{res.summary['completed']} completed, dropped {dropped} == abandoned {abandoned}, "
           f"{res.summary['drop_slots']} slots / {res.summary['drop_hosts']} hosts dropped a job")


def test_criterion_7_baseline_degradation():
    throttle = 2.0
    schedule = default_schedule(scan_cost_per_job())
    samples = measure_throughput([10] + schedule, throttle)
    small, sweep = samples[0], samples[1:]
    rho = spearman_rho([s.queue_length for s in sweep], [s.achieved_rate for s in sweep])
    largest = sweep[-1]
    near = abs(small.achieved_rate - throttle) <= 0.1 * throttle
    ok = near and len(sweep) >= 8 and rho < -0.8 and largest.achieved_rate <= 0.5 * throttle
    record(7, "push baseline degradation", ok,
           f"queue 10: {small.achieved_rate:.2f}/s; rho {rho:.3f} over {len(sweep)} buckets; "
           f"queue {largest.queue_length}: {largest.achieved_rate:.2f}/s")


def throttle_windows(n_runs: int, seed: int) -> list[str]:
    """Random tick schedules against a real Schedd; every 10 s window must hold <= floor(10 * rate) starts."""
    rng = random.Random(seed)
    problems = []
    for run in range(n_runs):
        rate = rng.choice([0.3, 0.5, 1.0, 2.0, 3.7, 10.0])
        now = [0.0]
        schedd = Schedd(Store(None), throttle_rate=rate, clock=lambda: now[0], compaction=False)
        for i in range(40):
            schedd.register_slot(VmId(f"h{i // 8}", i % 8), {}, lambda vm, job: True)
        schedd.submit_job("ann", 5.0, count=400)
        starts = []
        for _ in range(120):
            now[0] += rng.choice([0.05, 0.3, 1.0, 1.0, 2.5, 9.0])
            for s in schedd.schedd_tick(now[0]):
                starts.append(s.t)
                if rng.random() < 0.9:
                    schedd.handle_completion(s.job_id, 0, now[0])
        limit = math.floor(rate * 10 + 1e-9)
        for i, t in enumerate(starts):
            n = sum(1 for u in starts[i:] if u < t + 10)
            if n > limit:
                problems.append(f"run {run}: {n} starts in [{t}, {t + 10}) at rate {rate}")
                break
    return problems


def test_criterion_8_properties(tmp_path):
    checked, mismatches = matchmaker_equivalence(10000, seed=2024)
    histories, store_bad = dual_path_histories(1000, seed=99, workdir=tmp_path)
    throttle_bad = throttle_windows(200, seed=5)
    ok = checked >= 10000 and not mismatches and histories == 1000 and not store_bad and not throttle_bad
    record(8, "property suites", ok,
           f"matchmaker {checked} expressions, {len(mismatches)} mismatches; "
           f"store {histories} histories, {len(store_bad)} recovery mismatches; "
           f"throttle 200 schedules, {len(throttle_bad)} window violations")
