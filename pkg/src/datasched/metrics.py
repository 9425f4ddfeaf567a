"""Per-interval metrics computed from the structured event log.

The log is one JSON object per line with at least ``t`` (loop-clock seconds)
and ``event``.  Job lifecycle events (SUBMITTED, MATCHED, MATCH_EXPIRED,
STARTED, COMPLETED, DROPPED, REMOVED) are replayed through the job state
machine; TXN events are counted; everything else is carried along.

Rows use unscaled time: ``t`` is seconds since the first submission multiplied
by ``time_scale``, and intervals are right-closed, ``(t - interval, t]``,
with the first row also taking the instant of the first submission.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional, Sequence, Union

COLUMNS = (
    "t", "submitted", "idle", "matched", "running", "completed", "removed", "dropped",
    "turnover", "transactions", "hb_p50_ms", "hb_p99_ms",
)

_MOVES = {
    "MATCHED": ("idle", "matched"),
    "MATCH_EXPIRED": ("matched", "idle"),
    "STARTED": ("matched", "running"),
    "COMPLETED": ("running", "completed"),
    "DROPPED": ("running", "idle"),
}


class MetricsParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"event log line {line}: {message}")
        self.line = line


@dataclass
class MetricsRow:
    t: float
    submitted: int
    idle: int
    matched: int
    running: int
    completed: int
    removed: int
    dropped: int
    turnover: int
    transactions: int
    hb_p50_ms: Optional[float] = None
    hb_p99_ms: Optional[float] = None

    def values(self) -> list:
        return [getattr(self, c) for c in COLUMNS]


@dataclass
class MetricsSeries:
    interval_s: float
    rows: list[MetricsRow] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_dict(self) -> dict[str, Any]:
        return {"interval_s": self.interval_s, "rows": [asdict(r) for r in self.rows], "summary": self.summary}


def parse_events(lines: Iterable[Union[str, dict]], ordered: bool = True) -> list[dict[str, Any]]:
    """Decode and validate an event log; raises MetricsParseError naming the line.

    ``ordered=False`` skips the time-order check, for per-process logs that
    are merged and sorted afterwards.
    """
    out = []
    last_t = -math.inf
    for n, raw in enumerate(lines, 1):
        if isinstance(raw, str):
            if not raw.strip():
                continue
            try:
                ev = json.loads(raw)
            except ValueError as exc:
                raise MetricsParseError(n, f"not JSON ({exc})") from None
        else:
            ev = raw
        if not isinstance(ev, dict) or not isinstance(ev.get("event"), str):
            raise MetricsParseError(n, "missing 'event'")
        t = ev.get("t")
        if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t):
            raise MetricsParseError(n, "missing or non-numeric 't'")
        if ordered and t < last_t:
            raise MetricsParseError(n, f"time goes backwards ({t} < {last_t})")
        last_t = t
        out.append(ev)
    return out


def percentile(values: Sequence[float], q: float) -> Optional[float]:
    """Nearest-rank percentile, q in [0, 100]."""
    if not values:
        return None
    s = sorted(values)
    k = max(1, math.ceil(q / 100.0 * len(s)))
    return s[k - 1]


def compute_metrics(
    events: Iterable[Union[str, dict]],
    interval_s: float = 60.0,
    time_scale: float = 1.0,
    slots: Optional[int] = None,
    latencies: Sequence[tuple[float, float]] = (),
) -> MetricsSeries:
    """Aggregate an event log into per-interval rows plus a summary.

    ``interval_s`` is in unscaled seconds; ``latencies`` are ``(t, seconds)``
    heartbeat handling times on the log clock.
    """
    if not interval_s > 0:
        raise ValueError("interval_s must be positive")
    evs = parse_events(events)
    series = MetricsSeries(interval_s)
    origin = next((e["t"] for e in evs if e["event"] == "SUBMITTED"), None)
    if origin is None:
        series.summary = _summary_empty()
        return series

    def unscaled(t: float) -> float:
        return (t - origin) * time_scale

    def bucket(t: float) -> int:
        return max(1, math.ceil(unscaled(t) / interval_s - 1e-9))

    n_rows = bucket(evs[-1]["t"])
    lat_by_row: dict[int, list[float]] = {}
    for t, sec in latencies:
        if t >= origin:
            lat_by_row.setdefault(bucket(t), []).append(sec * 1000.0)

    jobs: dict[int, str] = {}
    counts = {"submitted": 0, "idle": 0, "matched": 0, "running": 0, "completed": 0, "removed": 0, "dropped": 0}
    turnover = txns = 0
    row_idx = 1
    first_sub = origin
    last_complete = None
    drop_vms: dict[tuple, None] = {}
    t_full = None
    t_drain = None
    completion_times: list[float] = []

    def close_rows(upto: int) -> None:
        nonlocal row_idx, turnover, txns
        while row_idx < upto:
            lat = lat_by_row.get(row_idx, [])
            series.rows.append(MetricsRow(
                t=row_idx * interval_s, turnover=turnover, transactions=txns,
                hb_p50_ms=percentile(lat, 50), hb_p99_ms=percentile(lat, 99), **counts,
            ))
            row_idx += 1
            turnover = txns = 0

    for line, ev in enumerate(evs, 1):
        kind = ev["event"]
        t = ev["t"]
        if t >= origin:
            close_rows(bucket(t))
        if kind == "TXN":
            txns += 1
            continue
        if kind not in _MOVES and kind not in ("SUBMITTED", "REMOVED"):
            continue
        job = ev.get("job")
        if not isinstance(job, int):
            raise MetricsParseError(line, f"{kind} without an integer 'job'")
        if kind == "SUBMITTED":
            if job in jobs:
                raise MetricsParseError(line, f"job {job} submitted twice")
            jobs[job] = "idle"
            counts["submitted"] += 1
            counts["idle"] += 1
            continue
        state = jobs.get(job)
        if kind == "REMOVED":
            if state is None or state in ("completed", "removed"):
                raise MetricsParseError(line, f"REMOVED for job {job} in state {state}")
            counts[state] -= 1
            counts["removed"] += 1
            jobs[job] = "removed"
            continue
        src, dst = _MOVES[kind]
        if state != src:
            raise MetricsParseError(line, f"{kind} for job {job} in state {state}")
        prev_idle = counts["idle"]
        counts[src] -= 1
        counts[dst] += 1
        jobs[job] = dst
        if kind == "COMPLETED":
            turnover += 1
            last_complete = t
            completion_times.append(t)
        elif kind == "DROPPED":
            counts["dropped"] += 1
            vm = ev.get("vm")
            if vm is not None:
                drop_vms[tuple(vm)] = None
        if slots is not None and t_full is None and counts["running"] >= slots:
            t_full = t
        if prev_idle > 0 and counts["idle"] == 0:
            t_drain = t
    close_rows(n_rows + 1)

    makespan = 0.0 if last_complete is None else unscaled(last_complete) - unscaled(first_sub)
    steady = None
    if t_full is not None and t_drain is not None and t_drain > t_full:
        done = sum(1 for c in completion_times if t_full < c <= t_drain)
        steady = done / ((t_drain - t_full) * time_scale)
    all_lat = [s * 1000.0 for _, s in latencies]
    series.summary = {
        "makespan_s": makespan,
        "achieved_mean_throughput": (counts["completed"] / makespan) if makespan > 0 else 0.0,
        "steady_state_throughput": steady,
        "steady_window_s": None if steady is None else (t_drain - t_full) * time_scale,
        "submitted": counts["submitted"],
        "completed": counts["completed"],
        "removed": counts["removed"],
        "dropped": counts["dropped"],
        "drop_slots": len(drop_vms),
        "drop_hosts": len({vm[0] for vm in drop_vms}),
        "hb_p50_ms": percentile(all_lat, 50),
        "hb_p99_ms": percentile(all_lat, 99),
        "hb_max_ms": max(all_lat) if all_lat else None,
    }
    return series


def _summary_empty() -> dict[str, Any]:
    return {
        "makespan_s": 0.0, "achieved_mean_throughput": 0.0, "steady_state_throughput": None,
        "steady_window_s": None, "submitted": 0, "completed": 0, "removed": 0, "dropped": 0,
        "drop_slots": 0, "drop_hosts": 0, "hb_p50_ms": None, "hb_p99_ms": None, "hb_max_ms": None,
    }
