"""Command line: ``datasched {server,agent,baseline,bench} run ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence


def parse_attr(text: str) -> tuple[str, Any]:
    """``key=value`` with the value read as bool, int, float, or else string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    if raw in ("true", "false"):
        return key, raw == "true"
    for conv in (int, float):
        try:
            return key, conv(raw)
        except ValueError:
            pass
    return key, raw


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-level", default="WARNING")


def _server_parser(sub) -> None:
    p = sub.add_parser("server", help="pull-model scheduler service").add_subparsers(dest="action", required=True)
    r = p.add_parser("run")
    r.add_argument("--listen", default="127.0.0.1:8600")
    r.add_argument("--journal-dir", default=None, help="journal directory (omit for an in-memory store)")
    r.add_argument("--heartbeat-interval", type=float, default=60.0, help="unscaled seconds")
    r.add_argument("--match-expiry", type=float, default=3, help="heartbeat intervals before a match expires")
    r.add_argument("--dead-node", type=float, default=3, help="heartbeat intervals of silence before a node is dead")
    r.add_argument("--schedule-interval", type=float, default=1.0, help="unscaled seconds between scheduling passes")
    r.add_argument("--durability", choices=("full", "batched"), default="full")
    r.add_argument("--time-scale", type=float, default=1.0)
    r.add_argument("--checkpoint-every", type=int, default=50000, help="transactions between snapshots (0 = never)")
    r.add_argument("--events-log", default=None, help="append JSON event lines here")
    _common(r)


def _agent_parser(sub) -> None:
    p = sub.add_parser("agent", help="node agent (pull) or push-mode slot host").add_subparsers(dest="action", required=True)
    r = p.add_parser("run")
    r.add_argument("--server", default="http://127.0.0.1:8600")
    r.add_argument("--host-id", action="append", default=[], help="repeat to run several hosts in one process")
    r.add_argument("--faulty-host-id", action="append", default=[], help="like --host-id, but with --fault-rate applied")
    r.add_argument("--vms", type=int, default=1)
    r.add_argument("--heartbeat-interval", type=float, default=60.0)
    r.add_argument("--time-scale", type=float, default=1.0)
    r.add_argument("--fault-rate", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--attr", type=parse_attr, action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--report-delay", type=float, default=0.002, help="wall seconds before an early report")
    r.add_argument("--state-dir", default=None, help="where the boot counter is kept")
    r.add_argument("--mode", choices=("pull", "push"), default="pull")
    r.add_argument("--listen", default=None, help="push mode: address for the claim endpoint")
    r.add_argument("--events-log", default=None)
    _common(r)


def _baseline_parser(sub) -> None:
    p = sub.add_parser("baseline", help="push-model schedd with a job throttle").add_subparsers(dest="action", required=True)
    r = p.add_parser("run")
    r.add_argument("--listen", default="127.0.0.1:8700")
    r.add_argument("--throttle", type=float, default=0.5, help="job starts per second")
    r.add_argument("--journal-dir", default=None)
    r.add_argument("--compact-every", type=int, default=500, help="transactions between journal compactions")
    r.add_argument("--durability", choices=("full", "batched"), default="full")
    r.add_argument("--time-scale", type=float, default=1.0, help="accepted for symmetry; the schedd runs in wall time")
    r.add_argument("--events-log", default=None)
    _common(r)


SCENARIOS = ("throughput", "large-cluster", "mixed", "baseline-queue")


def _bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="run an experiment").add_subparsers(dest="action", required=True)
    r = p.add_parser("run")
    r.add_argument("--scenario", choices=SCENARIOS, required=True)
    r.add_argument("--mode", choices=("embedded", "wire"), default="embedded")
    r.add_argument("--slots", type=int, default=None, help="total slots (split evenly over --hosts)")
    r.add_argument("--hosts", type=int, default=None)
    r.add_argument("--time-scale", type=float, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--job-length", type=float, action="append", default=None,
                   help="throughput: unscaled seconds per job; repeat for a sweep")
    r.add_argument("--jobs", type=int, default=None, help="throughput: job count per length")
    r.add_argument("--fault-rate", type=float, default=0.0)
    r.add_argument("--faulty-fraction", type=float, default=1.0)
    r.add_argument("--throttle", type=float, default=2.0, help="baseline-queue: starts per second")
    r.add_argument("--queue-lengths", default=None, help="baseline-queue: comma-separated lengths (default: calibrated)")
    _common(r)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datasched", description="Data-centric batch scheduler and experiment harness.")
    sub = parser.add_subparsers(dest="command", required=True)
    _server_parser(sub)
    _agent_parser(sub)
    _baseline_parser(sub)
    _bench_parser(sub)
    return parser


def _shape(args, default_hosts: int, default_per_host: int) -> tuple[int, int]:
    hosts = args.hosts or default_hosts
    if args.slots is None:
        return hosts, default_per_host if args.hosts is None else max(1, (default_hosts * default_per_host) // hosts)
    if args.slots % hosts:
        raise SystemExit(f"--slots {args.slots} does not divide evenly over {hosts} hosts")
    return hosts, args.slots // hosts


def _print_summary(name: str, summary: dict) -> None:
    keys = ("completed", "makespan_s", "steady_state_throughput", "achieved_mean_throughput", "dropped", "hb_p99_ms")
    print(name + ": " + ", ".join(f"{k}={summary.get(k)!r}" for k in keys if k in summary))


def _bench(args) -> int:
    from . import experiment as ex
    from .report import write_throughput_table
    from .workload import ideal_throughput

    out = Path(args.out) if args.out else None
    extra: dict[str, Any] = {"seed": args.seed, "mode": args.mode, "fault_rate": args.fault_rate,
                             "faulty_fraction": args.faulty_fraction}
    if args.time_scale is not None:
        extra["time_scale"] = args.time_scale
    if args.scenario == "baseline-queue":
        return _bench_baseline(args, out)
    failed = False
    if args.scenario == "throughput":
        hosts, per_host = _shape(args, 45, 4)
        points = []
        lengths = args.job_length or [60.0]
        for length in lengths:
            sub_out = None if out is None else (out if len(lengths) == 1 else out / f"job-{length:g}s")
            cfg = ex.throughput_scenario(length, hosts, per_host, count=args.jobs, out_dir=sub_out and str(sub_out), **extra)
            res = ex.run_experiment(cfg)
            failed |= res.failed
            _print_summary(cfg.name, res.summary)
            points.append((length, ideal_throughput(cfg.slots, length), res.summary.get("steady_state_throughput")))
        if out is not None:
            write_throughput_table(out / "throughput.csv", points)
    else:
        if args.scenario == "mixed":
            hosts, per_host = _shape(args, 45, 12)
            cfg = ex.mixed_scenario(hosts, per_host, **extra)
        else:
            hosts, per_host = _shape(args, 10, 200)
            cfg = ex.large_cluster_scenario(hosts, per_host, **extra)
        cfg.out_dir = None if out is None else str(out)
        res = ex.run_experiment(cfg)
        failed = res.failed
        _print_summary(cfg.name, res.summary)
    if failed:
        print("experiment failed", file=sys.stderr)
        return 1
    return 0


def _bench_baseline(args, out: Optional[Path]) -> int:
    from .baseline import SAMPLE_COLUMNS, measure_throughput, spearman_rho
    from .report import write_table

    kw: dict[str, Any] = {"seed": args.seed}
    if args.slots:
        kw["slots"] = args.slots
    schedule = None if args.queue_lengths is None else [int(x) for x in args.queue_lengths.split(",") if x]
    samples = measure_throughput(schedule, args.throttle, **kw)
    for s in samples:
        print(f"queue {s.queue_length:>7d}  rate {s.achieved_rate:6.3f}/s  ({s.starts} starts in {s.elapsed_s:.1f}s)")
    rho = spearman_rho([s.queue_length for s in samples], [s.achieved_rate for s in samples]) if len(samples) > 1 else None
    summary = {"throttle": args.throttle, "spearman_rho": rho, "samples": [dict(zip(SAMPLE_COLUMNS, s.row())) for s in samples]}
    print(f"spearman rho {rho}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "metrics.csv", SAMPLE_COLUMNS, [s.row() for s in samples])
        with open(out / "events.log", "w") as f:
            for s in samples:
                f.write(json.dumps({"event": "QUEUE_SAMPLE", **dict(zip(SAMPLE_COLUMNS, s.row()))}) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "server":
        from .wire import serve_scheduler
        serve_scheduler(args.listen, args.journal_dir, args.events_log,
                        heartbeat_interval_s=args.heartbeat_interval, match_expiry_intervals=args.match_expiry,
                        dead_node_intervals=args.dead_node, schedule_interval_s=args.schedule_interval,
                        durability=args.durability, time_scale=args.time_scale, checkpoint_every=args.checkpoint_every)
        return 0
    if args.command == "agent":
        from .agent import AgentConfig
        from .wire import run_agents
        hosts = [(h, 0.0) for h in args.host_id] + [(h, args.fault_rate) for h in args.faulty_host_id]
        if not hosts:
            hosts = [("host-0", args.fault_rate)]
        elif not args.faulty_host_id and args.fault_rate:
            hosts = [(h, args.fault_rate) for h, _ in hosts]
        try:
            configs = [AgentConfig(server=args.server, host_id=h, vm_count=args.vms,
                                   heartbeat_interval_s=args.heartbeat_interval, time_scale=args.time_scale,
                                   attributes=dict(args.attr), fault_rate=rate, seed=args.seed,
                                   report_delay_s=args.report_delay, state_dir=args.state_dir)
                       for h, rate in hosts]
            run_agents(configs, args.mode, args.listen, args.events_log)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    if args.command == "baseline":
        from .wire import serve_baseline
        serve_baseline(args.listen, args.journal_dir, args.throttle, args.compact_every, args.durability, args.events_log)
        return 0
    return _bench(args)


if __name__ == "__main__":
    sys.exit(main())
