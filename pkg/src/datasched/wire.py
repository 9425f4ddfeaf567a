"""HTTP/JSON front ends and the multi-process (wire) experiment driver.

Routes of the scheduler service::

    POST   /v1/jobs            submit        -> 201 {"job_ids": [...]}
    DELETE /v1/jobs/<id>       remove        -> {"status": "REMOVED" | "RELEASE_PENDING"}
    GET    /v1/jobs|machines|history         -> {"items", "total", "offset", "limit"}
    POST   /v1/heartbeat       agent report  -> directives
    POST   /v1/accept-match                  -> {"status": "OK" | "STALE"}
    GET    /v1/stats

The push baseline serves POST /v1/jobs, POST /v1/register, POST /v1/completion
and GET /v1/stats; push agents serve POST /v1/claim.  Errors come back as
``{"error": message}`` with the matching status code.
"""

from __future__ import annotations

import functools
import json
import logging
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional

from .protocol import HeartbeatReport, ProtocolError
from .service import BadFilter, NotFound, ServiceError, ValidationError

log = logging.getLogger(__name__)

Route = Callable[[dict, Any], tuple[int, Any]]


class _Handler(BaseHTTPRequestHandler):
    routes: dict[tuple[str, str], Route] = {}
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # keep stderr quiet; errors are logged below
        log.debug("%s %s", self.address_string(), fmt % args)

    def _dispatch(self, method: str) -> None:
        url = urllib.parse.urlsplit(self.path)
        parts = url.path.rstrip("/").split("/")
        query = {k: v[-1] for k, v in urllib.parse.parse_qs(url.query).items()}
        body = None
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        status, reply = 404, {"error": f"no route for {method} {url.path}"}
        try:
            if raw:
                try:
                    body = json.loads(raw)
                except ValueError:
                    raise ValidationError("request body is not JSON") from None
            route = self.routes.get((method, url.path.rstrip("/")))
            if route is None and len(parts) == 4:
                # /v1/<collection>/<id>
                route = self.routes.get((method, "/".join(parts[:3]) + "/*"))
                if route is not None:
                    query["_id"] = parts[3]
            if route is not None:
                status, reply = route(query, body)
        except ServiceError as exc:
            status, reply = exc.status, {"error": str(exc)}
        except ProtocolError as exc:
            status, reply = 400, {"error": str(exc)}
        except Exception as exc:
            log.exception("%s %s failed", method, self.path)
            status, reply = 500, {"error": f"internal error: {exc}"}
        data = json.dumps(reply).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")


class HttpServer:
    """A ThreadingHTTPServer on its own daemon thread."""

    def __init__(self, listen: str, routes: dict[tuple[str, str], Route]):
        host, port = parse_listen(listen)
        handler = type("Handler", (_Handler,), {"routes": routes})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, name="http", daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "HttpServer":
        self.thread.start()
        return self

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


def parse_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {listen!r}")
    return host or "127.0.0.1", int(port)


def _int_param(query: dict, name: str, default=None):
    raw = query.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise BadFilter(f"{name} must be an integer") from None


def _body(body) -> dict:
    if not isinstance(body, dict):
        raise ValidationError("request body must be a JSON object")
    return body


def _submit_args(body) -> dict:
    b = _body(body)
    unknown = set(b) - {"owner", "duration_s", "count", "requirements", "rank", "attributes", "token"}
    if unknown:
        raise ValidationError(f"unknown fields {sorted(unknown)}")
    if "duration_s" not in b:
        raise ValidationError("duration_s is required")
    return {
        "owner": b.get("owner", "anonymous"), "duration_s": b["duration_s"], "count": b.get("count", 1),
        "requirements": b.get("requirements", "true"), "rank": b.get("rank"),
        "attributes": b.get("attributes"), "token": b.get("token"),
    }


def service_routes(service) -> dict[tuple[str, str], Route]:
    def submit(q, body):
        return 201, {"job_ids": service.submit_job(**_submit_args(body))}

    def remove(q, body):
        try:
            job_id = int(q["_id"])
        except ValueError:
            raise NotFound(f"no job {q['_id']!r}") from None
        return 200, {"status": service.remove_job(job_id)}

    def lister(kind):
        def get(q, body):
            since = q.get("since")
            try:
                since = None if since is None else float(since)
            except ValueError:
                raise BadFilter("since must be a number") from None
            return 200, service.query(kind, state=q.get("state"), owner=q.get("owner"), since=since,
                                      job_id=_int_param(q, "job_id"), limit=_int_param(q, "limit", 100),
                                      offset=_int_param(q, "offset", 0))
        return get

    def heartbeat(q, body):
        return 200, service.handle_heartbeat(HeartbeatReport.from_json(_body(body))).to_json()

    def accept(q, body):
        b = _body(body)
        if not isinstance(b.get("job_id"), int):
            raise ValidationError("job_id must be an integer")
        try:
            return 200, {"status": service.accept_match(b["job_id"], b.get("vm_id"))}
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad vm_id: {exc}") from None

    return {
        ("POST", "/v1/jobs"): submit,
        ("DELETE", "/v1/jobs/*"): remove,
        ("GET", "/v1/jobs"): lister("jobs"),
        ("GET", "/v1/machines"): lister("machines"),
        ("GET", "/v1/history"): lister("history"),
        ("POST", "/v1/heartbeat"): heartbeat,
        ("POST", "/v1/accept-match"): accept,
        ("GET", "/v1/stats"): lambda q, body: (200, service.stats()),
    }


def baseline_routes(schedd, loop) -> dict[tuple[str, str], Route]:
    """The schedd is single-threaded, so every handler runs on its loop."""
    from .agent import post_json
    from .model import VmId

    def submit(q, body):
        return 201, {"job_ids": loop.submit(functools.partial(schedd.submit_job, **_submit_args(body)), timeout=60)}

    def register(q, body):
        b = _body(body)
        url = b.get("claim_url")
        if not isinstance(url, str) or not isinstance(b.get("slots"), list):
            raise ValidationError("register needs claim_url and slots")

        def claim(vm_id, job):
            reply = post_json(url, {"vm_id": [vm_id.host_id, vm_id.slot_index], "job": job}, timeout=5)
            return bool(reply.get("accepted"))

        def do():
            for s in b["slots"]:
                schedd.register_slot(VmId.coerce(s["vm_id"]), s.get("attributes") or {}, claim)
        try:
            loop.submit(do, timeout=60)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad slot entry: {exc}") from None
        return 200, {"registered": len(b["slots"])}

    def completion(q, body):
        b = _body(body)
        if not isinstance(b.get("job_id"), int):
            raise ValidationError("job_id must be an integer")
        known = loop.submit(schedd.handle_completion, b["job_id"], int(b.get("exit_code", 0)), timeout=60)
        return 200, {"status": "OK" if known else "UNKNOWN"}

    def stats(q, body):
        def get():
            d = schedd.store.state.accounting()
            d.update(schedd.counters)
            d["queue"] = len(schedd.queue)
            d["machines"] = len(schedd.slots)
            return d
        return 200, loop.submit(get, timeout=60)

    return {
        ("POST", "/v1/jobs"): submit,
        ("POST", "/v1/register"): register,
        ("POST", "/v1/completion"): completion,
        ("GET", "/v1/stats"): stats,
    }


def push_agent_routes(agent, loop) -> dict[tuple[str, str], Route]:
    def claim(q, body):
        b = _body(body)
        if "vm_id" not in b or not isinstance(b.get("job"), dict):
            raise ValidationError("claim needs vm_id and job")
        return 200, {"accepted": loop.submit(agent.claim, b["vm_id"], b["job"], timeout=30)}
    return {("POST", "/v1/claim"): claim}


class EventLog:
    """Thread-safe JSON-lines writer; ``None`` path discards."""

    def __init__(self, path: Optional[str]):
        self._f = open(path, "a", buffering=1) if path else None
        self._lock = threading.Lock()

    def __call__(self, event: dict) -> None:
        if self._f is None:
            return
        line = json.dumps(event, separators=(",", ":")) + "\n"
        with self._lock:
            self._f.write(line)

    def close(self) -> None:
        if self._f is not None:
            with self._lock:
                self._f.close()
                self._f = None


def get_json(url: str, timeout: float = 10.0) -> Any:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        raise ProtocolError(f"{url}: HTTP {exc.code} {exc.read().decode(errors='replace')}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise ConnectionError(f"{url}: {exc}") from None


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_ready(url: str, timeout: float = 20.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            get_json(url, timeout=2)
            return
        except (ConnectionError, ProtocolError):
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


# --------------------------------------------------------------------------
# Wire experiment


def _spawn(args: list[str], log_path: Path) -> subprocess.Popen:
    cmd = [sys.executable, "-m", "datasched"] + args
    return subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=open(log_path, "w"), start_new_session=True)


def _terminate(procs: list[subprocess.Popen]) -> None:
    for p in procs:
        if p.poll() is None:
            p.send_signal(signal.SIGTERM)
    for p in procs:
        try:
            p.wait(timeout=10)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def _host_groups(cfg, processes: int) -> list[list[tuple[int, str]]]:
    hosts = list(enumerate(cfg.host_ids()))
    n = max(1, min(processes, len(hosts)))
    return [hosts[i::n] for i in range(n)]


def run_wire_experiment(cfg, agent_processes: int = 4, workdir: Optional[str] = None):
    """Run ``cfg`` with the scheduler and agents as separate processes talking HTTP."""
    from .experiment import ExperimentResult
    from .metrics import compute_metrics, parse_events
    from .workload import generate_workload, total_jobs

    t_wall = time.perf_counter()
    work = Path(workdir or tempfile.mkdtemp(prefix="datasched-wire-"))
    work.mkdir(parents=True, exist_ok=True)
    port = free_port()
    url = f"http://127.0.0.1:{port}"
    push = cfg.system == "baseline"
    procs: list[subprocess.Popen] = []
    logs = [work / "server.events"]
    common = ["--time-scale", str(cfg.time_scale)]
    if push:
        server_args = ["baseline", "run", "--listen", f"127.0.0.1:{port}", "--journal-dir", str(work / "journal"),
                       "--throttle", str(cfg.throttle_rate), "--compact-every", str(cfg.compact_every),
                       "--durability", cfg.durability, "--events-log", str(logs[0])]
    else:
        server_args = ["server", "run", "--listen", f"127.0.0.1:{port}", "--journal-dir", str(work / "journal"),
                       "--heartbeat-interval", str(cfg.heartbeat_interval_s),
                       "--schedule-interval", str(cfg.schedule_interval_s),
                       "--durability", cfg.durability, "--events-log", str(logs[0])] + common
    failed, error = False, None
    plan = generate_workload(cfg.workload)
    total = total_jobs(plan)
    acked: list[int] = []
    try:
        procs.append(_spawn(server_args, work / "server.stderr"))
        wait_ready(url + "/v1/stats")
        faulty = cfg.faulty_hosts()
        groups = [[h] for h in enumerate(cfg.host_ids())] if push else _host_groups(cfg, agent_processes)
        for g, group in enumerate(groups):
            path = work / f"agents-{g}.events"
            logs.append(path)
            args = ["agent", "run", "--server", url, "--vms", str(cfg.slots_per_host),
                    "--heartbeat-interval", str(cfg.heartbeat_interval_s), "--seed", str(cfg.seed),
                    "--report-delay", str(cfg.report_delay_s), "--events-log", str(path),
                    "--mode", "push" if push else "pull"] + common
            # Fault injection applies per host, so faulty hosts are listed separately.
            for idx, host in group:
                args += ["--faulty-host-id" if idx < faulty else "--host-id", host]
            if any(idx < faulty for idx, _ in group):
                args += ["--fault-rate", str(cfg.fault_rate)]
            for k, v in cfg.host_attributes.items():
                args += ["--attr", f"{k}={v}"]
            if push:
                args += ["--listen", f"127.0.0.1:{free_port()}"]
            procs.append(_spawn(args, work / f"agents-{g}.stderr"))
        if push:
            deadline = time.monotonic() + 30
            while get_json(url + "/v1/stats").get("machines", 0) < cfg.slots:
                if time.monotonic() > deadline:
                    raise RuntimeError("push agents did not register")
                time.sleep(0.1)
        from .agent import post_json
        start = time.monotonic()
        for i, sub in enumerate(plan):
            delay = start + sub.t / cfg.time_scale - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            body = {"owner": sub.owner, "duration_s": sub.duration_s, "count": sub.count,
                    "requirements": sub.requirements, "rank": sub.rank, "attributes": sub.attributes,
                    "token": f"plan-{i}"}
            acked += post_json(url + "/v1/jobs", body, timeout=60)["job_ids"]
        limit = cfg.max_time_s if cfg.max_time_s is not None else 4 * cfg.ideal_makespan_s() + 600
        deadline = start + limit / cfg.time_scale
        while True:
            st = get_json(url + "/v1/stats")
            if st.get("completed", 0) + st.get("removed", 0) >= total:
                break
            dead = [p for p in procs if p.poll() is not None]
            if dead:
                raise RuntimeError(f"process exited early: {dead[0].args}")
            if time.monotonic() > deadline:
                failed, error = True, f"timed out with {st.get('completed', 0)}/{total} completed"
                break
            time.sleep(0.2)
        final = {k: st[k] for k in ("submitted", "idle", "matched", "running", "completed", "removed") if k in st}
    except Exception as exc:
        failed, error, final = True, f"{type(exc).__name__}: {exc}", {}
    finally:
        _terminate(procs)

    events: list[dict] = []
    for path in logs:
        if path.exists():
            events += parse_events(path.read_text().splitlines(), ordered=False)
    events.sort(key=lambda e: e["t"])
    latencies = [(e["t"], e["seconds"]) for e in events if e["event"] == "HB_LATENCY"]
    series = compute_metrics(events, cfg.metrics_interval_s, cfg.time_scale, slots=cfg.slots, latencies=latencies)
    summary = dict(series.summary)
    summary["workdir"] = str(work)
    return ExperimentResult(cfg, events, latencies, series, summary, failed, error, acked, {}, final, {},
                            time.perf_counter() - t_wall)


# --------------------------------------------------------------------------
# Process entry points (used by the CLI)


def _install_stop(loop) -> None:
    def handler(signum, frame):
        loop.stop()
    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)


def serve_scheduler(listen: str, journal: Optional[str], events_log: Optional[str] = None, **config) -> None:
    from .runtime import RealTimeLoop
    from .service import SchedulerService, ServiceConfig
    from .store import Store

    cfg = ServiceConfig(listen=listen, journal_dir=journal, **config)
    store = Store(journal, durability=cfg.durability, check=cfg.check)
    emit = EventLog(events_log)
    loop = RealTimeLoop(time.time)
    svc = SchedulerService(cfg, store, clock=time.time, loop=loop, emit=emit,
                           record_latency=lambda t, s: emit({"t": t, "event": "HB_LATENCY", "seconds": s}))
    server = HttpServer(listen, service_routes(svc)).start()
    log.info("scheduler listening on %s (journal %s)", server.url, journal or "in-memory")
    svc.start()
    _install_stop(loop)
    try:
        loop.run()
    finally:
        svc.stop()
        server.close()
        store.close()
        emit.close()


def serve_baseline(listen: str, journal: Optional[str], throttle: float, compact_every: int = 500,
                   durability: str = "full", events_log: Optional[str] = None, tick_s: float = 1.0) -> None:
    from .baseline import Schedd, ScheddRunner
    from .runtime import RealTimeLoop
    from .store import Store

    store = Store(journal, durability=durability)
    emit = EventLog(events_log)
    loop = RealTimeLoop(time.time)
    schedd = Schedd(store, throttle, tick_s, compact_every, clock=loop.time, emit=emit)
    server = HttpServer(listen, baseline_routes(schedd, loop)).start()
    runner = ScheddRunner(schedd, loop)
    runner.start()
    log.info("baseline schedd listening on %s", server.url)
    _install_stop(loop)
    try:
        loop.run()
    finally:
        runner.stop()
        server.close()
        store.close()
        emit.close()


def run_agents(configs: list, mode: str = "pull", listen: Optional[str] = None, events_log: Optional[str] = None,
               first_delay: Optional[float] = None) -> None:
    """Run one or more agents in this process until SIGTERM."""
    import random

    from .agent import HttpTransport, NodeAgent, PushAgent, post_json
    from .runtime import RealTimeLoop

    emit = EventLog(events_log)
    loop = RealTimeLoop(time.time)
    server = None
    agents = []
    if mode == "pull":
        for cfg in configs:
            agent = NodeAgent(cfg, HttpTransport(cfg.server), loop, emit)
            delay = first_delay if first_delay is not None else random.Random(f"{cfg.seed}:{cfg.host_id}:boot").uniform(
                0, 0.1 * cfg.heartbeat_interval)
            agent.start(delay)
            agents.append(agent)
    elif mode == "push":
        if listen is None:
            raise ValueError("push mode needs --listen")
        if len(configs) != 1:
            raise ValueError("push mode runs one agent per process")
        cfg = configs[0]
        base = cfg.server.rstrip("/")

        def done(vm, job_id, code, now):
            try:
                post_json(base + "/v1/completion", {"job_id": job_id, "exit_code": code})
            except (ConnectionError, ProtocolError) as exc:
                log.warning("completion report for job %s failed: %s", job_id, exc)
        agent = PushAgent(cfg, loop, done, emit)
        agent.stopped = False
        agents.append(agent)
        server = HttpServer(listen, push_agent_routes(agent, loop)).start()
        slots = [{"vm_id": [s.vm_id.host_id, s.vm_id.slot_index], "attributes": s.attributes} for s in agent.slots]

        def register():
            post_json(base + "/v1/register", {"claim_url": server.url + "/v1/claim", "slots": slots})
        # Registration blocks on the schedd, which may call back into our claim route.
        threading.Thread(target=register, daemon=True).start()
    else:
        raise ValueError(f"unknown agent mode {mode!r}")
    _install_stop(loop)
    try:
        loop.run()
    finally:
        for a in agents:
            a.stop()
        if server is not None:
            server.close()
        emit.close()
