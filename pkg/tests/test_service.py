import pytest

from datasched.model import HistoryKind, JobPhase, JobState, MachineState, VmId
from datasched.protocol import Action, CompletedInfo, HeartbeatReport, RunningInfo, SlotReport
from datasched.service import (
    AlreadyTerminal,
    BadFilter,
    NotFound,
    SchedulerService,
    ServiceConfig,
    ValidationError,
)
from datasched.store import Store


class Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def make(**kw):
    clock = Clock()
    svc = SchedulerService(ServiceConfig(**kw), Store(None), clock=clock)
    return svc, clock


def hb(host="h", epoch=1, running=None, completed=(), attrs=None, slots=1):
    entries = []
    for i in range(slots):
        r = running.get(i) if running else None
        entries.append(SlotReport(VmId(host, i), attrs, None if r is None else RunningInfo(r, JobPhase.EXECUTING),
                                  tuple(CompletedInfo(j) for j in completed if i == 0)))
    return HeartbeatReport(host, epoch, tuple(entries))


def actions(resp):
    return [(d.action, d.job["job_id"] if d.job else d.job_id) for d in resp.directives]


def test_submit_assigns_consecutive_ids_and_token_is_idempotent():
    svc, _ = make()
    assert svc.submit_job("ann", 60, count=3, token="t1") == [1, 2, 3]
    assert svc.submit_job("ann", 60, count=3, token="t1") == [1, 2, 3]
    assert svc.submit_job("bo", 6) == [4]
    assert svc.stats()["submitted"] == 4


@pytest.mark.parametrize("kw", [
    {"owner": ""}, {"duration_s": 0}, {"duration_s": float("nan")}, {"count": 0}, {"count": True},
    {"requirements": "machine.memory_mb >="}, {"attributes": {"x": {}}},
])
def test_submit_validation(kw):
    svc, _ = make()
    args = {"owner": "ann", "duration_s": 60.0}
    args.update(kw)
    with pytest.raises(ValidationError):
        svc.submit_job(**args)


def test_full_lifecycle_through_heartbeats():
    svc, clock = make()
    [job] = svc.submit_job("ann", 60)
    assert actions(svc.handle_heartbeat(hb(attrs={"memory_mb": 512}))) == [(Action.NONE, None)]
    assert svc.scheduling_pass() == 1
    clock.now = 1.0
    assert actions(svc.handle_heartbeat(hb())) == [(Action.MATCHINFO, job)]
    assert svc.accept_match(job, VmId("h", 0)) == "OK"
    assert svc.accept_match(job, VmId("h", 0)) == "OK"  # repeated accept is harmless
    clock.now = 61.0
    svc.handle_heartbeat(hb(completed=[job]))
    kinds = [e["kind"] for e in svc.query("history")["items"]]
    assert kinds == ["SUBMITTED", "MACHINE_BOOT", "MATCHED", "STARTED", "COMPLETED"]
    assert svc.stats()["completed"] == 1
    assert svc.store.get("machines", VmId("h", 0)).state is MachineState.UNCLAIMED


def test_requirements_respected():
    svc, _ = make()
    svc.submit_job("ann", 60, requirements="machine.memory_mb >= 1024")
    svc.handle_heartbeat(hb(attrs={"memory_mb": 512}))
    assert svc.scheduling_pass() == 0
    svc.handle_heartbeat(hb(host="big", attrs={"memory_mb": 2048}))
    assert svc.scheduling_pass() == 1
    assert svc.query("machines", state="MATCHED")["items"][0]["vm_id"] == ["big", 0]


def test_stale_accept_after_expiry():
    svc, clock = make(heartbeat_interval_s=10, match_expiry_intervals=3)
    [job] = svc.submit_job("ann", 60)
    svc.handle_heartbeat(hb(attrs={}))
    svc.scheduling_pass()
    clock.now = 30.0
    assert svc.accept_match(job, VmId("h", 0)) == "STALE"
    assert svc.store.get("jobs", job).state is JobState.IDLE
    assert svc.accept_match(job, VmId("other", 0)) == "STALE"


def test_expire_sweep_and_dead_node_requeue():
    svc, clock = make(heartbeat_interval_s=10, match_expiry_intervals=1, dead_node_intervals=3)
    a, b = svc.submit_job("ann", 600, count=2)
    svc.handle_heartbeat(hb(attrs={}, slots=2))
    svc.scheduling_pass()
    svc.accept_match(a, VmId("h", 0))
    clock.now = 10.0
    counts = svc.expire_stale()
    assert counts.expired_matches == 1 and counts.dead_machines == 0
    clock.now = 31.0
    counts = svc.expire_stale()
    assert counts.requeued == 1 and counts.dead_machines == 2
    assert {j["job_id"]: j["state"] for j in svc.query("jobs")["items"]} == {a: "IDLE", b: "IDLE"}
    acc = svc.stats()
    assert acc["dropped"] == 1 and acc["machines"] == 0


def test_omitted_running_report_drops_after_two():
    svc, clock = make()
    [job] = svc.submit_job("ann", 60)
    svc.handle_heartbeat(hb(attrs={}))
    svc.scheduling_pass()
    svc.accept_match(job, VmId("h", 0))
    svc.handle_heartbeat(hb())
    assert svc.store.get("jobs", job).state is JobState.RUNNING
    svc.handle_heartbeat(hb())
    assert svc.store.get("jobs", job).state is JobState.IDLE
    assert svc.stats()["dropped"] == 1


def test_remove_idle_running_and_finished():
    svc, _ = make()
    a, b = svc.submit_job("ann", 60, count=2)
    assert svc.remove_job(a) == "REMOVED"
    with pytest.raises(AlreadyTerminal):
        svc.remove_job(a)
    with pytest.raises(NotFound):
        svc.remove_job(99)
    svc.handle_heartbeat(hb(attrs={}))
    svc.scheduling_pass()
    svc.accept_match(b, VmId("h", 0))
    assert svc.remove_job(b) == "RELEASE_PENDING"
    resp = svc.handle_heartbeat(hb(running={0: b}))
    assert actions(resp) == [(Action.RELEASE, b)]
    assert svc.stats()["removed"] == 2 and svc.stats()["running"] == 0


def test_unknown_running_job_gets_release():
    svc, _ = make()
    resp = svc.handle_heartbeat(hb(attrs={}, running={0: 42}))
    assert actions(resp) == [(Action.RELEASE, 42)]


def test_host_restart_drops_its_runs():
    svc, _ = make()
    [job] = svc.submit_job("ann", 60)
    svc.handle_heartbeat(hb(attrs={}))
    svc.scheduling_pass()
    svc.accept_match(job, VmId("h", 0))
    svc.handle_heartbeat(hb(epoch=2))
    assert svc.store.get("jobs", job).state is JobState.IDLE
    assert [e.kind for e in svc.store.select("history")].count(HistoryKind.MACHINE_BOOT) == 2


def test_query_filters_and_paging():
    svc, clock = make()
    svc.submit_job("ann", 60, count=3)
    clock.now = 5.0
    svc.submit_job("bo", 60, count=2)
    assert svc.query("jobs", owner="bo")["total"] == 2
    page = svc.query("jobs", limit=2, offset=1)
    assert [j["job_id"] for j in page["items"]] == [2, 3] and page["total"] == 5
    assert svc.query("history", since=5.0)["total"] == 2
    assert svc.query("history", job_id=1)["total"] == 1
    for bad in [dict(kind="jobs", state="NOPE"), dict(kind="jobs", since=1.0), dict(kind="machines", owner="x"),
                dict(kind="history", state="IDLE"), dict(kind="cats"), dict(kind="jobs", limit=-1)]:
        with pytest.raises(BadFilter):
            svc.query(**bad)


def test_state_survives_restart(tmp_path):
    clock = Clock()
    svc = SchedulerService(ServiceConfig(), Store(tmp_path), clock=clock)
    svc.submit_job("ann", 60, count=2, token="x")
    svc.store.close()
    again = SchedulerService(ServiceConfig(), Store(tmp_path), clock=clock)
    assert again.submit_job("ann", 60, count=2, token="x") == [1, 2]
    assert again.submit_job("ann", 60) == [3]


def test_config_validation():
    for kw in [dict(heartbeat_interval_s=0), dict(match_expiry_intervals=0.5), dict(durability="sometimes"),
               dict(time_scale=-1), dict(max_retries=-1)]:
        with pytest.raises(ValueError):
            ServiceConfig(**kw)
    assert ServiceConfig(heartbeat_interval_s=60, time_scale=50).heartbeat_interval == 1.2
