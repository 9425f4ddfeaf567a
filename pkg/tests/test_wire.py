import json
import urllib.request

from datasched.experiment import ScenarioConfig, run_experiment
from datasched.runtime import RealTimeLoop
from datasched.service import SchedulerService, ServiceConfig
from datasched.store import Store
from datasched.wire import HttpServer, get_json, service_routes
from datasched.workload import WorkloadSpec


def post(url, body):
    req = urllib.request.Request(url, data=json.dumps(body).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"null")


def test_http_endpoints_in_process():
    loop = RealTimeLoop()
    svc = SchedulerService(ServiceConfig(), Store(None), loop=loop)
    server = HttpServer("127.0.0.1:0", service_routes(svc))
    server.start()
    try:
        status, body = post(server.url + "/v1/jobs", {"owner": "ann", "duration_s": 60, "count": 2, "token": "a"})
        assert status == 201 and body["job_ids"] == [1, 2]
        assert post(server.url + "/v1/jobs", {"owner": "ann", "duration_s": 0})[0] == 400
        hb = {"host_id": "h", "boot_epoch": 1, "entries": [{"vm_id": ["h", 0], "attributes": {}, "running": None, "completed": []}]}
        status, body = post(server.url + "/v1/heartbeat", hb)
        assert status == 200 and body["directives"][0]["action"] == "NONE"
        assert post(server.url + "/v1/heartbeat", {"host_id": "h"})[0] == 400
        jobs = get_json(server.url + "/v1/jobs?state=IDLE")
        assert jobs["total"] == 2
        assert get_json(server.url + "/v1/stats")["machines"] == 1
        req = urllib.request.Request(server.url + "/v1/jobs/1", method="DELETE")
        with urllib.request.urlopen(req, timeout=5) as resp:
            assert json.loads(resp.read())["status"] == "REMOVED"
    finally:
        server.close()


def test_wire_pull_with_faults(tmp_path):
    cfg = ScenarioConfig(mode="wire", hosts=3, slots_per_host=2, workload=WorkloadSpec.uniform(30, 60.0),
                         time_scale=60.0, fault_rate=0.3, faulty_fraction=0.34, seed=5)
    res = run_experiment(cfg)
    assert not res.failed, res.error
    assert res.summary["completed"] == 30
    assert res.summary["dropped"] > 0
    assert all(r.idle + r.matched + r.running + r.completed + r.removed == r.submitted for r in res.series.rows)
    assert res.summary["hb_p99_ms"] is not None


def test_wire_baseline():
    cfg = ScenarioConfig(mode="wire", system="baseline", hosts=2, slots_per_host=2,
                         workload=WorkloadSpec.uniform(8, 60.0), time_scale=60.0, throttle_rate=4.0)
    res = run_experiment(cfg)
    assert not res.failed, res.error
    assert res.summary["completed"] == 8
