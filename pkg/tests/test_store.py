import json
import random
import signal
import subprocess
import sys
import textwrap
from dataclasses import replace

import pytest

from datasched import journal as jr
from datasched.journal import CorruptJournal
from datasched.model import HistoryKind, JobRecord, JobState, MachineRecord, MachineState, MatchRecord, VmId
from datasched.store import InvariantViolation, KeyConflict, Relation, Store, TupleOp, recover
from oracles import H, J, M, MA, HistoryDriver, _h, dual_path_histories


def submit(store, job_id, t=0.0):
    job = JobRecord(job_id, "ann", 60.0, submit_time=t)
    store.execute_txn([TupleOp.insert(J, job), _h(HistoryKind.SUBMITTED, job_id, t)], timestamp=t)
    return job


def test_empty_txn_commits_nothing(tmp_path):
    store = Store(tmp_path)
    before = store.last_lsn
    commit = store.execute_txn([])
    assert commit.txn_id == 0
    assert store.last_lsn == before
    store.close()


def test_match_for_absent_job_is_rejected_without_effect(tmp_path):
    store = Store(tmp_path)
    submit(store, 1)
    before = store.fingerprint()
    with pytest.raises(InvariantViolation):
        store.execute_txn([TupleOp.insert(MA, MatchRecord(99, VmId("h", 0), 0.0, 1.0))])
    assert store.fingerprint() == before
    store.close()
    assert recover(tmp_path)[0].fingerprint() == before


def test_key_conflict_rolls_back_whole_txn():
    store = Store(None)
    job = submit(store, 1)
    before = store.fingerprint()
    with pytest.raises(KeyConflict):
        store.execute_txn([TupleOp.insert(J, JobRecord(2, "bo", 6.0)), TupleOp.insert(J, job)])
    assert store.fingerprint() == before
    # The rejected txn must not leave a hole in history numbering.
    submit(store, 3)
    assert sorted(e.seq for e in store.select(H)) == [1, 2]


def test_update_of_missing_key_conflicts():
    store = Store(None)
    with pytest.raises(KeyConflict):
        store.execute_txn([TupleOp.update(J, JobRecord(5, "ann", 1.0))])


def test_history_is_append_only():
    store = Store(None)
    submit(store, 1)
    with pytest.raises(InvariantViolation):
        store.execute_txn([TupleOp.delete(H, 1)])


def test_select_examples():
    store = Store(None)
    for i in range(1, 5):
        submit(store, i, float(i))
    m = MachineRecord(VmId("h", 0), {}, last_heartbeat=0.0)
    store.execute_txn([TupleOp.insert(M, m), TupleOp.insert(M, MachineRecord(VmId("h", 1), {}, last_heartbeat=50.0))])
    job = store.get(J, 2)
    store.execute_txn([
        TupleOp.insert(MA, MatchRecord(2, m.vm_id, 1.0, 4.0)),
        TupleOp.update(J, replace(job, state=JobState.MATCHED)),
        TupleOp.update(M, replace(m, state=MachineState.MATCHED)),
    ])
    idle = store.select(J, lambda j: j.state is JobState.IDLE)
    assert sorted(j.job_id for j in idle) == [1, 3, 4]
    assert [j.job_id for j in store.iter_idle_jobs()] == [1, 3, 4]
    stale = store.select(M, lambda v: v.last_heartbeat < 10.0)
    assert [v.vm_id for v in stale] == [VmId("h", 0)]
    assert [v.vm_id for v in store.unclaimed_machines()] == [VmId("h", 1)]
    assert store.match_for_vm(VmId("h", 0)).job_id == 2


def test_two_commits_and_uncommitted_tail(tmp_path):
    store = Store(tmp_path)
    submit(store, 1)
    submit(store, 2)
    want = store.fingerprint()
    store.abandon()
    _, info = recover(tmp_path, use_snapshot=False)
    seg = jr.segment_paths(tmp_path)[-1][1]
    op = TupleOp.insert(J, JobRecord(3, "ann", 1.0)).to_json()
    with open(seg, "ab") as f:
        f.write(jr.encode_record(info.last_lsn + 1, info.last_txn_id + 1, jr.REC_OP, json.dumps(op).encode()))
    state, info = recover(tmp_path)
    assert state.fingerprint() == want
    assert info.replayed_txns == 2
    reopened = Store(tmp_path)
    assert reopened.fingerprint() == want
    # The next txn reuses the lsn the torn one had claimed.
    submit(reopened, 3)
    reopened.close()
    assert recover(tmp_path, use_snapshot=False)[0].fingerprint() == reopened.fingerprint()


def test_torn_tail_garbage_is_discarded(tmp_path):
    store = Store(tmp_path)
    submit(store, 1)
    store.abandon()
    seg = jr.segment_paths(tmp_path)[-1][1]
    size = seg.stat().st_size
    with open(seg, "ab") as f:
        f.write(b"\x07\x00\x00\x00garbage")
    state, info = recover(tmp_path)
    assert info.discarded_bytes == 11
    assert list(state.jobs) == [1]
    Store(tmp_path).close()
    assert seg.stat().st_size == size


def test_interior_corruption_is_refused_with_lsn(tmp_path):
    store = Store(tmp_path)
    submit(store, 1)
    submit(store, 2)
    store.close()
    seg = jr.segment_paths(tmp_path)[-1][1]
    records = list(jr.iter_records(seg))
    target = records[1]  # second record of the first txn
    raw = bytearray(seg.read_bytes())
    raw[target.end - 1] ^= 0xFF
    seg.write_bytes(bytes(raw))
    with pytest.raises(CorruptJournal) as info:
        recover(tmp_path)
    assert info.value.lsn == target.lsn
    with pytest.raises(CorruptJournal):
        Store(tmp_path)


def test_checkpoint_on_empty_store_and_repeat(tmp_path):
    store = Store(tmp_path)
    path, w = store.checkpoint()
    assert w == 0 and path.exists()
    path2, w2 = store.checkpoint()
    assert w2 == 0
    assert jr.snapshot_paths(tmp_path) == [(0, path2)]
    store.close()
    state, info = recover(tmp_path)
    assert info.snapshot_lsn == 0 and state.fingerprint() == Store(None).fingerprint()


def test_checkpoint_then_more_txns_recovers(tmp_path):
    store = Store(tmp_path, segment_bytes=512)
    for i in range(1, 6):
        submit(store, i)
    _, w = store.checkpoint(prune=True)
    for i in range(6, 16):
        submit(store, i)
    want = store.fingerprint()
    store.close()
    state, info = recover(tmp_path)
    assert info.snapshot_lsn == w and info.replayed_txns == 10
    assert state.fingerprint() == want
    # Pruned: the full-journal path no longer has the early records and must not pretend otherwise.
    with pytest.raises(CorruptJournal):
        recover(tmp_path, use_snapshot=False)


def test_snapshot_and_full_journal_agree_on_random_histories(tmp_path):
    checked, mismatches = dual_path_histories(60, seed=7, workdir=tmp_path)
    assert checked == 60 and mismatches == []


def test_reference_driver_exercises_rejections(tmp_path):
    store = Store(tmp_path, check="full")
    driver = HistoryDriver(store, random.Random(3))
    for _ in range(400):
        driver.step()
    assert driver.rejected > 10 and driver.committed > 100
    assert store.fingerprint() == driver.model.fingerprint()
    store.state.check_all()
    store.close()


def test_truncation_at_any_offset_yields_a_committed_prefix(tmp_path):
    store = Store(tmp_path)
    prefixes = [store.fingerprint()]
    boundaries = [0]
    store.checkpoint = lambda prune=True: (None, store.last_lsn)  # keep everything in one segment
    driver = HistoryDriver(store, random.Random(11))
    seg = jr.segment_paths(tmp_path)[-1][1]
    while len(prefixes) < 25:
        lsn = store.last_lsn
        driver.step()
        if store.last_lsn != lsn:
            prefixes.append(store.fingerprint())
            boundaries.append(seg.stat().st_size)
    store.abandon()
    data = seg.read_bytes()
    rng = random.Random(5)
    for cut in sorted(rng.sample(range(len(data) + 1), 60)) + [len(data)]:
        seg.write_bytes(data[:cut])
        state, _ = recover(tmp_path)
        committed = max(i for i, b in enumerate(boundaries) if b <= cut)
        assert state.fingerprint() == prefixes[committed], cut


CHILD = textwrap.dedent("""
    import sys
    from datasched.model import JobRecord, HistoryEvent, HistoryKind
    from datasched.store import Store, TupleOp, Relation
    store = Store(sys.argv[1], durability="full")
    i = 0
    while True:
        i += 1
        store.execute_txn([
            TupleOp.insert(Relation.JOBS, JobRecord(i, "ann", 60.0)),
            TupleOp.insert(Relation.HISTORY, HistoryEvent(0, i, HistoryKind.SUBMITTED, 0.0)),
        ])
        print(i, flush=True)
""")


def test_acknowledged_txns_survive_sigkill(tmp_path):
    proc = subprocess.Popen([sys.executable, "-c", CHILD, str(tmp_path)], stdout=subprocess.PIPE, text=True)
    acked = 0
    for line in proc.stdout:
        acked = int(line)
        if acked >= 40:
            break
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    state, _ = recover(tmp_path)
    ids = sorted(state.jobs)
    assert ids == list(range(1, len(ids) + 1))
    assert len(ids) >= acked


def test_accounting_conservation_over_history(tmp_path):
    store = Store(None)
    driver = HistoryDriver(store, random.Random(21))
    for _ in range(500):
        driver.step()
        a = store.accounting()
        assert a["submitted"] == a["idle"] + a["matched"] + a["running"] + a["completed"] + a["removed"]


def test_relation_enum_covers_all_tables():
    assert {r.value for r in Relation} == set(Store(None).fingerprint())
