"""Independent reference implementations used by the property tests.

Nothing here calls into the code under test except to build inputs (the AST
node classes, record types and TupleOp constructors) or, in the store
driver, to issue the transactions being checked.
"""

from __future__ import annotations

import json
import random
from dataclasses import replace

from datasched.expr import Attr, Binary, Literal, Unary, parse_expression
from datasched.model import (
    HistoryEvent,
    HistoryKind,
    JobRecord,
    JobState,
    MachineRecord,
    MachineState,
    MatchRecord,
    RunRecord,
    VmId,
)
from datasched.store import InvariantViolation, KeyConflict, Relation, TupleOp

# --------------------------------------------------------------------------
# Expression oracle: a plain tree walk with tagged results.

U = ("U",)  # UNDEFINED


def _tag(v):
    if v is U:
        return "U"
    if isinstance(v, bool):
        return "b"
    if isinstance(v, (int, float)):
        return "n"
    if isinstance(v, str):
        return "s"
    return "U"


def oracle_eval(node, job: dict, machine: dict):
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Attr):
        env = job if node.scope == "job" else machine
        if node.name not in env:
            return U
        v = env[node.name]
        return v if _tag(v) != "U" else U
    if isinstance(node, Unary):
        v = oracle_eval(node.operand, job, machine)
        if node.op == "!":
            return (not v) if _tag(v) == "b" else U
        return -v if _tag(v) == "n" else U
    a = oracle_eval(node.left, job, machine)
    b = oracle_eval(node.right, job, machine)
    ta, tb = _tag(a), _tag(b)
    op = node.op
    if op == "&&":
        if (ta == "b" and a is False) or (tb == "b" and b is False):
            return False
        if ta == "b" and tb == "b":
            return True
        return U
    if op == "||":
        if (ta == "b" and a is True) or (tb == "b" and b is True):
            return True
        if ta == "b" and tb == "b":
            return False
        return U
    if op in ("==", "!="):
        if ta == "n" and tb == "n":
            same = float(a) == float(b)
        elif ta == tb and ta in ("s", "b"):
            same = a == b
        else:
            return U
        return same if op == "==" else not same
    if ta != "n" or tb != "n":
        return U
    if op in ("<", "<=", ">", ">="):
        x, y = float(a), float(b)
        return {"<": x < y, "<=": x <= y, ">": x > y, ">=": x >= y}[op]
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    # Division: by zero is UNDEFINED; two integers truncate toward zero.
    if b == 0:
        return U
    if isinstance(a, int) and isinstance(b, int):
        return a // b if a * b >= 0 else -((-a) // b)
    return a / b


def same_value(impl, oracle) -> bool:
    from datasched.expr import UNDEFINED

    if impl is UNDEFINED or oracle is U:
        return impl is UNDEFINED and oracle is U
    if type(impl) is not type(oracle):
        return False
    if isinstance(impl, float) and impl != impl:
        return oracle != oracle
    return impl == oracle


ATTR_NAMES = ("a", "b", "c", "memory_mb", "arch")
STRINGS = ("x86_64", "arm", "", "x\"y")


def random_scalar(rng: random.Random, negative: bool = True):
    kind = rng.randrange(4)
    if kind == 0:
        return rng.randint(-4 if negative else 0, 9)
    if kind == 1:
        return rng.choice([0.0, 0.5, 2.25, 1024.0, 3.0]) * (rng.choice([1, -1]) if negative else 1)
    if kind == 2:
        return rng.random() < 0.5
    return rng.choice(STRINGS)


def random_expr(rng: random.Random, depth: int = 6):
    """A random AST of depth <= ``depth``; literals are non-negative so print/parse is exact."""
    if depth <= 1 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return Attr(rng.choice(("job", "machine")), rng.choice(ATTR_NAMES))
        return Literal(random_scalar(rng, negative=False))
    r = rng.random()
    if r < 0.15:
        return Unary(rng.choice(("!", "-")), random_expr(rng, depth - 1))
    op = rng.choice(("||", "&&", "==", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/"))
    return Binary(op, random_expr(rng, depth - 1), random_expr(rng, depth - 1))


def random_env(rng: random.Random) -> dict:
    return {name: random_scalar(rng) for name in ATTR_NAMES if rng.random() < 0.75}


# --------------------------------------------------------------------------
# Matchmaking oracle: the greedy FIFO policy written out pair by pair.


def _true(expr, job_attrs, machine_attrs) -> bool:
    return oracle_eval(expr, job_attrs, machine_attrs) is True


def _rank(job: JobRecord, job_attrs, machine_attrs) -> float:
    if job.rank is None:
        return 0.0
    v = oracle_eval(job.rank, job_attrs, machine_attrs)
    return float(v) if _tag(v) == "n" else 0.0


def oracle_matches(jobs, machines) -> list[tuple[int, VmId]]:
    taken: set = set()
    out = []
    for job in sorted(jobs, key=lambda j: (j.submit_time, j.job_id)):
        jattrs = job.evaluation_attrs()
        best, best_rank = None, None
        for m in sorted(machines, key=lambda m: m.vm_id):
            if m.vm_id in taken or not _true(job.requirements, jattrs, m.attributes):
                continue
            mreq = m.attributes.get("requirements")
            if isinstance(mreq, str):
                try:
                    mexpr = parse_expression(mreq)
                except ValueError:
                    continue
                if not _true(mexpr, jattrs, m.attributes):
                    continue
            r = _rank(job, jattrs, m.attributes)
            if best is None or r > best_rank:
                best, best_rank = m, r
        if best is not None:
            taken.add(best.vm_id)
            out.append((job.job_id, best.vm_id))
    return out


# --------------------------------------------------------------------------
# Store histories with a reference model.

J, M, MA, R, H = Relation.JOBS, Relation.MACHINES, Relation.MATCHES, Relation.RUNS, Relation.HISTORY


class ReferenceModel:
    """What the relations should contain: plain dicts updated only on commit."""

    def __init__(self):
        self.tables = {rel: {} for rel in Relation}
        self.next_seq = 1

    def apply(self, ops: list[TupleOp]) -> None:
        for op in ops:
            table = self.tables[op.relation]
            if op.relation is H:
                ev = replace(op.value, seq=self.next_seq)
                table[self.next_seq] = ev
                self.next_seq += 1
            elif op.kind.value == "DELETE":
                del table[op.key]
            else:
                table[op.key] = op.value

    def fingerprint(self) -> dict:
        return {rel.value: sorted(json.dumps(v.to_dict(), sort_keys=True) for v in t.values())
                for rel, t in self.tables.items()}


def _h(kind, job_id, t, vm=None, **kw) -> TupleOp:
    return TupleOp.insert(H, HistoryEvent(0, job_id, kind, t, vm, **kw))


class HistoryDriver:
    """Issues random lifecycle transactions against ``store`` and mirrors them in a ReferenceModel."""

    def __init__(self, store, rng: random.Random, on_checkpoint=None):
        self.store = store
        self.rng = rng
        self.model = ReferenceModel()
        self.t = 0.0
        self.next_job = 1
        self.next_host = 0
        self.rejected = 0
        self.committed = 0
        self.on_checkpoint = on_checkpoint

    @property
    def tables(self):
        return self.model.tables

    def _commit(self, ops, expect_ok=True) -> None:
        self.t += 1.0
        try:
            self.store.execute_txn(ops, timestamp=self.t)
        except (KeyConflict, InvariantViolation):
            if expect_ok:
                raise
            self.rejected += 1
            return
        if not expect_ok:
            raise AssertionError(f"transaction should have been rejected: {[o.describe() for o in ops]}")
        self.model.apply(ops)
        self.committed += 1

    def _pick(self, rel, pred=lambda v: True):
        cands = [v for k, v in sorted(self.tables[rel].items(), key=lambda kv: str(kv[0])) if pred(v)]
        return self.rng.choice(cands) if cands else None

    def step(self) -> None:
        rng = self.rng
        r = rng.random()
        jobs, machines = self.tables[J], self.tables[M]
        if r < 0.18:
            n = rng.randint(1, 3)
            ops = []
            for _ in range(n):
                jid = self.next_job
                self.next_job += 1
                ops.append(TupleOp.insert(J, JobRecord(jid, rng.choice(["ann", "bo"]), rng.choice([6.0, 60.0]),
                                                       attributes={"k": rng.randint(0, 3)}, submit_time=self.t)))
                ops.append(_h(HistoryKind.SUBMITTED, jid, self.t))
            self._commit(ops)
        elif r < 0.26:
            host = f"h{self.next_host}"
            self.next_host += 1
            ops = [TupleOp.insert(M, MachineRecord(VmId(host, i), {"memory_mb": 1024 * (i + 1)}, last_heartbeat=self.t))
                   for i in range(rng.randint(1, 2))]
            self._commit(ops)
        elif r < 0.42:
            job = self._pick(J, lambda j: j.state is JobState.IDLE)
            m = self._pick(M, lambda m: m.state is MachineState.UNCLAIMED)
            if job and m:
                self._commit([
                    TupleOp.insert(MA, MatchRecord(job.job_id, m.vm_id, self.t, self.t + 3)),
                    TupleOp.update(J, replace(job, state=JobState.MATCHED)),
                    TupleOp.update(M, replace(m, state=MachineState.MATCHED)),
                    _h(HistoryKind.MATCHED, job.job_id, self.t, m.vm_id),
                ])
        elif r < 0.56:
            match = self._pick(MA)
            if match:
                job, m = jobs[match.job_id], machines[match.vm_id]
                if rng.random() < 0.75:
                    self._commit([
                        TupleOp.delete(MA, match.job_id),
                        TupleOp.insert(R, RunRecord(job.job_id, m.vm_id, self.t, self.t)),
                        TupleOp.update(J, replace(job, state=JobState.RUNNING)),
                        TupleOp.update(M, replace(m, state=MachineState.CLAIMED)),
                        _h(HistoryKind.STARTED, job.job_id, self.t, m.vm_id),
                    ])
                else:  # expiry
                    self._commit([
                        TupleOp.delete(MA, match.job_id),
                        TupleOp.update(J, replace(job, state=JobState.IDLE)),
                        TupleOp.update(M, replace(m, state=MachineState.UNCLAIMED)),
                    ])
        elif r < 0.72:
            run = self._pick(R)
            if run:
                job, m = jobs[run.job_id], machines[run.vm_id]
                if rng.random() < 0.7:
                    self._commit([
                        TupleOp.delete(R, run.job_id),
                        TupleOp.delete(J, run.job_id),
                        TupleOp.update(M, replace(m, state=MachineState.UNCLAIMED)),
                        _h(HistoryKind.COMPLETED, run.job_id, self.t, m.vm_id, exit_code=0),
                    ])
                else:
                    self._commit([
                        TupleOp.delete(R, run.job_id),
                        TupleOp.update(J, replace(job, state=JobState.IDLE, retry_count=job.retry_count + 1)),
                        TupleOp.update(M, replace(m, state=MachineState.UNCLAIMED)),
                        _h(HistoryKind.DROPPED, run.job_id, self.t, m.vm_id),
                    ])
        elif r < 0.78:
            job = self._pick(J, lambda j: j.state is JobState.IDLE)
            if job:
                self._commit([TupleOp.delete(J, job.job_id), _h(HistoryKind.REMOVED, job.job_id, self.t)])
        elif r < 0.80:
            m = self._pick(M)
            if m:
                self._commit([TupleOp.update(M, replace(m, last_heartbeat=self.t))])
        elif r < 0.90:
            self._bad_txn()
        elif r < 0.95:
            self.store.checkpoint(prune=False)
            if self.on_checkpoint:
                self.on_checkpoint()
        else:
            self._commit([])

    def _bad_txn(self) -> None:
        rng = self.rng
        job = self._pick(J, lambda j: j.state is JobState.IDLE)
        choice = rng.randrange(4)
        if choice == 0:
            # match for a job that does not exist
            self._commit([TupleOp.insert(MA, MatchRecord(10**6, VmId("ghost", 0), self.t, self.t + 1))], expect_ok=False)
        elif choice == 1 and job:
            # duplicate insert, after a valid op in the same transaction
            self._commit([_h(HistoryKind.SUBMITTED, 10**6, self.t), TupleOp.insert(J, job)], expect_ok=False)
        elif choice == 2 and job:
            # state flip with no supporting match tuple
            self._commit([TupleOp.update(J, replace(job, state=JobState.MATCHED))], expect_ok=False)
        else:
            self._commit([TupleOp.delete(R, 10**6)], expect_ok=False)


def random_instance(rng: random.Random, n_jobs: int, n_machines: int):
    """Jobs with random requirement/rank trees; machines drawn from a small attribute pool so groups repeat."""
    jobs = []
    for i in range(n_jobs):
        req = random_expr(rng, rng.randint(1, 6))
        if rng.random() < 0.3:
            req = Literal(True)
        rank = random_expr(rng, rng.randint(1, 4)) if rng.random() < 0.7 else None
        jobs.append(JobRecord(i + 1, rng.choice(["ann", "bo"]), 60.0, req, rank,
                              {k: v for k, v in random_env(rng).items()}, submit_time=float(rng.randint(0, 3))))
    pool = [random_env(rng) for _ in range(3)]
    machines = []
    for i in range(n_machines):
        attrs = dict(rng.choice(pool))
        if rng.random() < 0.2:
            attrs["requirements"] = rng.choice(["job.a > 0", "true", "job.owner == \"ann\"", "job.c ==", "machine.a"])
        machines.append(MachineRecord(VmId(rng.choice(["h0", "h1", "h2"]), i), attrs))
    return jobs, machines


def matchmaker_equivalence(n_expressions: int, seed: int):
    """Evaluate ``n_expressions`` random trees (and run the matchmaker on them) against the oracles.

    Returns ``(expressions_checked, mismatches)``; each mismatch is a short description.
    """
    from datasched.expr import evaluate, to_text
    from datasched.matchmaker import find_matches

    rng = random.Random(seed)
    checked = 0
    mismatches = []
    while checked < n_expressions:
        jobs, machines = random_instance(rng, rng.randint(1, 4), rng.randint(1, 4))
        for job in jobs:
            for tree in (job.requirements, job.rank):
                if tree is None:
                    continue
                checked += 1
                text = to_text(tree)
                if parse_expression(text) != tree:
                    mismatches.append(f"round trip {text!r}")
                for m in machines:
                    got = evaluate(tree, job.evaluation_attrs(), m.attributes)
                    want = oracle_eval(tree, job.evaluation_attrs(), m.attributes)
                    if not same_value(got, want):
                        mismatches.append(f"eval {text!r}: {got!r} != {want!r}")
        got = find_matches(jobs, machines)
        want = oracle_matches(jobs, machines)
        if got != want:
            mismatches.append(f"matches {got} != {want}")
    return checked, mismatches


def dual_path_histories(n_histories: int, seed: int, workdir, steps=(5, 40)):
    """Run random histories; after each, recover with and without the snapshot and compare.

    Each history may end with a torn tail (garbage bytes) or an uncommitted
    transaction prefix written straight to the journal.  Returns
    ``(histories, mismatches)``.
    """
    import shutil
    from pathlib import Path

    from datasched import journal as jr
    from datasched.store import Store, recover

    rng = random.Random(seed)
    mismatches = []
    for h in range(n_histories):
        d = Path(workdir) / f"h{h}"
        store = Store(d, durability="full", check="full", segment_bytes=rng.choice([4096, 1 << 20]))
        driver = HistoryDriver(store, random.Random(rng.random()))
        for _ in range(rng.randint(*steps)):
            driver.step()
        if rng.random() < 0.5:
            store.checkpoint(prune=False)
            for _ in range(rng.randint(0, 5)):
                driver.step()
        store.abandon()
        tail = rng.random()
        segs = jr.segment_paths(d)
        if segs and tail < 0.3:
            with open(segs[-1][1], "ab") as f:
                f.write(bytes(rng.randrange(256) for _ in range(rng.randint(1, 40))))
        elif segs and tail < 0.6:
            # A transaction whose commit record never made it to disk.
            _, info = recover(d, use_snapshot=False)
            rec = jr.encode_record(info.last_lsn + 1, info.last_txn_id + 1, jr.REC_OP,
                                   json.dumps(TupleOp.delete(J, 1).to_json()).encode())
            with open(segs[-1][1], "ab") as f:
                f.write(rec[: rng.randint(1, len(rec))] if rng.random() < 0.5 else rec)
        want = driver.model.fingerprint()
        via_snapshot, _ = recover(d, use_snapshot=True)
        via_journal, _ = recover(d, use_snapshot=False)
        if via_snapshot.fingerprint() != want:
            mismatches.append(f"history {h}: snapshot path differs from reference")
        if via_journal.fingerprint() != want:
            mismatches.append(f"history {h}: journal path differs from reference")
        reopened = Store(d, check="full")
        if reopened.fingerprint() != want:
            mismatches.append(f"history {h}: reopened store differs from reference")
        reopened.close()
        shutil.rmtree(d)
    return n_histories, mismatches
