"""Journaled transactional tuple store.

Five relations -- jobs, machines, matches, runs, history -- held in memory
and made durable through a write-ahead journal (see :mod:`datasched.journal`).

Writers are serialized by a single lock; every transaction is applied to the
in-memory relations, checked against the referential invariants of
:mod:`datasched.model`, appended to the journal and flushed, and only then
acknowledged.  A failed check or a failed write rolls the in-memory state back
so callers never observe a partial transaction.
"""

from __future__ import annotations

import bisect
import enum
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

from . import journal as jr
from .journal import CorruptJournal
from .model import (
    HistoryEvent,
    HistoryKind,
    InvalidStateCombination,
    JobRecord,
    JobState,
    MachineRecord,
    MachineState,
    MatchRecord,
    RunRecord,
    VmId,
    derive_job_state,
    derive_machine_state,
)

log = logging.getLogger(__name__)

__all__ = [
    "Commit",
    "CorruptJournal",
    "InvariantViolation",
    "KeyConflict",
    "OpKind",
    "Relation",
    "Store",
    "StoreError",
    "StoreState",
    "TupleOp",
    "recover",
]


class OpKind(str, enum.Enum):
    INSERT = "INSERT"
    UPDATE = "UPDATE"
    DELETE = "DELETE"


class Relation(str, enum.Enum):
    JOBS = "jobs"
    MACHINES = "machines"
    MATCHES = "matches"
    RUNS = "runs"
    HISTORY = "history"


RECORD_TYPES = {
    Relation.JOBS: JobRecord,
    Relation.MACHINES: MachineRecord,
    Relation.MATCHES: MatchRecord,
    Relation.RUNS: RunRecord,
    Relation.HISTORY: HistoryEvent,
}


def key_of(relation: Relation, value: Any):
    if relation is Relation.MACHINES:
        return value.vm_id
    if relation is Relation.HISTORY:
        return value.seq
    return value.job_id


def _encode_key(relation: Relation, key):
    if relation is Relation.MACHINES:
        return [key.host_id, key.slot_index]
    return key


def _decode_key(relation: Relation, raw):
    if relation is Relation.MACHINES:
        return VmId.coerce(raw)
    return None if raw is None else int(raw)


@dataclass(frozen=True)
class TupleOp:
    kind: OpKind
    relation: Relation
    key: Any
    value: Any = None

    @classmethod
    def insert(cls, relation: Relation, value) -> "TupleOp":
        # History keys are assigned by the store at commit time.
        key = None if relation is Relation.HISTORY else key_of(relation, value)
        return cls(OpKind.INSERT, relation, key, value)

    @classmethod
    def update(cls, relation: Relation, value) -> "TupleOp":
        return cls(OpKind.UPDATE, relation, key_of(relation, value), value)

    @classmethod
    def delete(cls, relation: Relation, key) -> "TupleOp":
        return cls(OpKind.DELETE, relation, key)

    def to_json(self) -> dict[str, Any]:
        d = {"k": self.kind.value, "r": self.relation.value, "key": _encode_key(self.relation, self.key)}
        if self.value is not None:
            d["v"] = self.value.to_dict()
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TupleOp":
        relation = Relation(d["r"])
        value = d.get("v")
        return cls(
            OpKind(d["k"]),
            relation,
            _decode_key(relation, d.get("key")),
            None if value is None else RECORD_TYPES[relation].from_dict(value),
        )

    def describe(self) -> str:
        return f"{self.kind.value} {self.relation.value}"


class StoreError(Exception):
    pass


class KeyConflict(StoreError):
    pass


class InvariantViolation(StoreError):
    pass


@dataclass(frozen=True)
class Commit:
    txn_id: int
    first_lsn: int
    last_lsn: int
    timestamp: float = 0.0


_MISSING = object()


class StoreState:
    """The in-memory relations plus the key/state indexes."""

    def __init__(self):
        self.jobs: dict[int, JobRecord] = {}
        self.machines: dict[VmId, MachineRecord] = {}
        self.matches: dict[int, MatchRecord] = {}
        self.runs: dict[int, RunRecord] = {}
        self.history: dict[int, HistoryEvent] = {}
        # Indexes.
        self.idle: list[tuple[float, int]] = []
        self.job_counts = {s: 0 for s in JobState}
        self.unclaimed: dict[VmId, None] = {}
        self.match_by_vm: dict[VmId, int] = {}
        self.run_by_vm: dict[VmId, int] = {}
        self.kind_counts = {k: 0 for k in HistoryKind}
        self.next_seq = 1
        self.max_job_id = 0

    def table(self, relation: Relation) -> dict:
        return getattr(self, relation.value)

    # -- raw mutation with index maintenance ------------------------------

    def put(self, relation: Relation, key, new) -> None:
        table = self.table(relation)
        old = table.get(key)
        if relation is Relation.JOBS:
            if old is not None:
                self._unindex_job(old)
            self._index_job(new)
            self.max_job_id = max(self.max_job_id, new.job_id)
        elif relation is Relation.MACHINES:
            if new.state is MachineState.UNCLAIMED:
                self.unclaimed[key] = None
            else:
                self.unclaimed.pop(key, None)
        elif relation is Relation.MATCHES:
            if old is not None and self.match_by_vm.get(old.vm_id) == key:
                del self.match_by_vm[old.vm_id]
            holder = self.match_by_vm.get(new.vm_id)
            if holder is not None and holder != key:
                raise InvariantViolation(f"machine {new.vm_id} already matched to job {holder}")
            self.match_by_vm[new.vm_id] = key
        elif relation is Relation.RUNS:
            if old is not None and self.run_by_vm.get(old.vm_id) == key:
                del self.run_by_vm[old.vm_id]
            holder = self.run_by_vm.get(new.vm_id)
            if holder is not None and holder != key:
                raise InvariantViolation(f"machine {new.vm_id} already running job {holder}")
            self.run_by_vm[new.vm_id] = key
        elif relation is Relation.HISTORY:
            if old is not None:
                self.kind_counts[old.kind] -= 1
            self.kind_counts[new.kind] += 1
            self.next_seq = max(self.next_seq, key + 1)
            if new.job_id is not None:
                self.max_job_id = max(self.max_job_id, new.job_id)
        table[key] = new

    def remove(self, relation: Relation, key) -> None:
        table = self.table(relation)
        old = table.pop(key)
        if relation is Relation.JOBS:
            self._unindex_job(old)
        elif relation is Relation.MACHINES:
            self.unclaimed.pop(key, None)
        elif relation is Relation.MATCHES:
            if self.match_by_vm.get(old.vm_id) == key:
                del self.match_by_vm[old.vm_id]
        elif relation is Relation.RUNS:
            if self.run_by_vm.get(old.vm_id) == key:
                del self.run_by_vm[old.vm_id]
        elif relation is Relation.HISTORY:
            self.kind_counts[old.kind] -= 1

    def _index_job(self, job: JobRecord) -> None:
        self.job_counts[job.state] += 1
        if job.state is JobState.IDLE:
            bisect.insort(self.idle, (job.submit_time, job.job_id))

    def _unindex_job(self, job: JobRecord) -> None:
        self.job_counts[job.state] -= 1
        if job.state is JobState.IDLE:
            entry = (job.submit_time, job.job_id)
            i = bisect.bisect_left(self.idle, entry)
            if i < len(self.idle) and self.idle[i] == entry:
                del self.idle[i]

    # -- invariants --------------------------------------------------------

    def check_job(self, job_id: int) -> None:
        job = self.jobs.get(job_id)
        match = self.matches.get(job_id)
        run = self.runs.get(job_id)
        if job is None:
            if match is not None or run is not None:
                raise InvariantViolation(f"match/run references missing job {job_id}")
            return
        try:
            expected = derive_job_state(match is not None, run is not None)
        except InvalidStateCombination as exc:
            raise InvariantViolation(f"job {job_id}: {exc}") from None
        if job.state is not expected:
            raise InvariantViolation(f"job {job_id} is {job.state.value} but tuples say {expected.value}")
        if match is not None:
            machine = self.machines.get(match.vm_id)
            if machine is None or machine.state is not MachineState.MATCHED:
                raise InvariantViolation(f"match for job {job_id} references machine {match.vm_id} not MATCHED")
        if run is not None:
            machine = self.machines.get(run.vm_id)
            if machine is None or machine.state is not MachineState.CLAIMED:
                raise InvariantViolation(f"run for job {job_id} references machine {run.vm_id} not CLAIMED")

    def check_machine(self, vm_id: VmId) -> None:
        machine = self.machines.get(vm_id)
        has_match = vm_id in self.match_by_vm
        has_run = vm_id in self.run_by_vm
        if machine is None:
            if has_match or has_run:
                raise InvariantViolation(f"match/run references missing machine {vm_id}")
            return
        try:
            expected = derive_machine_state(has_match, has_run)
        except InvalidStateCombination as exc:
            raise InvariantViolation(f"machine {vm_id}: {exc}") from None
        if machine.state is not expected:
            raise InvariantViolation(f"machine {vm_id} is {machine.state.value} but tuples say {expected.value}")

    def check_all(self) -> None:
        """Full-scan check of every referential invariant and every index."""
        for job_id in self.jobs:
            self.check_job(job_id)
        for job_id in list(self.matches) + list(self.runs):
            self.check_job(job_id)
        for vm_id in self.machines:
            self.check_machine(vm_id)
        for vm_id in list(self.match_by_vm) + list(self.run_by_vm):
            self.check_machine(vm_id)
        for vm_id, job_id in self.match_by_vm.items():
            if self.matches.get(job_id) is None or self.matches[job_id].vm_id != vm_id:
                raise InvariantViolation(f"match index stale for {vm_id}")
        for vm_id, job_id in self.run_by_vm.items():
            if self.runs.get(job_id) is None or self.runs[job_id].vm_id != vm_id:
                raise InvariantViolation(f"run index stale for {vm_id}")
        if len(self.match_by_vm) != len(self.matches) or len(self.run_by_vm) != len(self.runs):
            raise InvariantViolation("a machine is referenced by more than one match or run")
        idle = sorted((j.submit_time, j.job_id) for j in self.jobs.values() if j.state is JobState.IDLE)
        if idle != self.idle:
            raise InvariantViolation("idle index out of sync")

    # -- accounting --------------------------------------------------------

    def accounting(self) -> dict[str, int]:
        return {
            "submitted": self.kind_counts[HistoryKind.SUBMITTED],
            "idle": self.job_counts[JobState.IDLE],
            "matched": self.job_counts[JobState.MATCHED],
            "running": self.job_counts[JobState.RUNNING],
            "completed": self.kind_counts[HistoryKind.COMPLETED],
            "removed": self.kind_counts[HistoryKind.REMOVED],
            "dropped": self.kind_counts[HistoryKind.DROPPED],
        }

    # -- snapshot encoding -------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        return {rel.value: [v.to_dict() for v in self.table(rel).values()] for rel in Relation}

    @classmethod
    def from_document(cls, doc: dict[str, Any]) -> "StoreState":
        state = cls()
        for rel in Relation:
            rtype = RECORD_TYPES[rel]
            for raw in doc.get(rel.value, []):
                value = rtype.from_dict(raw)
                state.put(rel, key_of(rel, value), value)
        return state

    def fingerprint(self) -> dict[str, Any]:
        """Canonical, order-independent content used by equivalence checks."""
        return {
            rel.value: sorted(json.dumps(v.to_dict(), sort_keys=True) for v in self.table(rel).values())
            for rel in Relation
        }

    def apply_op(self, op: TupleOp, undo: list) -> TupleOp:
        """Apply one op, pushing its inverse onto ``undo``; returns the op as applied."""
        table = self.table(op.relation)
        if op.relation is Relation.HISTORY:
            if op.kind is not OpKind.INSERT:
                raise InvariantViolation("history is append-only")
            key = op.key if op.key is not None else self.next_seq
            if key in table:
                raise KeyConflict(f"history seq {key} exists")
            value = op.value if op.value.seq == key else replace(op.value, seq=key)
            self.put(Relation.HISTORY, key, value)
            undo.append((Relation.HISTORY, key, _MISSING))
            return TupleOp(OpKind.INSERT, Relation.HISTORY, key, value)
        old = table.get(op.key, _MISSING)
        if op.kind is OpKind.INSERT:
            if old is not _MISSING:
                raise KeyConflict(f"INSERT {op.relation.value} {op.key}: key exists")
        elif old is _MISSING:
            raise KeyConflict(f"{op.kind.value} {op.relation.value} {op.key}: no such key")
        if op.kind is not OpKind.DELETE:
            if key_of(op.relation, op.value) != op.key:
                raise KeyConflict(f"{op.relation.value} key {op.key} does not match tuple")
            undo.append((op.relation, op.key, old))
            self.put(op.relation, op.key, op.value)
        else:
            undo.append((op.relation, op.key, old))
            self.remove(op.relation, op.key)
        return op

    def rollback(self, undo: list, counters: Optional[tuple[int, int]] = None) -> None:
        """Undo applied ops; ``counters`` restores (next_seq, max_job_id) so a rejected txn leaves no gap."""
        for relation, key, old in reversed(undo):
            table = self.table(relation)
            if key in table:
                self.remove(relation, key)
            if old is not _MISSING:
                self.put(relation, key, old)
        if counters is not None:
            self.next_seq, self.max_job_id = counters


def _touched(ops: Iterable[TupleOp], undo: list) -> tuple[set, set]:
    jobs: set = set()
    vms: set = set()
    for op in ops:
        if op.relation is Relation.HISTORY:
            continue
        if op.relation is Relation.MACHINES:
            vms.add(op.key)
        else:
            jobs.add(op.key)
        if op.value is not None and hasattr(op.value, "vm_id"):
            vms.add(op.value.vm_id)
    for relation, _key, old in undo:
        if old is not _MISSING and relation in (Relation.MATCHES, Relation.RUNS):
            vms.add(old.vm_id)
    return jobs, vms


@dataclass
class RecoveryInfo:
    snapshot_lsn: int
    replayed_txns: int
    last_lsn: int
    last_txn_id: int
    discarded_bytes: int


def recover(directory, use_snapshot: bool = True) -> tuple[StoreState, RecoveryInfo]:
    """Rebuild the in-memory state from a journal directory (read-only).

    With ``use_snapshot=False`` the whole journal is replayed from lsn 1,
    which is the independent path used to cross-check checkpoints.
    """
    state, info, _ = _recover(Path(directory), use_snapshot)
    return state, info


def _recover(directory: Path, use_snapshot: bool):
    state = StoreState()
    watermark = 0
    last_txn = 0
    if use_snapshot:
        for lsn, path in reversed(jr.snapshot_paths(directory)):
            doc = jr.read_snapshot(path)
            if doc is None:
                log.warning("ignoring unreadable snapshot %s", path)
                continue
            state = StoreState.from_document(doc["state"])
            watermark = int(doc["lsn"])
            last_txn = int(doc.get("txn_id", 0))
            break
    scan = jr.scan_journal(directory, after_lsn=watermark)
    for txn in scan.txns:
        undo: list = []
        for raw in txn.ops:
            state.apply_op(TupleOp.from_json(raw), undo)
    info = RecoveryInfo(
        snapshot_lsn=watermark,
        replayed_txns=len(scan.txns),
        last_lsn=max(scan.last_lsn, watermark),
        last_txn_id=max(scan.last_txn_id, last_txn),
        discarded_bytes=scan.discarded_bytes,
    )
    return state, info, scan


CheckMode = str  # "off" | "incremental" | "full"


class Store:
    """Transactional store over the five relations.

    ``directory=None`` gives a memory-only store (no journal); otherwise the
    store recovers from, and appends to, ``directory``.

    ``durability``: ``"full"`` fsyncs every commit before acknowledging it;
    ``"batched"`` writes every commit to the OS immediately but fsyncs at
    most once per ``batch_window_s`` -- it survives a process kill but not a
    power cut, and is meant for throughput experiments.
    """

    def __init__(
        self,
        directory=None,
        durability: str = "full",
        check: CheckMode = "incremental",
        segment_bytes: int = 64 * 1024 * 1024,
        batch_window_s: float = 0.05,
    ):
        if durability not in ("full", "batched"):
            raise ValueError(f"durability must be 'full' or 'batched', got {durability!r}")
        if check not in ("off", "incremental", "full"):
            raise ValueError(f"unknown check mode {check!r}")
        self.directory = None if directory is None else Path(directory)
        self.durability = durability
        self.check = check
        self.segment_bytes = segment_bytes
        self.batch_window_s = batch_window_s
        self._lock = threading.RLock()
        self._listeners: list[Callable[[Commit, list[TupleOp]], None]] = []
        self._file = None
        self._segment = 0
        self._last_sync = 0.0
        self._closed = False
        self.recovery: Optional[RecoveryInfo] = None
        if self.directory is None:
            self.state = StoreState()
            self._next_lsn = 1
            self._next_txn = 1
        else:
            self._open_directory()

    # -- lifecycle ---------------------------------------------------------

    def _open_directory(self) -> None:
        d = self.directory
        (d / "journal").mkdir(parents=True, exist_ok=True)
        (d / "snapshot").mkdir(parents=True, exist_ok=True)
        self.state, self.recovery, scan = _recover(d, use_snapshot=True)
        for n in scan.drop_segments:
            jr.segment_path(d, n).unlink(missing_ok=True)
        if scan.truncate_segment is None:
            self._segment = 1
            open(jr.segment_path(d, 1), "ab").close()
        else:
            self._segment = scan.truncate_segment
            path = jr.segment_path(d, self._segment)
            if path.stat().st_size != scan.truncate_offset:
                log.warning("discarding %d bytes of uncommitted journal tail", path.stat().st_size - scan.truncate_offset)
                with open(path, "r+b") as f:
                    f.truncate(scan.truncate_offset)
                    f.flush()
                    os.fsync(f.fileno())
        self._file = open(jr.segment_path(d, self._segment), "ab")
        self._next_lsn = self.recovery.last_lsn + 1
        self._next_txn = self.recovery.last_txn_id + 1
        if self.check == "full":
            self.state.check_all()

    @classmethod
    def open(cls, directory, **kwargs) -> "Store":
        return cls(directory, **kwargs)

    def close(self) -> None:
        with self._lock:
            if self._file is not None and not self._file.closed:
                self._file.flush()
                os.fsync(self._file.fileno())
                self._file.close()
            self._closed = True

    def abandon(self) -> None:
        """Drop the store without a final sync, as a killed process would."""
        with self._lock:
            if self._file is not None and not self._file.closed:
                self._file.flush()
                self._file.close()
            self._closed = True

    def subscribe(self, fn: Callable[[Commit, list[TupleOp]], None]) -> None:
        self._listeners.append(fn)

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    @property
    def last_lsn(self) -> int:
        return self._next_lsn - 1

    # -- transactions ------------------------------------------------------

    def execute_txn(self, ops: Sequence[TupleOp], timestamp: float = 0.0) -> Commit:
        """Apply ``ops`` atomically and durably.

        Raises :class:`KeyConflict` or :class:`InvariantViolation` with no
        state change.
        """
        with self._lock:
            if self._closed:
                raise StoreError("store is closed")
            if not ops:
                return Commit(0, self._next_lsn, self._next_lsn - 1, timestamp)
            undo: list = []
            applied: list[TupleOp] = []
            counters = (self.state.next_seq, self.state.max_job_id)
            try:
                for op in ops:
                    applied.append(self.state.apply_op(op, undo))
                self._validate(applied, undo)
            except Exception:
                self.state.rollback(undo, counters)
                raise
            txn_id = self._next_txn
            first = self._next_lsn
            if self._file is not None:
                try:
                    self._append(txn_id, first, applied)
                except Exception:
                    self.state.rollback(undo, counters)
                    raise
            self._next_txn += 1
            self._next_lsn = first + len(applied) + 1
            commit = Commit(txn_id, first, self._next_lsn - 1, timestamp)
            for fn in self._listeners:
                fn(commit, applied)
            return commit

    def _validate(self, applied: list[TupleOp], undo: list) -> None:
        if self.check == "off":
            return
        if self.check == "full":
            self.state.check_all()
            return
        jobs, vms = _touched(applied, undo)
        for job_id in jobs:
            self.state.check_job(job_id)
        for vm_id in vms:
            self.state.check_machine(vm_id)

    def _append(self, txn_id: int, first_lsn: int, ops: list[TupleOp]) -> None:
        chunks = []
        lsn = first_lsn
        for op in ops:
            payload = json.dumps(op.to_json(), separators=(",", ":")).encode()
            chunks.append(jr.encode_record(lsn, txn_id, jr.REC_OP, payload))
            lsn += 1
        chunks.append(jr.encode_record(lsn, txn_id, jr.REC_COMMIT))
        data = b"".join(chunks)
        pos = self._file.tell()
        try:
            self._file.write(data)
            self._file.flush()
            now = time.monotonic()
            if self.durability == "full" or now - self._last_sync >= self.batch_window_s:
                os.fsync(self._file.fileno())
                self._last_sync = now
        except Exception:
            # Leave no partial transaction behind for the next append.
            try:
                self._file.truncate(pos)
            except Exception:
                pass
            raise
        if pos + len(data) >= self.segment_bytes:
            self._roll_segment()

    def _roll_segment(self) -> None:
        self._file.flush()
        os.fsync(self._file.fileno())
        self._file.close()
        self._segment += 1
        self._file = open(jr.segment_path(self.directory, self._segment), "ab")
        jr.fsync_dir(self.directory / "journal")

    # -- checkpoint --------------------------------------------------------

    def checkpoint(self, prune: bool = True) -> tuple[Optional[Path], int]:
        """Write a snapshot at the current lsn W; optionally prune journal records <= W.

        Returns ``(snapshot_path, W)``.  A failure while writing leaves the
        previous snapshot and the journal untouched.
        """
        with self._lock:
            watermark = self.last_lsn
            if self.directory is None:
                return None, watermark
            doc = {"lsn": watermark, "txn_id": self._next_txn - 1, "state": self.state.to_document()}
            path = jr.write_snapshot(self.directory, watermark, doc)
            self._roll_segment()
            for lsn, old in jr.snapshot_paths(self.directory):
                if lsn < watermark:
                    old.unlink(missing_ok=True)
            if prune:
                for n, seg in jr.segment_paths(self.directory):
                    if n < self._segment:
                        seg.unlink(missing_ok=True)
                jr.fsync_dir(self.directory / "journal")
            return path, watermark

    # -- reads -------------------------------------------------------------

    def select(self, relation: Relation, predicate: Optional[Callable[[Any], bool]] = None) -> list:
        relation = Relation(relation)
        with self._lock:
            values = list(self.state.table(relation).values())
        if predicate is None:
            return values
        return [v for v in values if predicate(v)]

    def get(self, relation: Relation, key, default=None):
        with self._lock:
            return self.state.table(Relation(relation)).get(key, default)

    def count(self, relation: Relation) -> int:
        with self._lock:
            return len(self.state.table(Relation(relation)))

    def iter_idle_jobs(self) -> Iterator[JobRecord]:
        """IDLE jobs in (submit_time, job_id) order.

        Lazy: the caller must hold :attr:`lock` (or otherwise exclude
        writers) for the lifetime of the iterator.
        """
        jobs = self.state.jobs
        for _, job_id in self.state.idle:
            yield jobs[job_id]

    def unclaimed_machines(self) -> list[MachineRecord]:
        with self._lock:
            machines = self.state.machines
            return [machines[v] for v in self.state.unclaimed]

    def match_for_vm(self, vm_id: VmId) -> Optional[MatchRecord]:
        with self._lock:
            job_id = self.state.match_by_vm.get(vm_id)
            return None if job_id is None else self.state.matches[job_id]

    def run_for_vm(self, vm_id: VmId) -> Optional[RunRecord]:
        with self._lock:
            job_id = self.state.run_by_vm.get(vm_id)
            return None if job_id is None else self.state.runs[job_id]

    def accounting(self) -> dict[str, int]:
        with self._lock:
            return self.state.accounting()

    def fingerprint(self) -> dict[str, Any]:
        with self._lock:
            return self.state.fingerprint()
