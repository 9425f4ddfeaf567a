"""On-disk journal and snapshot formats.

Directory layout::

    <dir>/journal/segment-<n>.log     length-prefixed records, n = 1, 2, ...
    <dir>/snapshot/state-<lsn>.snap   full state as of <lsn>

Journal record (little endian)::

    u32  body length
    u32  CRC-32 of body
    body:
      u64  lsn          strictly increasing, +1 per record
      u64  txn_id
      u8   record type  1 = tuple op, 2 = commit
      ...  payload      JSON tuple op (type 1), empty (type 2)

A transaction is its op records followed by one commit record, written with
a single ``write`` call.  Anything after the last commit record that does not
validate is a torn tail and is discarded on open; a bad record that is
followed by a valid commit is interior corruption and the store refuses to
open.

Snapshot file::

    b"DSSNAP1\\n"  u32 CRC-32 of body  body = JSON state document
"""

from __future__ import annotations

import json
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

HEADER = struct.Struct("<II")
BODY_HEAD = struct.Struct("<QQB")
REC_OP = 1
REC_COMMIT = 2
MAX_RECORD = 64 * 1024 * 1024
SNAP_MAGIC = b"DSSNAP1\n"

_SEGMENT_RE = re.compile(r"^segment-(\d+)\.log$")
_SNAPSHOT_RE = re.compile(r"^state-(\d+)\.snap$")


class CorruptJournal(Exception):
    """Checksum failure before the last committed record."""

    def __init__(self, lsn: int, path: Path, offset: int):
        super().__init__(f"journal corrupt at lsn {lsn} ({path}, offset {offset})")
        self.lsn = lsn
        self.path = path
        self.offset = offset


def encode_record(lsn: int, txn_id: int, rtype: int, payload: bytes = b"") -> bytes:
    body = BODY_HEAD.pack(lsn, txn_id, rtype) + payload
    return HEADER.pack(len(body), zlib.crc32(body)) + body


@dataclass
class RawRecord:
    lsn: int
    txn_id: int
    rtype: int
    payload: bytes
    offset: int
    end: int


def _parse_at(buf: bytes, offset: int) -> Optional[RawRecord]:
    if offset + HEADER.size > len(buf):
        return None
    length, crc = HEADER.unpack_from(buf, offset)
    start = offset + HEADER.size
    if length < BODY_HEAD.size or length > MAX_RECORD or start + length > len(buf):
        return None
    body = buf[start:start + length]
    if zlib.crc32(body) != crc:
        return None
    lsn, txn_id, rtype = BODY_HEAD.unpack_from(body, 0)
    if rtype not in (REC_OP, REC_COMMIT):
        return None
    return RawRecord(lsn, txn_id, rtype, body[BODY_HEAD.size:], offset, start + length)


def segment_paths(directory: Path) -> list[tuple[int, Path]]:
    jdir = directory / "journal"
    if not jdir.is_dir():
        return []
    found = []
    for p in jdir.iterdir():
        m = _SEGMENT_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def snapshot_paths(directory: Path) -> list[tuple[int, Path]]:
    sdir = directory / "snapshot"
    if not sdir.is_dir():
        return []
    found = []
    for p in sdir.iterdir():
        m = _SNAPSHOT_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def segment_path(directory: Path, n: int) -> Path:
    return directory / "journal" / f"segment-{n}.log"


@dataclass
class CommittedTxn:
    txn_id: int
    first_lsn: int
    last_lsn: int
    ops: list[dict[str, Any]]


@dataclass
class ScanResult:
    txns: list[CommittedTxn] = field(default_factory=list)
    last_lsn: int = 0
    last_txn_id: int = 0
    # Where the next append should go after discarding any tail.
    truncate_segment: Optional[int] = None
    truncate_offset: int = 0
    drop_segments: list[int] = field(default_factory=list)
    discarded_bytes: int = 0


def _commit_follows(buffers: list[tuple[int, Path, bytes]], seg_idx: int, offset: int, after_lsn: int) -> bool:
    """True if any valid commit record with lsn > after_lsn exists past the given point."""
    for i in range(seg_idx, len(buffers)):
        _, _, buf = buffers[i]
        pos = offset if i == seg_idx else 0
        while pos + HEADER.size + BODY_HEAD.size <= len(buf):
            rec = _parse_at(buf, pos)
            if rec is not None and rec.rtype == REC_COMMIT and rec.lsn > after_lsn:
                return True
            pos += 1
    return False


def scan_journal(directory: Path, after_lsn: int = 0) -> ScanResult:
    """Read every segment and return the committed transactions with last lsn > after_lsn.

    ``after_lsn`` is the snapshot watermark; transactions at or below it are
    skipped (they may or may not still be on disk).
    """
    segs = segment_paths(directory)
    buffers = [(n, p, p.read_bytes()) for n, p in segs]
    result = ScanResult(last_lsn=after_lsn)
    pending: list[RawRecord] = []
    expected_lsn: Optional[int] = None
    last_commit_point: Optional[tuple[int, int]] = None  # (segment index, end offset)

    for idx, (n, path, buf) in enumerate(buffers):
        pos = 0
        while pos < len(buf):
            rec = _parse_at(buf, pos)
            bad = rec is None or (expected_lsn is not None and rec.lsn != expected_lsn)
            if not bad and expected_lsn is None and rec.lsn > after_lsn + 1 and not pending:
                # Journal starts past the watermark: records are missing.
                bad = True
            if bad:
                lsn_here = expected_lsn if expected_lsn is not None else after_lsn + 1
                if _commit_follows(buffers, idx, pos + 1, max(result.last_lsn, after_lsn)):
                    raise CorruptJournal(lsn_here, path, pos)
                _finish_tail(result, buffers, idx, pos, last_commit_point)
                return result
            expected_lsn = rec.lsn + 1
            if rec.rtype == REC_OP:
                if pending and pending[-1].txn_id != rec.txn_id:
                    # An earlier transaction never committed; it was torn and superseded.
                    pending = []
                pending.append(rec)
            else:
                ops = [p for p in pending if p.txn_id == rec.txn_id]
                if rec.lsn > after_lsn:
                    result.txns.append(CommittedTxn(
                        rec.txn_id,
                        ops[0].lsn if ops else rec.lsn,
                        rec.lsn,
                        [json.loads(p.payload) for p in ops],
                    ))
                result.last_lsn = max(result.last_lsn, rec.lsn)
                result.last_txn_id = max(result.last_txn_id, rec.txn_id)
                pending = []
                last_commit_point = (idx, rec.end)
            pos = rec.end
    if pending:
        _finish_tail(result, buffers, len(buffers) - 1, len(buffers[-1][2]), last_commit_point)
    elif buffers:
        result.truncate_segment = buffers[-1][0]
        result.truncate_offset = len(buffers[-1][2])
    return result


def _finish_tail(result: ScanResult, buffers, bad_idx: int, bad_pos: int, last_commit_point) -> None:
    if last_commit_point is None:
        # Nothing committed in the readable prefix; restart at the first segment.
        keep_idx, keep_off = 0, 0
    else:
        keep_idx, keep_off = last_commit_point
    result.truncate_segment = buffers[keep_idx][0]
    result.truncate_offset = keep_off
    result.drop_segments = [n for n, _, _ in buffers[keep_idx + 1:]]
    total_after = len(buffers[keep_idx][2]) - keep_off + sum(len(b) for _, _, b in buffers[keep_idx + 1:])
    result.discarded_bytes = total_after


def iter_records(path: Path) -> Iterator[RawRecord]:
    """Valid records of one segment in order; stops at the first bad record."""
    buf = path.read_bytes()
    pos = 0
    while True:
        rec = _parse_at(buf, pos)
        if rec is None:
            return
        yield rec
        pos = rec.end


def write_snapshot(directory: Path, lsn: int, document: dict[str, Any]) -> Path:
    sdir = directory / "snapshot"
    sdir.mkdir(parents=True, exist_ok=True)
    body = json.dumps(document, separators=(",", ":"), sort_keys=True).encode()
    final = sdir / f"state-{lsn}.snap"
    tmp = sdir / f".state-{lsn}.snap.tmp"
    with open(tmp, "wb") as f:
        f.write(SNAP_MAGIC)
        f.write(struct.pack("<I", zlib.crc32(body)))
        f.write(body)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, final)
    fsync_dir(sdir)
    return final


def read_snapshot(path: Path) -> Optional[dict[str, Any]]:
    """Decoded snapshot document, or None if the file does not validate."""
    try:
        raw = path.read_bytes()
    except OSError:
        return None
    head = len(SNAP_MAGIC) + 4
    if len(raw) < head or not raw.startswith(SNAP_MAGIC):
        return None
    (crc,) = struct.unpack_from("<I", raw, len(SNAP_MAGIC))
    body = raw[head:]
    if zlib.crc32(body) != crc:
        return None
    try:
        return json.loads(body)
    except ValueError:
        return None


def fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)
