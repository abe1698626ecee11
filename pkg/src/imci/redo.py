"""Binary REDO log: record codec, segmented append-only writer, tailing reader.

Record layout, little-endian::

    u32 total_len | u64 lsn | u64 tid | u8 kind | u64 page_id | u16 slot_id
    | u32 table_id | u32 payload_len | payload | u32 crc32

``total_len`` covers the whole record including itself and the CRC; the CRC
covers every byte before it. Each segment file starts with ``IMCILOG1`` and is
named ``<start_lsn>.redo``. The writer's durable frontier is mirrored into the
``WRITTEN_LSN`` sidecar (8 bytes, u64 LE).
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from .errors import CorruptEntry, IoFailure

MAGIC = b"IMCILOG1"
HEADER = struct.Struct("<IQQBQHII")
CRC = struct.Struct("<I")
SIDECAR = "WRITTEN_LSN"
DEFAULT_SEGMENT_BYTES = 64 * 1024 * 1024


class Kind(IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3
    COMMIT = 4
    ABORT = 5


DML_KINDS = (Kind.INSERT, Kind.UPDATE, Kind.DELETE)


@dataclass(slots=True)
class RedoEntry:
    lsn: int
    tid: int
    kind: Kind
    page_id: int = 0
    slot_id: int = 0
    table_id: int = 0
    payload: bytes = b""

    @property
    def is_dml(self) -> bool:
        return self.kind <= 3


@dataclass(frozen=True)
class WrittenLsnSignal:
    written_lsn: int


def encode_entry(e: RedoEntry) -> bytes:
    total = HEADER.size + len(e.payload) + CRC.size
    body = HEADER.pack(total, e.lsn, e.tid, e.kind, e.page_id, e.slot_id, e.table_id, len(e.payload)) + e.payload
    return body + CRC.pack(zlib.crc32(body))


def decode_entry(buf, offset: int = 0) -> tuple[RedoEntry, int]:
    """Decode one record at ``offset``; raises CorruptEntry on a torn or bad record."""
    if len(buf) - offset < HEADER.size:
        raise CorruptEntry("truncated record header")
    total, lsn, tid, kind, page_id, slot_id, table_id, plen = HEADER.unpack_from(buf, offset)
    end = offset + total
    if total != HEADER.size + plen + CRC.size:
        raise CorruptEntry(f"bad record length at lsn {lsn}")
    if end > len(buf):
        raise CorruptEntry(f"truncated record at lsn {lsn}")
    (crc,) = CRC.unpack_from(buf, end - CRC.size)
    if zlib.crc32(memoryview(buf)[offset:end - CRC.size]) != crc:
        raise CorruptEntry(f"crc mismatch at lsn {lsn}")
    p0 = offset + HEADER.size
    return RedoEntry(lsn, tid, Kind(kind), page_id, slot_id, table_id, bytes(buf[p0:p0 + plen])), end


class LsnChannel:
    """In-process broadcast of a monotone LSN (stand-in for the RDMA notify)."""

    def __init__(self, value: int = 0):
        self._value = value
        self._cond = threading.Condition()

    @property
    def value(self) -> int:
        return self._value

    def publish(self, lsn: int) -> None:
        with self._cond:
            if lsn > self._value:
                self._value = lsn
            self._cond.notify_all()

    def wait_beyond(self, lsn: int, timeout: float | None) -> int:
        """Block until value > lsn or timeout; returns the current value."""
        with self._cond:
            if self._value <= lsn:
                self._cond.wait_for(lambda: self._value > lsn, timeout)
            return self._value


def segment_files(log_dir) -> list[tuple[int, Path]]:
    out = []
    for p in Path(log_dir).glob("*.redo"):
        try:
            out.append((int(p.stem), p))
        except ValueError:
            continue
    out.sort()
    return out


def read_sidecar(log_dir) -> int:
    try:
        data = (Path(log_dir) / SIDECAR).read_bytes()
    except FileNotFoundError:
        return 0
    if len(data) != 8:
        return 0
    return struct.unpack("<Q", data)[0]


class RedoLog:
    """Single-appender log writer.

    ``sync`` controls fsync: "commit" fsyncs when a commit/abort record is
    appended, "always" after every broadcast, "none" never (tests).
    """

    def __init__(self, log_dir, segment_bytes: int = DEFAULT_SEGMENT_BYTES, sync: str = "commit",
                 channel: LsnChannel | None = None):
        if sync not in ("commit", "always", "none"):
            raise ValueError(f"bad sync mode {sync!r}")
        self.dir = Path(log_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.segment_bytes = segment_bytes
        self.sync = sync
        self.channel = channel or LsnChannel()
        self._lock = threading.Lock()
        self._last_lsn = 0
        self._written = 0
        self._file = None
        self._seg_size = 0
        self.max_tid = 0
        self._open_tail()
        self._sidecar_fd = os.open(self.dir / SIDECAR, os.O_RDWR | os.O_CREAT, 0o644)
        self._write_sidecar(self._last_lsn)
        self._written = self._last_lsn
        self.channel.publish(self._last_lsn)

    def _open_tail(self) -> None:
        segs = segment_files(self.dir)
        if not segs:
            return
        # validate every segment; cut the log at the first bad record
        last = 0
        keep_path, keep_size = None, 0
        for i, (start, path) in enumerate(segs):
            data = path.read_bytes()
            if data[:8] != MAGIC or (last and start != last + 1):
                for _, p in segs[i:]:
                    p.unlink()
                break
            off = 8
            bad = False
            while off < len(data):
                try:
                    e, off2 = decode_entry(data, off)
                except CorruptEntry:
                    bad = True
                    break
                last = e.lsn
                self.max_tid = max(self.max_tid, e.tid)
                off = off2
            keep_path, keep_size = path, off
            if bad:
                with open(path, "r+b") as f:
                    f.truncate(off)
                for _, p in segs[i + 1:]:
                    p.unlink()
                break
        self._last_lsn = last
        if keep_path is not None:
            self._file = open(keep_path, "ab")
            self._seg_size = keep_size

    def _roll(self, start_lsn: int) -> None:
        if self._file is not None:
            self._file.flush()
            if self.sync != "none":
                os.fsync(self._file.fileno())
            self._file.close()
        path = self.dir / f"{start_lsn}.redo"
        self._file = open(path, "wb")
        self._file.write(MAGIC)
        self._seg_size = len(MAGIC)

    @property
    def last_lsn(self) -> int:
        return self._last_lsn

    @property
    def written_lsn(self) -> int:
        return self._written

    def append(self, entry: RedoEntry) -> int:
        """Assign the next LSN to ``entry`` and append it."""
        with self._lock:
            lsn = self._last_lsn + 1
            entry.lsn = lsn
            rec = encode_entry(entry)
            if self._file is None or (self._seg_size + len(rec) > self.segment_bytes and self._seg_size > len(MAGIC)):
                self._roll(lsn)
            try:
                self._file.write(rec)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self._seg_size += len(rec)
            self._last_lsn = lsn
            if entry.tid > self.max_tid:
                self.max_tid = entry.tid
            if entry.kind >= Kind.COMMIT:
                self._flush(durable=self.sync == "commit")
            return lsn

    def _flush(self, durable: bool) -> None:
        try:
            self._file.flush()
            if durable:
                os.fsync(self._file.fileno())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _write_sidecar(self, lsn: int) -> None:
        os.pwrite(self._sidecar_fd, struct.pack("<Q", lsn), 0)

    def broadcast_written_lsn(self) -> WrittenLsnSignal:
        """Make every appended record readable and announce the frontier."""
        with self._lock:
            if self._file is not None and self._written != self._last_lsn:
                self._flush(durable=self.sync == "always")
                self._write_sidecar(self._last_lsn)
            self._written = self._last_lsn
            lsn = self._written
        self.channel.publish(lsn)
        return WrittenLsnSignal(lsn)

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.flush()
                if self.sync != "none":
                    os.fsync(self._file.fileno())
                self._file.close()
                self._file = None
            if self._sidecar_fd >= 0:
                os.close(self._sidecar_fd)
                self._sidecar_fd = -1


class LogCursor:
    """Incremental reader positioned at an LSN; keeps its file offset between fetches."""

    READ_CHUNK = 4 << 20

    def __init__(self, log_dir, start_lsn: int = 1):
        if start_lsn < 1:
            raise ValueError("start_lsn must be >= 1")
        self.dir = Path(log_dir)
        self.next_lsn = start_lsn
        self._path: Path | None = None
        self._offset = 0
        self._seg_start = 0
        self._error: CorruptEntry | None = None

    def _locate(self) -> bool:
        segs = segment_files(self.dir)
        cand = [(s, p) for s, p in segs if s <= self.next_lsn]
        if not cand:
            return False
        self._seg_start, self._path = cand[-1]
        self._offset = len(MAGIC)
        return True

    def _next_segment(self) -> bool:
        nxt = self.dir / f"{self.next_lsn}.redo"
        if nxt.exists():
            self._seg_start, self._path, self._offset = self.next_lsn, nxt, len(MAGIC)
            return True
        return False

    def fetch(self, upto: int, limit: int | None = None) -> list[RedoEntry]:
        """Return entries [next_lsn, upto] (at most ``limit``), in LSN order.

        A bad record ends the batch early; the CorruptEntry surfaces on the
        following call so callers still receive the valid prefix.
        """
        if self._error is not None:
            err, self._error = self._error, None
            raise err
        out: list[RedoEntry] = []
        want = self.READ_CHUNK
        while self.next_lsn <= upto and (limit is None or len(out) < limit):
            try:
                if self._path is None and not self._locate():
                    raise CorruptEntry(f"no segment holds lsn {self.next_lsn}", self.next_lsn - 1)
                self._scan_chunk(out, upto, limit, want)
            except CorruptEntry as exc:
                if out:
                    self._error = exc
                    return out
                raise
            except _NeedMore:
                want *= 2
        return out

    def _scan_chunk(self, out, upto, limit, want) -> None:
        with open(self._path, "rb") as f:
            if self._offset == len(MAGIC) and f.read(8) != MAGIC:
                raise CorruptEntry(f"bad segment magic in {self._path.name}", self.next_lsn - 1)
            f.seek(self._offset)
            data = f.read(want)
        eof = len(data) < want
        off = 0
        n = len(data)
        while off < n and self.next_lsn <= upto and (limit is None or len(out) < limit):
            try:
                e, off2 = decode_entry(data, off)
            except CorruptEntry as exc:
                if not eof:
                    # record straddles the chunk boundary
                    self._offset += off
                    if off == 0:
                        raise _NeedMore() from None
                    return
                raise CorruptEntry(str(exc), self.next_lsn - 1) from None
            off = off2
            if e.lsn < self.next_lsn:
                continue
            if e.lsn != self.next_lsn:
                raise CorruptEntry(f"lsn gap: expected {self.next_lsn}, found {e.lsn}", self.next_lsn - 1)
            out.append(e)
            self.next_lsn += 1
        self._offset += off
        if eof and off >= n and self.next_lsn <= upto and (limit is None or len(out) < limit):
            if not self._next_segment():
                raise CorruptEntry(f"log ends before lsn {self.next_lsn}", self.next_lsn - 1)


class _NeedMore(Exception):
    pass


class LogReader:
    """Reader side of the shared log directory."""

    def __init__(self, log_dir, channel: LsnChannel | None = None, poll_interval: float = 0.001):
        self.dir = Path(log_dir)
        self.channel = channel
        self.poll_interval = poll_interval

    def written_lsn(self) -> int:
        if self.channel is not None:
            return self.channel.value
        return read_sidecar(self.dir)

    def wait_beyond(self, lsn: int, timeout: float) -> int:
        if self.channel is not None:
            return self.channel.wait_beyond(lsn, timeout)
        deadline = time.monotonic() + timeout
        while True:
            w = read_sidecar(self.dir)
            if w > lsn or time.monotonic() >= deadline:
                return w
            time.sleep(self.poll_interval)

    def cursor(self, start_lsn: int = 1) -> LogCursor:
        return LogCursor(self.dir, start_lsn)

    def read_from(self, start_lsn: int, upto: int | None = None):
        """Yield entries [start_lsn, upto or written_lsn] in LSN order."""
        if start_lsn < 1:
            raise ValueError("start_lsn must be >= 1")
        upto = self.written_lsn() if upto is None else upto
        cur = LogCursor(self.dir, start_lsn)
        while cur.next_lsn <= upto:
            batch = cur.fetch(upto, limit=4096)
            if not batch:
                break
            yield from batch

    def scan_all(self):
        """Yield every decodable entry on disk (ignores the sidecar); CorruptEntry at a torn tail."""
        last = 0
        for start, path in segment_files(self.dir):
            data = path.read_bytes()
            if data[:8] != MAGIC:
                raise CorruptEntry(f"bad segment magic in {path.name}", last)
            off = 8
            while off < len(data):
                try:
                    e, off = decode_entry(data, off)
                except CorruptEntry as exc:
                    raise CorruptEntry(str(exc), last) from None
                last = e.lsn
                yield e


class MemoryLog:
    """List-backed stand-in for RedoLog (unit tests, bulk loads)."""

    def __init__(self, channel: LsnChannel | None = None):
        self.entries: list[RedoEntry] = []
        self.channel = channel or LsnChannel()
        self._written = 0
        self.max_tid = 0

    @property
    def last_lsn(self) -> int:
        return len(self.entries)

    @property
    def written_lsn(self) -> int:
        return self._written

    def append(self, entry: RedoEntry) -> int:
        entry.lsn = len(self.entries) + 1
        self.entries.append(entry)
        if entry.tid > self.max_tid:
            self.max_tid = entry.tid
        return entry.lsn

    def broadcast_written_lsn(self) -> WrittenLsnSignal:
        self._written = len(self.entries)
        self.channel.publish(self._written)
        return WrittenLsnSignal(self._written)

    def read_from(self, start_lsn: int, upto: int | None = None):
        upto = self._written if upto is None else upto
        return iter(self.entries[start_lsn - 1:upto])

    def close(self) -> None:
        pass
