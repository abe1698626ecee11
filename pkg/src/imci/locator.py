"""RID locator: primary key -> row id, as a two-layer LSM tree.

Layer 1 is a mutable memtable (dict, sorted when frozen); layer 2 is a list
of immutable sorted runs held as numpy arrays, oldest first. A remove writes
a tombstone (-1) that shadows older runs until compaction reaches the
bottom run. Runs are never mutated, so a snapshot is just the current run
list after the memtable has been frozen into a run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConflictingPk, DuplicatePk, NotFound

TOMBSTONE = -1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Run:
    keys: np.ndarray  # int64, strictly increasing
    rids: np.ndarray  # int64, TOMBSTONE for removals

    def __len__(self) -> int:
        return len(self.keys)

    def get(self, pk: int):
        """rid, TOMBSTONE, or None when the run says nothing about pk."""
        keys = self.keys
        i = keys.searchsorted(pk)
        if i < len(keys) and keys[i] == pk:
            return int(self.rids[i])
        return None

    @classmethod
    def from_dict(cls, d: dict) -> "Run":
        keys = np.fromiter(d.keys(), dtype=np.int64, count=len(d))
        rids = np.fromiter(d.values(), dtype=np.int64, count=len(d))
        order = np.argsort(keys, kind="stable")
        return cls(keys[order], rids[order])


def merge_runs(older: Run, newer: Run, drop_tombstones: bool) -> Run:
    keys = np.concatenate([newer.keys, older.keys])
    rids = np.concatenate([newer.rids, older.rids])
    # np.unique keeps the first occurrence, i.e. the newer run's entry
    ukeys, first = np.unique(keys, return_index=True)
    urids = rids[first]
    if drop_tombstones:
        keep = urids != TOMBSTONE
        ukeys, urids = ukeys[keep], urids[keep]
    return Run(ukeys, urids)


def _lookup(memtable, runs, pk):
    if memtable is not None:
        r = memtable.get(pk)
        if r is not None:
            return None if r == TOMBSTONE else r
    for run in reversed(runs):
        r = run.get(pk)
        if r is not None:
            return None if r == TOMBSTONE else r
    return None


def _enumerate(memtable, runs) -> dict[int, int]:
    out: dict[int, int] = {}
    for run in runs:
        for k, r in zip(run.keys.tolist(), run.rids.tolist()):
            if r == TOMBSTONE:
                out.pop(k, None)
            else:
                out[k] = r
    if memtable:
        for k, r in memtable.items():
            if r == TOMBSTONE:
                out.pop(k, None)
            else:
                out[k] = r
    return dict(sorted(out.items()))


class LocatorSnapshot:
    """Immutable view of a locator at split time."""

    def __init__(self, runs: tuple[Run, ...], generation: int):
        self.runs = runs
        self.generation = generation

    def get(self, pk: int) -> int | None:
        return _lookup(None, self.runs, pk)

    def items(self) -> dict[int, int]:
        return _enumerate(None, self.runs)

    def __len__(self) -> int:
        return len(self.items())

    def to_bytes(self) -> bytes:
        parts = [_U64.pack(self.generation), _U32.pack(len(self.runs))]
        for run in self.runs:
            parts.append(_U64.pack(len(run)))
            pairs = np.empty((len(run), 2), dtype="<i8")
            pairs[:, 0] = run.keys
            pairs[:, 1] = run.rids
            parts.append(pairs.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "LocatorSnapshot":
        (gen,) = _U64.unpack_from(buf, 0)
        (n,) = _U32.unpack_from(buf, 8)
        off = 12
        runs = []
        for _ in range(n):
            (cnt,) = _U64.unpack_from(buf, off)
            off += 8
            pairs = np.frombuffer(buf, dtype="<i8", count=2 * cnt, offset=off).reshape(cnt, 2)
            off += 16 * cnt
            runs.append(Run(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)))
        return cls(tuple(runs), gen)


class RidLocator:
    def __init__(self, flush_threshold: int = 4096, max_runs: int = 8):
        self.flush_threshold = flush_threshold
        self.max_runs = max_runs
        self.memtable: dict[int, int] = {}
        self.runs: list[Run] = []
        self.generation = 0
        self.live = 0
        # called after each memtable flush; the checkpoint trigger hooks in here
        self.on_flush = None

    def __len__(self) -> int:
        return self.live

    def get(self, pk: int) -> int | None:
        return _lookup(self.memtable, self.runs, pk)

    def put(self, pk: int, rid: int) -> None:
        if _lookup(self.memtable, self.runs, pk) is not None:
            raise DuplicatePk(f"pk {pk} already mapped")
        self.memtable[pk] = rid
        self.live += 1
        if len(self.memtable) >= self.flush_threshold:
            self.flush_memtable()

    def remove(self, pk: int) -> int:
        rid = _lookup(self.memtable, self.runs, pk)
        if rid is None:
            raise NotFound(f"pk {pk} not mapped")
        if self.runs:
            self.memtable[pk] = TOMBSTONE
        else:
            del self.memtable[pk]
        self.live -= 1
        if len(self.memtable) >= self.flush_threshold:
            self.flush_memtable()
        return rid

    def pop(self, pk: int) -> int | None:
        """Remove and return the mapping, or None if unmapped."""
        if _lookup(self.memtable, self.runs, pk) is None:
            return None
        return self.remove(pk)

    def flush_memtable(self) -> None:
        if not self.memtable:
            return
        self.runs.append(Run.from_dict(self.memtable))
        self.memtable = {}
        self.generation += 1
        while len(self.runs) > self.max_runs:
            self._compact_once()
        if self.on_flush is not None:
            self.on_flush(self)

    def _compact_once(self) -> None:
        # merge the adjacent pair with the smallest combined size
        best = min(range(len(self.runs) - 1), key=lambda i: len(self.runs[i]) + len(self.runs[i + 1]))
        merged = merge_runs(self.runs[best], self.runs[best + 1], drop_tombstones=best == 0)
        self.runs[best:best + 2] = [merged]

    def split_snapshot(self) -> LocatorSnapshot:
        """Freeze the memtable into a run and share the (immutable) run list."""
        if self.memtable:
            self.runs.append(Run.from_dict(self.memtable))
            self.memtable = {}
            self.generation += 1
            while len(self.runs) > self.max_runs:
                self._compact_once()
        return LocatorSnapshot(tuple(self.runs), self.generation)

    def merge_temp(self, temp: "RidLocator") -> None:
        """Fold a temporary locator (pre-committed transaction) into this one."""
        pending = temp.items()
        for pk in pending:
            if self.get(pk) is not None:
                raise ConflictingPk(f"pk {pk} already mapped in the global locator")
        for pk, rid in pending.items():
            self.put(pk, rid)
        temp.memtable = {}
        temp.runs = []
        temp.live = 0

    def items(self) -> dict[int, int]:
        return _enumerate(self.memtable, self.runs)

    @classmethod
    def from_snapshot(cls, snap: LocatorSnapshot, flush_threshold: int = 4096, max_runs: int = 8) -> "RidLocator":
        loc = cls(flush_threshold, max_runs)
        loc.runs = list(snap.runs)
        loc.generation = snap.generation
        loc.live = len(snap.items())
        return loc
