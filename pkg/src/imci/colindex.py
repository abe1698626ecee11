"""In-memory column index: append-only row groups with MVCC VID maps.

RID r lives in group ``r // G`` at offset ``r % G``. Each group holds one pack
per column (a mutable ``PartialPack`` until the group fills, then a
compressed ``DataPack``), an insert VID map, a delete VID map and a per-slot
state byte. A row version is visible at snapshot s iff
``insert_vid <= s < delete_vid``. ``INVALID`` (2**64-1) is both the "+inf"
delete bound and the placeholder insert VID of pre-committed rows; the slot
state tells those apart.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import compression
from .errors import DuplicatePk, KeyNotFound
from .kernels import visible_mask
from .locator import RidLocator, Run
from .schema import TableSchema

INVALID = 2**64 - 1
_INVALID = np.uint64(INVALID)

FREE, PENDING, LIVE, DEAD = 0, 1, 2, 3

HIST_BUCKETS = 16


@dataclass
class PackMeta:
    min: object
    max: object
    histogram: list[int]
    valid_count: int
    numeric: bool = True

    def disjoint(self, lo, hi) -> bool:
        """True when no value can satisfy lo <= v <= hi (None = unbounded)."""
        if lo is not None and self.max < lo:
            return True
        if hi is not None and self.min > hi:
            return True
        return False

    def fraction(self, lo, hi) -> float:
        """Estimated fraction of pack values in [lo, hi] from the histogram."""
        total = sum(self.histogram)
        if total == 0 or self.disjoint(lo, hi):
            return 0.0
        if not self.numeric:
            return _string_fraction(self, lo, hi)
        a, b = float(self.min), float(self.max)
        if a == b:
            return 1.0
        lo_f = a if lo is None else max(a, float(lo))
        hi_f = b if hi is None else min(b, float(hi))
        width = (b - a) / HIST_BUCKETS
        acc = 0.0
        for i, cnt in enumerate(self.histogram):
            if not cnt:
                continue
            ba, bb = a + i * width, a + (i + 1) * width
            ov = min(bb, hi_f) - max(ba, lo_f)
            if ov > 0:
                acc += cnt * ov / width
            elif lo_f == hi_f and ba <= lo_f <= bb:
                # point predicate: assume one distinct value per integer step
                acc += cnt / max(1.0, width)
        return min(1.0, acc / total)


def _string_fraction(meta: PackMeta, lo, hi) -> float:
    total = sum(meta.histogram)
    lo_b = 0 if lo is None else (lo.encode()[:1] or b"\x00")[0] >> 4
    hi_b = 15 if hi is None else (hi.encode()[:1] or b"\x00")[0] >> 4
    return sum(meta.histogram[lo_b:hi_b + 1]) / total


def compute_meta(values: np.ndarray, numeric: bool, valid_count: int) -> PackMeta | None:
    if len(values) == 0:
        return None
    if numeric:
        mn, mx = int(values.min()), int(values.max())
        if mn == mx:
            hist = [len(values)] + [0] * (HIST_BUCKETS - 1)
        else:
            hist = np.histogram(values.astype(np.float64), bins=HIST_BUCKETS, range=(float(mn), float(mx)))[0]
            hist = [int(x) for x in hist]
        return PackMeta(mn, mx, hist, valid_count, True)
    vals = values.tolist()
    hist = [0] * HIST_BUCKETS
    for s in vals:
        b = s.encode()[:1]
        hist[(b[0] if b else 0) >> 4] += 1
    return PackMeta(min(vals), max(vals), hist, valid_count, False)


class PartialPack:
    """Mutable, uncompressed tail pack."""

    frozen = False

    def __init__(self, capacity: int, numeric: bool):
        self.numeric = numeric
        self.values = np.zeros(capacity, dtype=np.int64) if numeric else np.full(capacity, "", dtype=object)

    def decode(self, n: int) -> np.ndarray:
        return self.values[:n]

    def meta(self, n: int) -> PackMeta | None:
        return compute_meta(self.values[:n], self.numeric, n)


class DataPack:
    """Immutable compressed pack."""

    frozen = True

    def __init__(self, encoded: bytes, n: int, numeric: bool, meta: PackMeta | None):
        self.encoded = encoded
        self.n = n
        self.numeric = numeric
        self._meta = meta

    def decode(self, n: int | None = None) -> np.ndarray:
        if self.numeric:
            return compression.decode_ints(self.encoded)
        return compression.decode_strings(self.encoded)

    def meta(self, n: int | None = None) -> PackMeta | None:
        return self._meta

    @property
    def tag(self) -> int:
        return self.encoded[0]

    @classmethod
    def build(cls, values: np.ndarray, numeric: bool, valid_count: int) -> "DataPack":
        enc = compression.encode_ints(values) if numeric else compression.encode_strings(values.tolist())
        return cls(enc, len(values), numeric, compute_meta(values, numeric, valid_count))


class RowGroup:
    __slots__ = ("group_no", "capacity", "packs", "insert_vid", "delete_vid", "state", "frozen", "dropped")

    def __init__(self, group_no: int, capacity: int, schema: TableSchema):
        self.group_no = group_no
        self.capacity = capacity
        self.packs: list = [PartialPack(capacity, c.type.numeric) for c in schema.columns]
        self.insert_vid: np.ndarray | None = np.full(capacity, _INVALID, dtype=np.uint64)
        self.delete_vid: np.ndarray | None = np.full(capacity, _INVALID, dtype=np.uint64)
        self.state: np.ndarray | None = np.zeros(capacity, dtype=np.uint8)
        self.frozen = False
        self.dropped = False

    def valid_count(self) -> int:
        return int(np.count_nonzero((self.state == LIVE) & (self.delete_vid == _INVALID)))


@dataclass
class CompactionReport:
    vid: int
    picked: list[int] = field(default_factory=list)
    moved_rows: int = 0
    dropped_groups: list[int] = field(default_factory=list)
    dropped_insert_maps: list[int] = field(default_factory=list)


class ColumnIndex:
    def __init__(self, schema: TableSchema, group_size: int = 65536, locator: RidLocator | None = None):
        if group_size < 1:
            raise ValueError("group_size must be positive")
        self.schema = schema
        self.group_size = group_size
        self.locator = locator if locator is not None else RidLocator()
        self.groups: list[RowGroup] = []
        self.next_rid = 0
        self.max_vid = 0
        # snapshots below the floor may have lost the version data they need
        self.snapshot_floor = 0
        self.lock = threading.Lock()
        self.on_pack_frozen = None  # callback(table_id, group_no, col, DataPack)
        self.compaction_vids: set[int] = set()

    # -- slots --------------------------------------------------------------

    def _group(self, rid: int) -> RowGroup:
        return self.groups[rid // self.group_size]

    def allocate(self, n: int = 1, pending: bool = False) -> int:
        """Reserve ``n`` consecutive RIDs; returns the first."""
        start = self.next_rid
        end = start + n
        G = self.group_size
        while len(self.groups) * G < end:
            self.groups.append(RowGroup(len(self.groups), G, self.schema))
        if pending:
            for g0 in range(start // G, (end - 1) // G + 1 if n else start // G):
                grp = self.groups[g0]
                a = max(start, g0 * G) - g0 * G
                b = min(end, (g0 + 1) * G) - g0 * G
                grp.state[a:b] = PENDING
        self.next_rid = end
        return start

    def write_row(self, rid: int, row: tuple) -> None:
        grp = self.groups[rid // self.group_size]
        off = rid % self.group_size
        for pack, v in zip(grp.packs, row):
            pack.values[off] = v

    def read_row(self, rid: int) -> tuple:
        grp = self.groups[rid // self.group_size]
        off = rid % self.group_size
        out = []
        for pack in grp.packs:
            if pack.frozen:
                v = pack.decode()[off]
            else:
                v = pack.values[off]
            out.append(int(v) if pack.numeric else v)
        return tuple(out)

    def set_insert_vid(self, rid: int, vid: int) -> None:
        grp = self.groups[rid // self.group_size]
        off = rid % self.group_size
        grp.insert_vid[off] = vid
        grp.state[off] = LIVE
        if vid > self.max_vid:
            self.max_vid = vid

    def set_delete_vid(self, rid: int, vid: int) -> None:
        grp = self.groups[rid // self.group_size]
        grp.delete_vid[rid % self.group_size] = vid
        if vid > self.max_vid:
            self.max_vid = vid

    def mark_dead(self, rid: int) -> None:
        """Pre-committed row that must never become visible."""
        grp = self.groups[rid // self.group_size]
        off = rid % self.group_size
        grp.state[off] = DEAD
        grp.delete_vid[off] = 0

    def _slices(self, start: int, end: int):
        G = self.group_size
        while start < end:
            g, off = divmod(start, G)
            n = min(end - start, G - off)
            yield self.groups[g], off, off + n
            start += n

    def finalize_range(self, start: int, end: int, vid: int) -> None:
        """Make pre-committed RIDs [start, end) visible at ``vid``.

        Rows that died inside their own transaction end up with
        insert = delete = vid, exactly as if they had been applied normally.
        """
        for grp, a, b in self._slices(start, end):
            st = grp.state[a:b]
            grp.delete_vid[a:b][st == DEAD] = vid
            if grp.insert_vid is not None:
                grp.insert_vid[a:b] = vid
            st[:] = LIVE
        if vid > self.max_vid:
            self.max_vid = vid

    def abort_range(self, start: int, end: int) -> None:
        for grp, a, b in self._slices(start, end):
            grp.state[a:b] = DEAD
            grp.delete_vid[a:b] = 0

    def pending_to_dead(self) -> int:
        n = 0
        for grp in self.groups:
            if grp.dropped:
                continue
            pend = grp.state == PENDING
            k = int(np.count_nonzero(pend))
            if k:
                grp.state[pend] = DEAD
                grp.delete_vid[pend] = 0
                n += k
        return n

    def visible(self, rid: int, snapshot: int) -> bool:
        grp = self.groups[rid // self.group_size]
        if grp.dropped:
            return False
        off = rid % self.group_size
        if grp.insert_vid is not None and grp.insert_vid[off] > snapshot:
            return False
        return snapshot < grp.delete_vid[off]

    # -- DML ------------------------------------------------------------------

    def apply_insert(self, rid: int, row: tuple, vid: int) -> None:
        """Insert at a pre-allocated RID (the replay dispatcher allocates)."""
        with self.lock:
            self.locator.put(row[0], rid)
        self.write_row(rid, row)
        self.set_insert_vid(rid, vid)

    def apply_delete(self, pk: int, vid: int) -> int:
        with self.lock:
            rid = self.locator.pop(pk)
        if rid is None:
            raise KeyNotFound(f"{self.schema.name}: pk {pk} not in column index")
        self.set_delete_vid(rid, vid)
        return rid

    def ci_insert(self, row: tuple, vid: int) -> int:
        with self.lock:
            if self.locator.get(row[0]) is not None:
                raise DuplicatePk(f"{self.schema.name}: pk {row[0]}")
            rid = self.allocate(1)
            self.locator.put(row[0], rid)
        self.write_row(rid, row)
        self.set_insert_vid(rid, vid)
        return rid

    def ci_delete(self, pk: int, vid: int) -> None:
        self.apply_delete(pk, vid)

    def ci_update(self, row: tuple, vid: int) -> int:
        self.apply_delete(row[0], vid)
        return self.ci_insert(row, vid)

    # -- freeze / compaction --------------------------------------------------

    def full_unfrozen_groups(self) -> list[int]:
        G = self.group_size
        return [g.group_no for g in self.groups
                if not g.frozen and not g.dropped and (g.group_no + 1) * G <= self.next_rid]

    def freeze_partial_pack(self, group_no: int, col: int) -> DataPack:
        grp = self.groups[group_no]
        pack = grp.packs[col]
        if pack.frozen:
            return pack
        if (group_no + 1) * self.group_size > self.next_rid:
            raise ValueError(f"group {group_no} is not full")
        dp = DataPack.build(pack.values, pack.numeric, grp.valid_count())
        # single reference swap: readers see either the old or the new pack
        grp.packs[col] = dp
        if self.on_pack_frozen is not None:
            self.on_pack_frozen(self.schema.table_id, group_no, col, dp)
        return dp

    def freeze_group(self, group_no: int) -> None:
        for col in range(self.schema.ncols):
            self.freeze_partial_pack(group_no, col)
        self.groups[group_no].frozen = True

    def freeze_full_groups(self) -> list[int]:
        done = self.full_unfrozen_groups()
        for g in done:
            self.freeze_group(g)
        return done

    def drop_insert_vid_map(self, group_no: int, min_active_snapshot: int) -> bool:
        grp = self.groups[group_no]
        if not grp.frozen or grp.dropped or grp.insert_vid is None:
            return False
        if np.any(grp.state == PENDING):
            return False
        live = grp.state == LIVE
        max_ins = int(grp.insert_vid[live].max()) if live.any() else 0
        if min_active_snapshot > max_ins:
            grp.insert_vid = None
            self.snapshot_floor = max(self.snapshot_floor, min_active_snapshot)
            return True
        return False

    def compact(self, min_active_snapshot: int, vid: int | None = None) -> CompactionReport:
        """Re-append the live rows of sparse frozen groups and drop dead groups.

        ``vid`` must exceed every snapshot a reader may currently hold; the
        replayer passes applied_lsn + 1.
        """
        if vid is None:
            vid = max(self.max_vid, min_active_snapshot) + 1
        report = CompactionReport(vid)
        G = self.group_size
        self.freeze_full_groups()
        self.compaction_vids.add(vid)
        for grp in list(self.groups):
            if not grp.frozen or grp.dropped:
                continue
            live = (grp.state == LIVE) & (grp.delete_vid == _INVALID)
            nvalid = int(np.count_nonzero(live))
            if nvalid * 2 >= G or nvalid == 0:
                continue
            report.picked.append(grp.group_no)
            cols = [p.decode() for p in grp.packs]
            for off in np.flatnonzero(live).tolist():
                row = tuple(int(c[off]) if p.numeric else c[off] for c, p in zip(cols, grp.packs))
                old_rid = grp.group_no * G + off
                with self.lock:
                    self.locator.remove(row[0])
                    rid = self.allocate(1)
                    self.locator.put(row[0], rid)
                self.write_row(rid, row)
                self.set_insert_vid(rid, vid)
                self.set_delete_vid(old_rid, vid)
                report.moved_rows += 1
        for grp in self.groups:
            if not grp.frozen or grp.dropped:
                continue
            if np.any(grp.state == PENDING):
                continue
            live = grp.state == LIVE
            if live.any() and int(grp.delete_vid[live].max()) > min_active_snapshot:
                continue
            grp.dropped = True
            grp.packs = []
            grp.insert_vid = grp.delete_vid = grp.state = None
            report.dropped_groups.append(grp.group_no)
            self.snapshot_floor = max(self.snapshot_floor, min_active_snapshot)
        self.freeze_full_groups()
        return report

    # -- reads --------------------------------------------------------------

    def group_rows(self, grp: RowGroup) -> int:
        return min(self.group_size, self.next_rid - grp.group_no * self.group_size)

    def visibility(self, grp: RowGroup, snapshot: int) -> np.ndarray:
        n = self.group_rows(grp)
        return visible_mask(grp.insert_vid, grp.delete_vid, snapshot, n)

    def visible_rows(self, snapshot: int) -> list[tuple]:
        out = []
        for grp in self.groups:
            if grp.dropped:
                continue
            mask = self.visibility(grp, snapshot)
            if not mask.any():
                continue
            n = len(mask)
            cols = [p.decode(n)[:n][mask].tolist() for p in grp.packs]
            out.extend(zip(*cols))
        return out

    def live_count(self) -> int:
        return len(self.locator)

    # -- bulk build -----------------------------------------------------------

    @classmethod
    def build_from_rows(cls, schema: TableSchema, rows, vid: int, group_size: int = 65536,
                        flush_threshold: int = 4096, max_runs: int = 8) -> "ColumnIndex":
        """Column index holding exactly ``rows``, all inserted at ``vid``."""
        rows = list(rows)
        ci = cls(schema, group_size, RidLocator(flush_threshold, max_runs))
        n = len(rows)
        if n == 0:
            return ci
        pks = np.fromiter((r[0] for r in rows), dtype=np.int64, count=n)
        uniq = np.unique(pks)
        if len(uniq) != n:
            raise DuplicatePk(f"{schema.name}: duplicate primary keys in build input")
        ci.allocate(n)
        columns = list(zip(*rows))
        G = group_size
        for grp in ci.groups:
            a = grp.group_no * G
            b = min(n, a + G)
            for pack, colvals in zip(grp.packs, columns):
                if pack.numeric:
                    pack.values[:b - a] = np.fromiter(colvals[a:b], dtype=np.int64, count=b - a)
                else:
                    pack.values[:b - a] = colvals[a:b]
            grp.insert_vid[:b - a] = vid
            grp.state[:b - a] = LIVE
        order = np.argsort(pks, kind="stable")
        ci.locator.runs = [Run(pks[order], order.astype(np.int64))]
        ci.locator.live = n
        ci.max_vid = vid
        ci.freeze_full_groups()
        return ci
