"""Update propagation on a read-only node.

Each batch of log entries goes through:

1. physical replay, partitioned by page over W1 workers, which also turns
   every DML entry into logical insert/delete statements;
2. a serial pass in LSN order that drops structural entries (split
   relocations), files statements into per-transaction buffer units and
   pre-commits units that grow past the threshold;
3. logical apply of committed units in commit order, partitioned by primary
   key over W2 workers;
4. publication of the applied LSN.

Transactions are parsed as their entries arrive, before their commit entry
shows up, so a commit only costs the apply step.
"""

from __future__ import annotations

import collections
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .colindex import ColumnIndex
from .errors import ApplyConflict
from .kernels import hash64
from .locator import RidLocator
from .pages import Page, apply_entry
from .redo import Kind, LogReader, MemoryLog, RedoEntry, RedoLog
from .rowstore import VersionStore
from .schema import Catalog

INSERT = Kind.INSERT
DELETE = Kind.DELETE
UPDATE = Kind.UPDATE
COMMIT = Kind.COMMIT
ABORT = Kind.ABORT


class DmlStatement:
    __slots__ = ("kind", "table_id", "pk", "row", "lsn", "tid")

    def __init__(self, kind, table_id, pk, row, lsn, tid):
        self.kind = kind
        self.table_id = table_id
        self.pk = pk
        self.row = row
        self.lsn = lsn
        self.tid = tid

    def __repr__(self) -> str:
        return f"DmlStatement({self.kind.name}, t{self.table_id}, pk={self.pk}, lsn={self.lsn}, tid={self.tid})"

    def key(self):
        return (self.kind, self.table_id, self.pk, self.row, self.lsn, self.tid)


@dataclass
class PrecommitState:
    temp: dict = field(default_factory=dict)  # table_id -> RidLocator
    ranges: list = field(default_factory=list)  # (table_id, start, end)
    global_deletes: list = field(default_factory=list)  # (table_id, pk), applied at commit
    flushes: int = 0


class TransactionBufferUnit:
    __slots__ = ("tid", "dmls", "pk_insert_set", "precommit", "state", "commit_seq", "final", "n_dmls")

    def __init__(self, tid: int):
        self.tid = tid
        self.dmls: list[DmlStatement] = []
        self.pk_insert_set: set = set()
        self.precommit: PrecommitState | None = None
        self.state = "open"
        self.commit_seq = 0
        # (table, pk) -> last image (None = deleted); feeds the row engine
        self.final: dict = {}
        self.n_dmls = 0

    def add(self, d: DmlStatement) -> None:
        self.dmls.append(d)
        self.final[(d.table_id, d.pk)] = d.row
        self.n_dmls += 1


# -- log sources ---------------------------------------------------------------

class MemorySource:
    def __init__(self, log: MemoryLog):
        self.log = log

    def written_lsn(self) -> int:
        return self.log.written_lsn

    def wait_beyond(self, lsn: int, timeout: float) -> int:
        return self.log.channel.wait_beyond(lsn, timeout)

    def fetch(self, start: int, upto: int, limit: int) -> list[RedoEntry]:
        return self.log.entries[start - 1:min(upto, start - 1 + limit)]


class DirSource:
    """Reads the shared log directory; woken by an in-process channel when
    one is given, otherwise by polling the sidecar."""

    def __init__(self, log_dir, channel=None, poll_interval: float = 0.001):
        self.reader = LogReader(log_dir, channel, poll_interval)
        self._cursor = None

    def written_lsn(self) -> int:
        return self.reader.written_lsn()

    def wait_beyond(self, lsn: int, timeout: float) -> int:
        return self.reader.wait_beyond(lsn, timeout)

    def fetch(self, start: int, upto: int, limit: int) -> list[RedoEntry]:
        if self._cursor is None or self._cursor.next_lsn != start:
            self._cursor = self.reader.cursor(start)
        return self._cursor.fetch(upto, limit)


def source_for(log, poll_interval: float = 0.001):
    if isinstance(log, MemoryLog):
        return MemorySource(log)
    if isinstance(log, RedoLog):
        return DirSource(log.dir, log.channel, poll_interval)
    return DirSource(log, None, poll_interval)


# -- node -----------------------------------------------------------------------

@dataclass
class ReplayConfig:
    phase1_workers: int = 4
    phase2_workers: int = 4
    precommit_threshold: int = 8192
    poll_interval_ms: float = 1.0
    group_size: int = 65536
    batch_limit: int = 16384
    locator_flush: int = 4096
    locator_max_runs: int = 8
    compaction: bool = False
    compaction_every: int = 16  # batches


@dataclass
class ReplayStats:
    batches: int = 0
    entries: int = 0
    dmls: int = 0
    structural: int = 0
    committed_units: int = 0
    aborted_units: int = 0
    precommit_flushes: int = 0
    phase1_seconds: float = 0.0
    serial_seconds: float = 0.0
    phase2_seconds: float = 0.0
    page_order_violations: int = 0
    pk_order_violations: int = 0


@dataclass
class ReplayImage:
    """Physical replay state at ``start_lsn - 1``: buffer pool pages and the
    transactions still open. With it a node resumes instead of re-parsing
    the log from LSN 1."""
    pages: dict  # page_id -> Page
    units: dict  # tid -> TransactionBufferUnit


@dataclass
class LoadedState:
    """Column-index state restored from a checkpoint or a rebuild."""
    indexes: dict
    start_lsn: int
    replay: ReplayImage | None = None


class RoNode:
    """Replica: buffer pool, per-table column indexes and a row engine fed by replay."""

    def __init__(self, catalog: Catalog, source, config: ReplayConfig | None = None,
                 node_id: str = "ro1", state: LoadedState | None = None):
        self.catalog = catalog
        self.source = source
        self.config = config or ReplayConfig()
        self.node_id = node_id
        self.pages: dict[int, Page] = {}
        self.versions = VersionStore()
        if state is not None:
            self.indexes = state.indexes
            self.start_lsn = state.start_lsn
        else:
            self.indexes = {s.table_id: self._new_index(s) for s in catalog}
            self.start_lsn = 1
        self.next_lsn = 1
        self.applied_lsn = 0
        self.last_commit_lsn = 0
        self.units: dict[int, TransactionBufferUnit] = {}
        self.terminated: set[int] = set()
        # physical copies per (table, pk); above one means a split is relocating it
        self.live: dict[tuple[int, int], int] = {}
        if state is not None and state.replay is not None:
            self._resume(state.replay)
        self.stats = ReplayStats()
        self.cond = threading.Condition()
        self.pins: collections.Counter = collections.Counter()
        self.listeners: list = []  # callback(node_id, applied_lsn)
        self.batch_hooks: list = []  # callback(node) after every batch, driver thread
        self.delay = None  # () -> seconds to stall before applying a batch
        self.jitter: random.Random | None = None  # randomizes worker scheduling
        self._pool1 = None
        self._pool2 = None
        self._thread = None
        self._stop = threading.Event()
        self.error: BaseException | None = None

    def _resume(self, image: ReplayImage) -> None:
        csn = self.start_lsn - 1
        self.pages = image.pages
        self.units = image.units
        live = self.live
        for p in self.pages.values():
            t = p.table_id
            for pk in p.pk_slot:
                live[(t, pk)] = live.get((t, pk), 0) + 1
        # the row engine starts from the loaded column state
        for t, ci in self.indexes.items():
            for row in ci.visible_rows(csn):
                self.versions.record(t, row[0], csn, row)
        self.versions.latest = csn
        self.next_lsn = self.start_lsn
        self.applied_lsn = self.last_commit_lsn = csn

    def replay_image(self) -> ReplayImage | None:
        """Copy of the physical replay state at the applied frontier, or None
        when an open transaction has pre-committed (its flushed statements are
        no longer buffered, so only a full re-parse can rebuild it)."""
        if self.next_lsn != self.applied_lsn + 1:
            return None
        units = {}
        for tid, u in self.units.items():
            if u.precommit is not None:
                return None
            c = TransactionBufferUnit(tid)
            c.dmls = list(u.dmls)
            c.pk_insert_set = set(u.pk_insert_set)
            c.final = dict(u.final)
            c.n_dmls = u.n_dmls
            units[tid] = c
        return ReplayImage({pid: p.copy() for pid, p in self.pages.items()}, units)

    def _new_index(self, schema) -> ColumnIndex:
        c = self.config
        return ColumnIndex(schema, c.group_size, RidLocator(c.locator_flush, c.locator_max_runs))

    # -- snapshots ------------------------------------------------------------

    @property
    def serving(self) -> bool:
        return self.next_lsn >= self.start_lsn

    def pin(self, snapshot: int | None = None) -> int:
        with self.cond:
            s = self.applied_lsn if snapshot is None else snapshot
            self.pins[s] += 1
            return s

    def unpin(self, snapshot: int) -> None:
        with self.cond:
            self.pins[snapshot] -= 1
            if self.pins[snapshot] <= 0:
                del self.pins[snapshot]

    def min_active_snapshot(self) -> int:
        with self.cond:
            return min(self.pins) if self.pins else self.applied_lsn

    def wait_applied(self, lsn: int, timeout: float | None) -> bool:
        with self.cond:
            return self.cond.wait_for(lambda: self.applied_lsn >= lsn, timeout)

    def visible_state(self, snapshot: int | None = None) -> dict[int, list[tuple]]:
        s = self.applied_lsn if snapshot is None else snapshot
        return {t: sorted(ci.visible_rows(s)) for t, ci in self.indexes.items()}

    # -- phase 1 --------------------------------------------------------------

    def phase1_dispatch(self, entry: RedoEntry) -> int:
        return hash64(entry.page_id) % self.config.phase1_workers

    def _phase1_run(self, items, seed=None) -> list:
        pages, catalog = self.pages, self.catalog
        rng = random.Random(seed) if seed is not None else None
        out = []
        last = 0
        for e in items:
            if e.lsn <= last:
                self.stats.page_order_violations += 1
            last = e.lsn
            if rng is not None and rng.random() < 0.01:
                time.sleep(rng.random() * 0.0005)
            old, new = apply_entry(pages, catalog, e)
            out.append((e.lsn, e.tid, e.kind, e.table_id, old, new))
        return out

    def phase1(self, batch: list[RedoEntry]) -> list:
        """Physical replay of ``batch``; returns LSN-sorted parse records."""
        W = self.config.phase1_workers
        control = []
        if W == 1:
            dml = []
            for e in batch:
                (dml if e.kind <= DELETE else control).append(e)
            outs = [self._phase1_run(dml)]
        else:
            queues = [[] for _ in range(W)]
            route: dict[int, int] = {}
            for e in batch:
                if e.kind > DELETE:
                    control.append(e)
                    continue
                w = route.get(e.page_id)
                if w is None:
                    w = route[e.page_id] = hash64(e.page_id) % W
                queues[w].append(e)
            if self._pool1 is None:
                self._pool1 = ThreadPoolExecutor(W, thread_name_prefix=f"{self.node_id}-p1")
            seeds = [self.jitter.random() if self.jitter else None for _ in range(W)]
            futs = [self._pool1.submit(self._phase1_run, q, s) for q, s in zip(queues, seeds) if q]
            outs = [f.result() for f in futs]
        recs = [(e.lsn, e.tid, e.kind, 0, None, None) for e in control]
        for o in outs:
            recs.extend(o)
        return self.resort(recs)

    @staticmethod
    def resort(records: list) -> list:
        records.sort(key=lambda r: r[0])
        return records

    # -- serial stage ---------------------------------------------------------

    def resort_and_buffer(self, records: list) -> list[TransactionBufferUnit]:
        """File LSN-ordered parse records into buffer units; returns the
        units committed in this batch, in commit order."""
        committed = []
        units, live, term = self.units, self.live, self.terminated
        threshold = self.config.precommit_threshold
        start = self.start_lsn
        st = self.stats
        for lsn, tid, kind, table_id, old, new in records:
            if kind == COMMIT:
                unit = units.pop(tid, None) or TransactionBufferUnit(tid)
                unit.state = "committed"
                unit.commit_seq = lsn
                committed.append(unit)
                term.add(tid)
                st.committed_units += 1
                continue
            if kind == ABORT:
                unit = units.pop(tid, None)
                if unit is not None:
                    unit.state = "aborted"
                    if unit.precommit is not None:
                        self.abort_precommit(unit)
                term.add(tid)
                st.aborted_units += 1
                continue
            unit = units.get(tid)
            if unit is None and tid != 0 and tid not in term:
                unit = units[tid] = TransactionBufferUnit(tid)
            if kind == INSERT:
                pk = new[0]
                key = (table_id, pk)
                c = live.get(key, 0) + 1
                live[key] = c
                if unit is None or c > 1 or key in unit.pk_insert_set:
                    st.structural += 1
                    continue
                unit.pk_insert_set.add(key)
                unit.add(DmlStatement(INSERT, table_id, pk, new, lsn, tid))
            elif kind == DELETE:
                pk = old[0]
                key = (table_id, pk)
                c = live[key]
                if c == 1:
                    del live[key]
                else:
                    live[key] = c - 1
                if unit is None or c > 1:
                    st.structural += 1
                    continue
                unit.pk_insert_set.discard(key)
                unit.add(DmlStatement(DELETE, table_id, pk, None, lsn, tid))
            else:
                if unit is None:
                    st.structural += 1
                    continue
                unit.add(DmlStatement(DELETE, table_id, old[0], None, lsn, tid))
                unit.add(DmlStatement(INSERT, table_id, new[0], new, lsn, tid))
            if len(unit.dmls) >= threshold and lsn >= start:
                self.precommit_unit(unit)
        return committed

    # -- pre-commit -----------------------------------------------------------

    def precommit_unit(self, unit: TransactionBufferUnit) -> None:
        """Materialize the unit's buffered statements invisibly and free the buffer."""
        pc = unit.precommit
        if pc is None:
            pc = unit.precommit = PrecommitState()
        if not unit.dmls:
            return
        counts: dict[int, int] = {}
        for d in unit.dmls:
            if d.kind == INSERT:
                counts[d.table_id] = counts.get(d.table_id, 0) + 1
        cursor = {}
        for t, n in counts.items():
            s = self.indexes[t].allocate(n, pending=True)
            pc.ranges.append((t, s, s + n))
            cursor[t] = s
        c = self.config
        for d in unit.dmls:
            ci = self.indexes[d.table_id]
            temp = pc.temp.get(d.table_id)
            if temp is None:
                temp = pc.temp[d.table_id] = RidLocator(c.locator_flush, c.locator_max_runs)
            if d.kind == INSERT:
                rid = cursor[d.table_id]
                cursor[d.table_id] = rid + 1
                ci.write_row(rid, d.row)
                temp.put(d.pk, rid)
            else:
                rid = temp.pop(d.pk)
                if rid is not None:
                    ci.mark_dead(rid)
                else:
                    pc.global_deletes.append((d.table_id, d.pk))
        unit.dmls = []
        pc.flushes += 1
        self.stats.precommit_flushes += 1

    def finalize_precommit(self, unit: TransactionBufferUnit, commit_seq: int) -> None:
        self.precommit_unit(unit)  # whatever arrived after the last flush
        pc = unit.precommit
        for t, pk in pc.global_deletes:
            self.indexes[t].apply_delete(pk, commit_seq)
        for t, s, e in pc.ranges:
            self.indexes[t].finalize_range(s, e, commit_seq)
        for t, temp in pc.temp.items():
            ci = self.indexes[t]
            with ci.lock:
                ci.locator.merge_temp(temp)

    def abort_precommit(self, unit: TransactionBufferUnit) -> None:
        pc = unit.precommit
        for t, s, e in pc.ranges:
            self.indexes[t].abort_range(s, e)
        pc.temp.clear()
        pc.global_deletes.clear()

    # -- phase 2 --------------------------------------------------------------

    def phase2_apply(self, units: list[TransactionBufferUnit]) -> None:
        seg = []
        for u in units:
            cs = u.commit_seq
            for (t, pk), row in u.final.items():
                self.versions.record(t, pk, cs, row)
            self.versions.latest = max(self.versions.latest, cs)
            self.last_commit_lsn = cs
            if cs < self.start_lsn:
                continue  # already part of the loaded state
            if u.precommit is not None:
                self._apply_segment(seg)
                seg = []
                self.finalize_precommit(u, cs)
            else:
                seg.append(u)
        self._apply_segment(seg)

    def _phase2_run(self, queue, seed=None) -> None:
        rng = random.Random(seed) if seed is not None else None
        last = 0
        for ci, pk, rid, row, vid in queue:
            if vid < last:
                self.stats.pk_order_violations += 1
                raise ApplyConflict(f"commit order violated on pk {pk}: {vid} after {last}")
            last = vid
            if rng is not None and rng.random() < 0.01:
                time.sleep(rng.random() * 0.0005)
            if rid < 0:
                ci.apply_delete(pk, vid)
            else:
                ci.apply_insert(rid, row, vid)

    def _apply_segment(self, units: list[TransactionBufferUnit]) -> None:
        if not units:
            return
        W = self.config.phase2_workers
        indexes = self.indexes
        if W == 1:
            q = []
            for u in units:
                vid = u.commit_seq
                for d in u.dmls:
                    ci = indexes[d.table_id]
                    if d.kind == INSERT:
                        q.append((ci, d.pk, ci.allocate(1), d.row, vid))
                    else:
                        q.append((ci, d.pk, -1, None, vid))
            self._phase2_run(q)
            return
        queues = [[] for _ in range(W)]
        for u in units:
            vid = u.commit_seq
            for d in u.dmls:
                ci = indexes[d.table_id]
                w = hash64(d.pk) % W
                if d.kind == INSERT:
                    # RIDs are handed out here, serially, so they do not depend on W2
                    queues[w].append((ci, d.pk, ci.allocate(1), d.row, vid))
                else:
                    queues[w].append((ci, d.pk, -1, None, vid))
        if self._pool2 is None:
            self._pool2 = ThreadPoolExecutor(W, thread_name_prefix=f"{self.node_id}-p2")
        seeds = [self.jitter.random() if self.jitter else None for _ in range(W)]
        futs = [self._pool2.submit(self._phase2_run, q, s) for q, s in zip(queues, seeds) if q]
        for f in futs:
            f.result()

    # -- driver -----------------------------------------------------------------

    def advance_applied_lsn(self, frontier: int) -> int:
        """Every commit at or below ``frontier`` has been applied; publish it."""
        if frontier < self.start_lsn - 1:
            return self.applied_lsn  # still fast-forwarding up to the loaded state
        with self.cond:
            if frontier > self.applied_lsn:
                self.applied_lsn = frontier
            self.cond.notify_all()
        for cb in self.listeners:
            cb(self.node_id, self.applied_lsn)
        return self.applied_lsn

    def process(self, batch: list[RedoEntry]) -> None:
        st = self.stats
        t0 = time.perf_counter()
        recs = self.phase1(batch)
        t1 = time.perf_counter()
        committed = self.resort_and_buffer(recs)
        t2 = time.perf_counter()
        self.phase2_apply(committed)
        t3 = time.perf_counter()
        st.phase1_seconds += t1 - t0
        st.serial_seconds += t2 - t1
        st.phase2_seconds += t3 - t2
        st.batches += 1
        st.entries += len(batch)
        st.dmls += sum(u.n_dmls for u in committed)
        self.next_lsn = batch[-1].lsn + 1
        for ci in self.indexes.values():
            ci.freeze_full_groups()
        self.advance_applied_lsn(batch[-1].lsn)
        if self.config.compaction and st.batches % self.config.compaction_every == 0:
            self.compact()
        for hook in self.batch_hooks:
            hook(self)

    def compact(self) -> list:
        ma = self.min_active_snapshot()
        vid = self.applied_lsn + 1
        reports = []
        for ci in self.indexes.values():
            r = ci.compact(ma, vid=vid)
            for g in ci.groups:
                if ci.drop_insert_vid_map(g.group_no, ma):
                    r.dropped_insert_maps.append(g.group_no)
            reports.append(r)
        return reports

    def run_once(self, limit: int | None = None) -> int:
        written = self.source.written_lsn()
        if written < self.next_lsn:
            return 0
        batch = self.source.fetch(self.next_lsn, written, limit or self.config.batch_limit)
        if not batch:
            return 0
        if self.delay is not None:
            d = self.delay()
            if d > 0:
                time.sleep(d)
        self.process(batch)
        return len(batch)

    def catch_up(self, target: int | None = None) -> int:
        """Replay synchronously until applied >= target (default: current written LSN)."""
        target = self.source.written_lsn() if target is None else target
        while self.next_lsn <= target:
            if not self.run_once():
                break
        return self.applied_lsn

    def _loop(self) -> None:
        poll = self.config.poll_interval_ms / 1000.0
        try:
            while not self._stop.is_set():
                if not self.run_once():
                    self.source.wait_beyond(self.next_lsn - 1, poll)
                    # idle boundary: let hooks (checkpoint requests) run too
                    for hook in self.batch_hooks:
                        hook(self)
        except BaseException as exc:  # surfaced through .error and close()
            self.error = exc
            with self.cond:
                self.cond.notify_all()

    def start(self) -> "RoNode":
        if self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._loop, name=f"{self.node_id}-replay", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        for pool in (self._pool1, self._pool2):
            if pool is not None:
                pool.shutdown(wait=True)
        self._pool1 = self._pool2 = None
        if self.error is not None:
            err, self.error = self.error, None
            raise err
