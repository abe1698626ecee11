"""Writer-node row store: per-table B+trees over slotted leaf pages.

Every page mutation is logged before it is applied. Leaf splits relocate the
upper half of a leaf under the TID of the transaction that caused them, as
plain insert entries (new page) followed by delete entries (old page); the
replicas must filter those out. Aborts are rolled back from in-memory
before-images and the compensating page changes are logged too, so the page
images on every node stay byte-identical.
"""

from __future__ import annotations

import enum
import threading
from bisect import bisect_right
from dataclasses import dataclass, field

from .errors import DuplicateKey, KeyNotFound, LockConflict, TxnNotActive
from .pages import Page, apply_entry, page_images
from .redo import Kind, LogReader, MemoryLog, RedoEntry, RedoLog
from .schema import Catalog


class TxnStatus(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(eq=False)
class TxnHandle:
    tid: int
    status: TxnStatus = TxnStatus.ACTIVE
    commit_seq: int | None = None
    # (kind, table_id, pk, before_image) in execution order
    undo: list = field(default_factory=list, repr=False)
    touched: dict = field(default_factory=dict, repr=False)
    dml_statements: int = 0


class VersionStore:
    """Committed row versions per (table, pk), keyed by commit sequence."""

    def __init__(self):
        self.tables: dict[int, dict[int, list]] = {}
        self.latest = 0

    def record(self, table_id: int, pk: int, cs: int, row: tuple | None) -> None:
        t = self.tables.get(table_id)
        if t is None:
            t = self.tables[table_id] = {}
        vs = t.get(pk)
        if vs is None:
            if row is not None:
                t[pk] = [(cs, row)]
        else:
            vs.append((cs, row))
        if cs > self.latest:
            self.latest = cs

    def lookup(self, table_id: int, pk: int, as_of: int) -> tuple | None:
        vs = self.tables.get(table_id, {}).get(pk)
        if not vs:
            return None
        for cs, row in reversed(vs):
            if cs <= as_of:
                return row
        return None

    def scan(self, table_id: int, as_of: int):
        # list() snapshots the dict so replay may keep recording meanwhile
        for vs in list(self.tables.get(table_id, {}).values()):
            cs, row = vs[-1]
            if cs <= as_of:
                if row is not None:
                    yield row
                continue
            for cs, row in reversed(vs):
                if cs <= as_of:
                    if row is not None:
                        yield row
                    break

    def count_at(self, table_id: int, as_of: int) -> int:
        return sum(1 for _ in self.scan(table_id, as_of))


class _Inner:
    __slots__ = ("keys", "children")

    def __init__(self, keys, children):
        self.keys = keys
        self.children = children


class BPlusTree:
    """Interior levels live in memory only; leaves are the logged pages."""

    def __init__(self, fanout: int = 64):
        self.fanout = fanout
        self.root: _Inner | Page | None = None

    def find(self, pk: int) -> tuple[Page | None, list]:
        node = self.root
        path = []
        while isinstance(node, _Inner):
            i = bisect_right(node.keys, pk)
            path.append((node, i))
            node = node.children[i]
        return node, path

    def add_leaf(self, path: list, sep: int, right: Page) -> None:
        """Link ``right`` (holding keys >= sep) after the leaf reached via ``path``."""
        child = right
        while path:
            node, i = path.pop()
            node.keys.insert(i, sep)
            node.children.insert(i + 1, child)
            if len(node.children) <= self.fanout:
                return
            mid = len(node.keys) // 2
            sep = node.keys[mid]
            child = _Inner(node.keys[mid + 1:], node.children[mid + 1:])
            del node.keys[mid:]
            del node.children[mid + 1:]
        self.root = _Inner([sep], [self.root, child])

    @classmethod
    def bulk(cls, leaves: list[Page], fanout: int = 64) -> "BPlusTree":
        """Build from key-ordered, non-empty leaves (recovery)."""
        tree = cls(fanout)
        if not leaves:
            return tree
        level = list(leaves)
        seps = [min(p.pk_slot) for p in leaves[1:]]
        for i, p in enumerate(leaves):
            p.low = None if i == 0 else seps[i - 1]
            p.high = seps[i] if i < len(seps) else None
        while len(level) > 1:
            nxt, nseps = [], []
            step = fanout
            for j in range(0, len(level), step):
                kids = level[j:j + step]
                keys = seps[j:j + len(kids) - 1]
                nxt.append(_Inner(list(keys), list(kids)))
                if j + step < len(level):
                    nseps.append(seps[j + step - 1])
            level, seps = nxt, nseps
        tree.root = level[0]
        return tree

    def leaves(self):
        def walk(node):
            if isinstance(node, _Inner):
                for c in node.children:
                    yield from walk(c)
            elif node is not None:
                yield node
        return walk(self.root)


@dataclass
class RowStoreStats:
    splits: int = 0
    relocated_rows: int = 0
    committed_txns: int = 0
    aborted_txns: int = 0
    # logical DML statements of committed txns as the column side sees them
    # (an update counts as a delete plus an insert)
    committed_dmls: int = 0


class RowStore:
    """Single-writer transactional row store emitting physical redo entries.

    ``broadcast`` chooses when the written LSN is announced: after every
    statement ("statement") or only at commit/abort ("commit").
    """

    def __init__(self, catalog: Catalog, log: RedoLog | MemoryLog | None = None,
                 broadcast: str = "statement", fanout: int = 64):
        self.catalog = catalog
        self.log = log if log is not None else MemoryLog()
        self.broadcast = broadcast
        self.fanout = fanout
        self.pages: dict[int, Page] = {}
        self.trees: dict[int, BPlusTree] = {s.table_id: BPlusTree(fanout) for s in catalog}
        self.versions = VersionStore()
        self.locks: dict[tuple[int, int], int] = {}
        self.active: dict[int, TxnHandle] = {}
        self.next_tid = max(1, getattr(self.log, "max_tid", 0) + 1)
        self.next_page_id = 1
        self.stats = RowStoreStats()
        self.mutex = threading.RLock()
        self.on_commit = None  # optional callback(cs, txn)

    # -- plumbing ---------------------------------------------------------

    def _emit(self, tid, kind, page_id=0, slot_id=0, table_id=0, payload=b"") -> int:
        return self.log.append(RedoEntry(0, tid, kind, page_id, slot_id, table_id, payload))

    def _statement_done(self) -> None:
        if self.broadcast == "statement":
            self.log.broadcast_written_lsn()

    def _check(self, txn: TxnHandle) -> None:
        if txn.status is not TxnStatus.ACTIVE:
            raise TxnNotActive(f"txn {txn.tid} is {txn.status.value}")

    def _lock(self, txn: TxnHandle, key) -> bool:
        holder = self.locks.get(key)
        if holder is None:
            self.locks[key] = txn.tid
            return True
        if holder != txn.tid:
            raise LockConflict(f"row {key} locked by txn {holder}")
        return False

    def _tree(self, table_id: int) -> BPlusTree:
        try:
            return self.trees[table_id]
        except KeyError:
            raise KeyError(f"unknown table_id {table_id}") from None

    @property
    def latest_commit_seq(self) -> int:
        return self.versions.latest

    # -- physical operations (logged) -------------------------------------

    def _phys_insert(self, tid: int, table_id: int, row: tuple) -> None:
        tree = self._tree(table_id)
        pk = row[0]
        leaf, path = tree.find(pk)
        if leaf is None:
            leaf = Page(self._alloc_page_id(), table_id, self.catalog.page_capacity)
            self.pages[leaf.page_id] = leaf
            tree.root = leaf
        elif leaf.full:
            leaf = self._split(tid, tree, leaf, path, pk)
        slot = leaf.free_slot()
        self._emit(tid, Kind.INSERT, leaf.page_id, slot, table_id, self.catalog[table_id].encode_row(row))
        leaf.put(slot, row)

    def _phys_delete(self, tid: int, table_id: int, pk: int) -> tuple:
        leaf, _ = self._tree(table_id).find(pk)
        slot = leaf.pk_slot[pk]
        self._emit(tid, Kind.DELETE, leaf.page_id, slot, table_id)
        return leaf.clear(slot)

    def _phys_update(self, tid: int, table_id: int, pk: int, changes) -> tuple:
        leaf, _ = self._tree(table_id).find(pk)
        slot = leaf.pk_slot[pk]
        old = leaf.slots[slot]
        new = list(old)
        for col, v in changes:
            new[col] = v
        self._emit(tid, Kind.UPDATE, leaf.page_id, slot, table_id, self.catalog[table_id].encode_changes(changes))
        leaf.slots[slot] = tuple(new)
        return old

    def _alloc_page_id(self) -> int:
        pid = self.next_page_id
        self.next_page_id += 1
        return pid

    def _split(self, tid: int, tree: BPlusTree, leaf: Page, path: list, pk: int) -> Page:
        items = leaf.sorted_items()
        moving = items[len(items) // 2:]
        sep = moving[0][0]
        right = Page(self._alloc_page_id(), leaf.table_id, leaf.capacity)
        right.low, right.high = sep, leaf.high
        leaf.high = sep
        self.pages[right.page_id] = right
        schema = self.catalog[leaf.table_id]
        # relocated copies go in first, so the row is never absent from the store
        for i, (_, slot) in enumerate(moving):
            row = leaf.slots[slot]
            self._emit(tid, Kind.INSERT, right.page_id, i, leaf.table_id, schema.encode_row(row))
            right.put(i, row)
        for _, slot in moving:
            self._emit(tid, Kind.DELETE, leaf.page_id, slot, leaf.table_id)
            leaf.clear(slot)
        tree.add_leaf(path, sep, right)
        self.stats.splits += 1
        self.stats.relocated_rows += len(moving)
        return right if pk >= sep else leaf

    # -- transactions ---------------------------------------------------------

    def begin_txn(self) -> TxnHandle:
        with self.mutex:
            txn = TxnHandle(self.next_tid)
            self.next_tid += 1
            self.active[txn.tid] = txn
            return txn

    def txn_insert(self, txn: TxnHandle, table_id: int, row: tuple) -> None:
        with self.mutex:
            self._check(txn)
            self.catalog[table_id].validate(row)
            key = (table_id, row[0])
            fresh = self._lock(txn, key)
            leaf, _ = self._tree(table_id).find(row[0])
            if leaf is not None and row[0] in leaf.pk_slot:
                if fresh:
                    del self.locks[key]
                raise DuplicateKey(f"table {table_id} pk {row[0]}")
            self._phys_insert(txn.tid, table_id, row)
            txn.undo.append((Kind.INSERT, table_id, row[0], None))
            txn.touched[key] = None
            txn.dml_statements += 1
            self._statement_done()

    def txn_update(self, txn: TxnHandle, table_id: int, pk: int, changes: list[tuple[int, object]]) -> None:
        with self.mutex:
            self._check(txn)
            schema = self.catalog[table_id]
            if not changes:
                raise ValueError("update needs at least one change")
            for col, v in changes:
                if col == schema.pk_column:
                    raise ValueError("primary key column cannot be updated")
                schema.validate_value(schema.columns[col].type, v)
            key = (table_id, pk)
            fresh = self._lock(txn, key)
            leaf, _ = self._tree(table_id).find(pk)
            if leaf is None or pk not in leaf.pk_slot:
                if fresh:
                    del self.locks[key]
                raise KeyNotFound(f"table {table_id} pk {pk}")
            old = self._phys_update(txn.tid, table_id, pk, changes)
            txn.undo.append((Kind.UPDATE, table_id, pk, [(c, old[c]) for c, _ in changes]))
            txn.touched[key] = None
            txn.dml_statements += 2
            self._statement_done()

    def txn_delete(self, txn: TxnHandle, table_id: int, pk: int) -> None:
        with self.mutex:
            self._check(txn)
            key = (table_id, pk)
            fresh = self._lock(txn, key)
            leaf, _ = self._tree(table_id).find(pk)
            if leaf is None or pk not in leaf.pk_slot:
                if fresh:
                    del self.locks[key]
                raise KeyNotFound(f"table {table_id} pk {pk}")
            old = self._phys_delete(txn.tid, table_id, pk)
            txn.undo.append((Kind.DELETE, table_id, pk, old))
            txn.touched[key] = None
            txn.dml_statements += 1
            self._statement_done()

    def txn_commit(self, txn: TxnHandle) -> int:
        with self.mutex:
            self._check(txn)
            cs = self._emit(txn.tid, Kind.COMMIT)
            txn.status = TxnStatus.COMMITTED
            txn.commit_seq = cs
            for table_id, pk in txn.touched:
                leaf, _ = self.trees[table_id].find(pk)
                self.versions.record(table_id, pk, cs, None if leaf is None else leaf.get(pk))
            self.versions.latest = cs
            self._finish(txn)
            self.stats.committed_txns += 1
            self.stats.committed_dmls += txn.dml_statements
            self.log.broadcast_written_lsn()
            if self.on_commit is not None:
                self.on_commit(cs, txn)
            return cs

    def txn_abort(self, txn: TxnHandle) -> None:
        with self.mutex:
            self._check(txn)
            for kind, table_id, pk, before in reversed(txn.undo):
                if kind == Kind.INSERT:
                    self._phys_delete(txn.tid, table_id, pk)
                elif kind == Kind.DELETE:
                    self._phys_insert(txn.tid, table_id, before)
                else:
                    self._phys_update(txn.tid, table_id, pk, before)
            self._emit(txn.tid, Kind.ABORT)
            txn.status = TxnStatus.ABORTED
            self._finish(txn)
            self.stats.aborted_txns += 1
            self.log.broadcast_written_lsn()

    def _finish(self, txn: TxnHandle) -> None:
        for key in txn.touched:
            if self.locks.get(key) == txn.tid:
                del self.locks[key]
        self.active.pop(txn.tid, None)
        txn.undo = []

    # -- reads ------------------------------------------------------------

    def point_lookup(self, table_id: int, pk: int, as_of: int | None = None) -> tuple | None:
        """Committed image of ``pk`` visible at commit sequence ``as_of`` (default: latest)."""
        if as_of is None:
            as_of = self.versions.latest
        if as_of > self.versions.latest:
            raise ValueError(f"as_of {as_of} is beyond the latest commit {self.versions.latest}")
        return self.versions.lookup(table_id, pk, as_of)

    def scan(self, table_id: int, as_of: int | None = None):
        if as_of is None:
            as_of = self.versions.latest
        return self.versions.scan(table_id, as_of)

    def committed_state(self, as_of: int | None = None) -> dict[int, list[tuple]]:
        """Per-table sorted committed rows (the replication oracle)."""
        return {s.table_id: sorted(self.scan(s.table_id, as_of)) for s in self.catalog}

    def page_images(self) -> dict[int, bytes]:
        return page_images(self.pages, self.catalog)

    # -- recovery -----------------------------------------------------------

    @classmethod
    def recover(cls, catalog: Catalog, log, **kwargs) -> "RowStore":
        """Rebuild pages, trees and committed versions by replaying ``log``
        (a RedoLog opened on the existing directory), then roll back any
        transaction that has no terminal entry."""
        store = cls(catalog, log, **kwargs)
        entries = log.read_from(1, log.last_lsn) if isinstance(log, MemoryLog) else \
            LogReader(log.dir).read_from(1, log.last_lsn)
        inflight = replay_into(store, entries)
        store.trees = {}
        by_table: dict[int, list[Page]] = {s.table_id: [] for s in catalog}
        for p in store.pages.values():
            if len(p):
                by_table[p.table_id].append(p)
        for table_id, leaves in by_table.items():
            leaves.sort(key=lambda p: min(p.pk_slot))
            store.trees[table_id] = BPlusTree.bulk(leaves, store.fanout)
        store.next_page_id = max(store.pages, default=0) + 1
        store.next_tid = max(store.next_tid, log.max_tid + 1)
        for txn in inflight.values():
            store.active[txn.tid] = txn
            for key in txn.touched:
                store.locks[key] = txn.tid
        for txn in sorted(inflight.values(), key=lambda t: t.tid):
            store.txn_abort(txn)
        return store


def replay_into(store: RowStore, entries) -> dict[int, TxnHandle]:
    """Physically replay ``entries`` into ``store.pages`` and its version store.

    Returns handles (with reconstructed before-images) for transactions that
    have no commit/abort entry in the stream.
    """
    open_txns: dict[int, TxnHandle] = {}
    pages = store.pages
    catalog = store.catalog
    # (table, pk) -> page currently holding the row; a second copy can only
    # appear transiently while a split relocates it
    where: dict[tuple[int, int], int] = {}
    for e in entries:
        txn = open_txns.get(e.tid)
        if e.kind <= Kind.DELETE:
            if txn is None:
                txn = open_txns[e.tid] = TxnHandle(e.tid)
            old, new = apply_entry(pages, catalog, e)
            pk = (old or new)[0]
            key = (e.table_id, pk)
            if e.kind == Kind.INSERT:
                if key in where:
                    where[key] = e.page_id  # relocation
                    continue
                where[key] = e.page_id
                txn.undo.append((Kind.INSERT, e.table_id, pk, None))
            elif e.kind == Kind.DELETE:
                if where.get(key) != e.page_id:
                    continue  # relocation: the row lives on elsewhere
                del where[key]
                txn.undo.append((Kind.DELETE, e.table_id, pk, old))
            else:
                cols = [i for i in range(len(old)) if old[i] != new[i]]
                if cols:
                    txn.undo.append((Kind.UPDATE, e.table_id, pk, [(c, old[c]) for c in cols]))
            txn.touched[key] = None
        elif e.kind == Kind.COMMIT:
            if txn is not None:
                for key in txn.touched:
                    pid = where.get(key)
                    store.versions.record(key[0], key[1], e.lsn, None if pid is None else pages[pid].get(key[1]))
                del open_txns[e.tid]
            store.versions.latest = e.lsn
            store.stats.committed_txns += 1
        else:
            open_txns.pop(e.tid, None)
    return open_txns
