import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imci.kernels import hash64
from imci.redo import Kind, MemoryLog, RedoEntry
from imci.replication import DmlStatement, ReplayConfig, RoNode, source_for
from imci.rowstore import RowStore
from imci.schema import Catalog

from conftest import make_row, mixed_store, replay


def node_for(st_, w1=2, w2=2, **kw):
    kw.setdefault("group_size", 64)
    return RoNode(st_.catalog, source_for(st_.log), ReplayConfig(w1, w2, **kw))


def test_units_are_parsed_before_commit_and_abort_has_no_effect():
    cat = Catalog.synthetic(2, page_capacity=512)  # no splits
    store = RowStore(cat, MemoryLog())
    store.next_tid = 100
    t100, t101 = store.begin_txn(), store.begin_txn()
    assert (t100.tid, t101.tid) == (100, 101)
    pk = 0
    while store.log.last_lsn < 296:
        pk += 1
        store.txn_insert(t100, 1, make_row(pk))
    store.txn_insert(t101, 2, make_row(1))
    store.txn_update(t100, 1, 1, [(1, 5)])
    assert store.log.last_lsn == 298
    node = node_for(store)
    node.catch_up()
    # everything up to 298 is parsed and buffered; nothing is visible
    assert len(node.units[100].dmls) == 296 + 2
    assert node.visible_state() == {1: [], 2: []}
    assert store.txn_commit(t100) == 299
    node.catch_up()
    assert node.applied_lsn == 299
    assert 100 not in node.units
    store.txn_insert(t101, 2, make_row(2))
    store.txn_abort(t101)
    node.catch_up()
    assert node.visible_state() == {t: rows for t, rows in store.committed_state().items()}
    assert node.visible_state()[2] == []
    assert 101 not in node.units
    assert node.indexes[2].next_rid == 0  # the aborted unit never reached the index
    node.stop()


def test_empty_commit_advances_applied():
    store = RowStore(Catalog.synthetic(1), MemoryLog())
    store.txn_commit(store.begin_txn())
    node = replay(store)
    assert node.applied_lsn == 1 == node.stats.committed_units


def test_dispatch_is_fnv_mod_w():
    store = RowStore(Catalog.synthetic(1), MemoryLog())
    node = node_for(store, w1=4)
    e = RedoEntry(1, 1, Kind.INSERT, 12345, 0, 1, b"")
    assert node.phase1_dispatch(e) == hash64(12345) % 4
    assert node_for(store, w1=1).phase1_dispatch(e) == 0


def test_update_becomes_delete_plus_insert():
    store = RowStore(Catalog.synthetic(1), MemoryLog())
    t = store.begin_txn()
    store.txn_insert(t, 1, make_row(5))
    store.txn_commit(t)
    t = store.begin_txn()
    store.txn_update(t, 1, 5, [(2, 42)])
    node = node_for(store)
    node.catch_up()
    (unit,) = node.units.values()
    assert [(d.kind, d.pk, d.lsn) for d in unit.dmls] == [(Kind.DELETE, 5, 3), (Kind.INSERT, 5, 3)]
    assert unit.dmls[1].row == (5, 0, 42, 3, 4, 5, "x")
    node.stop()


def test_split_relocations_are_filtered():
    cat = Catalog.synthetic(1, page_capacity=4)
    store = RowStore(cat, MemoryLog())
    t = store.begin_txn()
    for pk in range(40):
        store.txn_insert(t, 1, make_row(pk))
    store.txn_commit(t)
    assert store.stats.splits > 5
    node = replay(store)
    assert node.stats.dmls == 40
    assert node.stats.structural == 2 * store.stats.relocated_rows
    assert node.visible_state() == store.committed_state()
    assert node.indexes[1].next_rid == 40


def test_resort_orders_by_lsn():
    recs = [(5, 1, Kind.INSERT, 1, None, None), (3, 1, Kind.INSERT, 1, None, None)]
    assert [r[0] for r in RoNode.resort(recs)] == [3, 5]


def test_interleaved_txns_keep_own_statements():
    store = RowStore(Catalog.synthetic(1), MemoryLog())
    a, b = store.begin_txn(), store.begin_txn()
    for pk in range(6):
        store.txn_insert(a if pk % 2 else b, 1, make_row(pk))
    node = node_for(store)
    node.catch_up()
    assert {d.pk for d in node.units[a.tid].dmls} == {1, 3, 5}
    assert {d.pk for d in node.units[b.tid].dmls} == {0, 2, 4}
    for u in node.units.values():
        lsns = [d.lsn for d in u.dmls]
        assert lsns == sorted(lsns)
    node.stop()


def test_two_txn_example_routes_same_pk_to_one_worker():
    cat = Catalog.synthetic(1)
    store = RowStore(cat, MemoryLog())
    t1 = store.begin_txn()
    store.txn_insert(t1, 1, make_row(1, s="A"))
    store.txn_insert(t1, 1, make_row(2, s="D"))
    store.txn_commit(t1)
    t2 = store.begin_txn()
    store.txn_update(t2, 1, 2, [(6, "B")])
    store.txn_insert(t2, 1, make_row(3, s="C"))
    store.txn_commit(t2)
    results = []
    for w2 in (1, 2, 8):
        node = replay(store, w1=2, w2=w2)
        results.append(node.visible_state())
        assert node.stats.pk_order_violations == 0
    assert results[0] == results[1] == results[2]
    assert results[0][1] == [make_row(1, s="A"), make_row(2, s="B"), make_row(3, s="C")]


def _big_txn_store(n=10, abort=False, with_deletes=False):
    cat = Catalog.synthetic(2)
    store = RowStore(cat, MemoryLog())
    t = store.begin_txn()
    store.txn_insert(t, 1, make_row(1000))
    store.txn_commit(t)
    t = store.begin_txn()
    for pk in range(n):
        store.txn_insert(t, 1 + pk % 2, make_row(pk))
    if with_deletes:
        store.txn_delete(t, 1, 0)       # pre-committed in this txn
        store.txn_delete(t, 1, 1000)    # from the global locator
        store.txn_update(t, 2, 1, [(1, 9)])
    if abort:
        store.txn_abort(t)
    else:
        store.txn_commit(t)
    return store


def test_precommit_threshold_four_flushes_and_matches_unbounded():
    store = _big_txn_store(10, with_deletes=True)
    small = replay(store, precommit_threshold=4, batch_limit=3)
    big = replay(store, precommit_threshold=10**9)
    assert small.stats.precommit_flushes >= 2
    assert big.stats.precommit_flushes == 0
    assert small.visible_state() == big.visible_state() == store.committed_state()
    assert small.indexes[1].locator.items().keys() == big.indexes[1].locator.items().keys()


def test_precommitted_rows_invisible_before_commit():
    cat = Catalog.synthetic(1)
    store = RowStore(cat, MemoryLog())
    t = store.begin_txn()
    for pk in range(10):
        store.txn_insert(t, 1, make_row(pk))
    node = node_for(store, precommit_threshold=4)
    node.catch_up()
    assert node.stats.precommit_flushes >= 2
    ci = node.indexes[1]
    assert ci.next_rid >= 8
    assert ci.visible_rows(10**9) == []
    assert ci.locator.items() == {}
    cs = store.txn_commit(t)
    node.catch_up()
    assert len(ci.visible_rows(cs)) == 10
    assert ci.visible_rows(cs - 1) == []
    node.stop()


def test_abort_after_precommit_stays_invisible():
    store = _big_txn_store(10, abort=True)
    node = replay(store, precommit_threshold=4, batch_limit=3)
    assert node.stats.precommit_flushes >= 2
    assert node.visible_state(10**9) == store.committed_state()
    assert node.indexes[1].locator.items().keys() == {1000}


@settings(max_examples=8)
@given(st.integers(0, 2**31))
def test_worker_counts_agree(seed):
    store = mixed_store(seed, 1500, tables=3, page_capacity=16)
    expect = store.committed_state()
    for w in (1, 2, 4, 8):
        node = replay(store, w, w, group_size=64)
        assert node.visible_state() == expect
        assert node.stats.page_order_violations == node.stats.pk_order_violations == 0


def test_snapshot_reads_match_writer_history():
    store = mixed_store(11, 2000, tables=2, page_capacity=16)
    node = replay(store, group_size=64)
    commits = [e.lsn for e in store.log.entries if e.kind == Kind.COMMIT]
    for s in random.Random(0).sample(commits, 25):
        assert node.visible_state(s) == store.committed_state(s)


def test_applied_never_exceeds_written():
    cat = Catalog.synthetic(2)
    store = RowStore(cat, MemoryLog())
    node = node_for(store).start()
    seen = []
    node.listeners.append(lambda nid, a: seen.append((a, store.log.written_lsn)))
    rng = random.Random(5)
    for i in range(300):
        t = store.begin_txn()
        store.txn_insert(t, 1 + i % 2, make_row(i, a=rng.randrange(9)))
        store.txn_commit(t)
    assert node.wait_applied(store.log.written_lsn, 10)
    node.stop()
    assert seen and all(a <= w for a, w in seen)
    applied = [a for a, _ in seen]
    assert applied == sorted(applied)


def test_dml_statement_repr():
    d = DmlStatement(Kind.INSERT, 1, 5, make_row(5), 9, 2)
    assert "pk=5" in repr(d)
