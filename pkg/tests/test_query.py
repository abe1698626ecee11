import random
import threading

import pytest

from imci.colindex import ColumnIndex
from imci.errors import QueryError, SnapshotAhead
from imci.query import (Predicate, QueryEngine, QuerySpec, ScanStats, Term, column_scan, estimate_row_cost,
                        parse_query, route_intra, row_execute)
from imci.replication import ReplayConfig, RoNode, source_for
from imci.schema import Catalog, TableSchema
from imci.workload import WorkloadGenerator, WorkloadSpec, run_txn

from conftest import mixed_store, random_query, replay


@pytest.fixture(scope="module")
def node():
    store = mixed_store(21, 6000, tables=2, page_capacity=32)
    n = replay(store, group_size=64)
    n.store = store
    return n


@pytest.fixture(scope="module")
def big():
    schema = TableSchema.build(1, ["int64", "int64"], name="big")
    n = 10**6
    rows = list(zip(range(n), range(n)))
    return ColumnIndex.build_from_rows(schema, rows, vid=1)


def q(text, cat=None):
    return parse_query(text, cat or Catalog.synthetic(2))


def test_cost_pk_lookup_is_one(big):
    spec = QuerySpec("big", predicate=Predicate((Term(0, "=", 42),)))
    assert estimate_row_cost(big, spec) == 1


def test_cost_without_predicate_is_row_count(big):
    assert estimate_row_cost(big, QuerySpec("big")) == 10**6


def test_cost_of_ten_percent_range(big):
    spec = QuerySpec("big", predicate=Predicate((Term(1, "between", 300_000, 399_999),)))
    exact = 100_000  # sequential values: selectivity is known exactly
    cost = estimate_row_cost(big, spec)
    # one histogram bucket per pack is the resolution limit
    assert abs(cost - exact) <= 10**6 / 16 / 8


def test_routing_threshold():
    assert route_intra(1, 1000) == "row"
    assert route_intra(10**6, 1000) == "column"
    assert route_intra(1000, 1000) == "row"


def test_parse_canonical_text():
    spec = q("scan t1 where c3 between 10 20 agg sum(c4) group c2 snapshot latest")
    assert spec.predicate.terms == (Term(3, "between", 10, 20),)
    assert (spec.agg, spec.agg_col, spec.group_by, spec.snapshot) == ("sum", 4, 2, None)
    assert q(spec.to_text()) == spec
    assert q("lookup t1 7 snapshot 3") == QuerySpec("t1", predicate=Predicate((Term(0, "=", 7),)), snapshot=3)


@pytest.mark.parametrize("bad", [
    "select * from t1", "scan nope", "scan t1 where c1 ~ 3", "scan t1 where c1 between 5 1",
    "scan t1 agg sum(c6)", "scan t1 group c2", "scan t1 where c1", "scan t1 agg avg(c1)",
])
def test_parse_rejects(bad):
    with pytest.raises(QueryError):
        q(bad)


def test_count_matches_oracle(node):
    for t in (1, 2):
        snap = node.applied_lsn
        res = QueryEngine(node).execute(f"scan t{t} agg count", engine="column")
        assert res.value == len(node.store.committed_state(snap)[t])


def test_pruning_skips_and_agrees():
    schema = Catalog.synthetic(1)[1]
    rows = [(pk, pk % 7, 0, 0, pk, 0, "x") for pk in range(4096)]
    ci = ColumnIndex.build_from_rows(schema, rows, vid=1, group_size=64)
    spec = QuerySpec("t1", predicate=Predicate((Term(4, "between", 10, 20),)), agg="sum", agg_col=1)
    on, off = ScanStats(), ScanStats()
    a = column_scan(ci, spec, 1, prune=True, stats=on)
    b = column_scan(ci, spec, 1, prune=False, stats=off)
    assert a == b == sum(pk % 7 for pk in range(10, 21))
    assert on.skipped_groups == 63 and off.skipped_groups == 0


def test_empty_sum_is_null(node):
    eng = QueryEngine(node)
    for engine in ("row", "column"):
        res = eng.execute("scan t1 where c1 > 5000 agg sum(c1)", engine=engine)
        assert res.value is None
        assert eng.execute("scan t1 where c1 > 5000 agg count", engine=engine).value == 0


def test_point_lookup_row_path(node):
    st = node.store
    rows = st.committed_state()[1]
    pk = rows[len(rows) // 2][0]
    res = QueryEngine(node).execute(f"lookup t1 {pk}")
    assert res.engine == "row" and res.cost == 1
    assert res.value == [st.point_lookup(1, pk)]
    col = QueryEngine(node).execute(f"lookup t1 {pk}", engine="column")
    assert col.value == res.value


def test_deleted_pk_lookup_is_empty(node):
    st = node.store
    snap = node.applied_lsn
    live = {r[0] for r in st.committed_state(snap)[1]}
    gone = next(pk for pk in range(1, 10**6) if pk not in live)
    assert QueryEngine(node).execute(f"lookup t1 {gone}").value == []


def test_random_queries_same_on_both_paths(node):
    rng = random.Random(5)
    eng = QueryEngine(node)
    for _ in range(400):
        spec = random_query(rng, f"t{rng.choice([1, 2])}")
        assert eng.execute(spec, engine="row").value == eng.execute(spec, engine="column").value, spec


def test_batch_size_independence(node):
    rng = random.Random(8)
    specs = [random_query(rng, "t1") for _ in range(60)]
    ci = node.indexes[1]
    snap = node.applied_lsn
    for spec in specs:
        results = [column_scan(ci, spec, snap, batch_size=b) for b in (1, 7, 1024)]
        assert results[0] == results[1] == results[2]


def test_snapshot_ahead_rejected(node):
    with pytest.raises(SnapshotAhead):
        QueryEngine(node).execute(f"scan t1 agg count snapshot {node.applied_lsn + 1}")


def test_snapshot_stability_during_replay():
    store = mixed_store(2, 2000, tables=1, page_capacity=32)
    node = RoNode(store.catalog, source_for(store.log), ReplayConfig(2, 2, group_size=64)).start()
    assert node.wait_applied(store.log.written_lsn, 30)
    snap = node.applied_lsn
    eng = QueryEngine(node)
    text = f"scan t1 where c1 < 500 agg sum(c3) group c2 snapshot {snap}"
    first = eng.execute(text, engine="column").value
    gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=1, seed=77), store.catalog)
    gen.live = {1: gen.live[1]}
    gen.next_pk = {1: 10**6}
    stop = threading.Event()

    def writer():
        for txn in gen.txns(10**9):
            if stop.is_set():
                return
            run_txn(store, txn)

    w = threading.Thread(target=writer)
    w.start()
    try:
        for _ in range(20):
            assert eng.execute(text, engine="column").value == first
            assert eng.execute(text, engine="row").value == first
    finally:
        stop.set()
        w.join()
    node.stop()
    assert node.applied_lsn > snap


def test_row_execute_matches_sorted_projection(node):
    spec = QuerySpec("t1", projection=(0, 2), predicate=Predicate((Term(2, "=", 3),)))
    got = row_execute(node.versions, 1, spec, node.applied_lsn)
    expect = sorted((r[0], r[2]) for r in node.store.committed_state()[1] if r[2] == 3)
    assert got == expect


def test_exact_sum_has_no_overflow():
    schema = TableSchema.build(1, ["int64", "int64"], name="w")
    big_v = 2**62
    ci = ColumnIndex.build_from_rows(schema, [(i, big_v) for i in range(8)], vid=1, group_size=4)
    spec = QuerySpec("w", agg="sum", agg_col=1)
    assert column_scan(ci, spec, 1) == 8 * big_v
