"""Exit criteria 1-12. Each test prints one PASS/FAIL line; the lines are
repeated in the terminal summary."""

import random
import statistics
import string
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest

from imci import bench, compression
from imci.checkpoint import Checkpointer, load_checkpoint
from imci.cluster import Cluster
from imci.colindex import ColumnIndex
from imci.config import Config
from imci.pages import page_images
from imci.query import Predicate, QueryEngine, QuerySpec, ScanStats, Term, column_scan, row_execute
from imci.redo import Kind, MemoryLog, RedoLog
from imci.replication import ReplayConfig, RoNode, source_for
from imci.rowstore import RowStore, VersionStore
from imci.schema import Catalog, TableSchema
from imci.workload import Txn, WorkloadGenerator, WorkloadSpec, run_txn

from conftest import ACCEPTANCE_LINES, _RANGES, random_query

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(n, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        status, extra = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0][:160] if str(exc) else ''}"
        raise
    else:
        status, extra = "PASS", info.get("detail", "")
    finally:
        line = f"{status} criterion {n:>2}: {title} [{time.perf_counter() - t0:.1f} s] {extra}".rstrip()
        ACCEPTANCE_LINES[n] = line
        print(line)


def mixed(seed, n_dmls, tables=10, page_capacity=64, **kw):
    cat = Catalog.synthetic(tables, page_capacity=page_capacity)
    st = RowStore(cat, MemoryLog())
    for txn in WorkloadGenerator(WorkloadSpec(kind="mixed", tables=tables, seed=seed, **kw), cat).txns(n_dmls):
        run_txn(st, txn)
    return st


def replayed(st, rc, jitter=None):
    node = RoNode(st.catalog, source_for(st.log), rc)
    node.jitter = jitter
    node.catch_up()
    node.stop()
    return node


def test_c01_end_to_end_equivalence():
    with criterion(1, "end-to-end oracle equivalence, 10 seeds x 1e5 DMLs, W1=W2=4") as info:
        worst = 0.0
        for seed in range(10):
            t0 = time.perf_counter()
            st = mixed(1000 + seed, 10**5)
            node = replayed(st, ReplayConfig(4, 4))
            assert node.applied_lsn == st.log.written_lsn
            assert node.visible_state(node.applied_lsn) == st.committed_state(node.applied_lsn), f"seed {seed}"
            took = time.perf_counter() - t0
            assert took < 60, f"seed {seed} took {took:.1f} s"
            worst = max(worst, took)
        info["detail"] = f"slowest seed {worst:.1f} s"


def test_c02_replay_determinism():
    with criterion(2, "replay determinism over W1,W2 in {1,2,4,8} and 5 delay schedules") as info:
        st = mixed(2, 20_000, page_capacity=16)
        expect = st.committed_state()
        runs = 0
        for w1 in (1, 2, 4, 8):
            for w2 in (1, 2, 4, 8):
                assert replayed(st, ReplayConfig(w1, w2, group_size=256)).visible_state() == expect, (w1, w2)
                runs += 1
        for j in range(5):
            node = replayed(st, ReplayConfig(4, 4, group_size=256), jitter=random.Random(j))
            assert node.visible_state() == expect, f"schedule {j}"
            assert node.stats.page_order_violations == node.stats.pk_order_violations == 0
            runs += 1
        info["detail"] = f"{runs} replays identical"


def test_c03_structural_filtering():
    with criterion(3, "no phantom DMLs under >=100 leaf splits") as info:
        cat = Catalog.synthetic(2, page_capacity=64)
        st = RowStore(cat, MemoryLog())
        gen = WorkloadGenerator(WorkloadSpec(kind="insert_only", tables=2, seed=3), cat)
        n = 16_000
        for txn in gen.txns(n):
            run_txn(st, txn)
        assert st.stats.splits >= 100
        node = replayed(st, ReplayConfig(4, 4, group_size=1024))
        assert node.stats.dmls == n
        assert node.stats.structural == 2 * st.stats.relocated_rows
        assert sum(ci.next_rid for ci in node.indexes.values()) == n  # no extra inserts
        assert node.visible_state() == st.committed_state()
        info["detail"] = f"{st.stats.splits} splits, {node.stats.structural} structural entries filtered"


def test_c04_precommit_equivalence():
    with criterion(4, "pre-commit 8192 vs unbounded on a 1e5-DML transaction") as info:
        cat = Catalog.synthetic(4)
        st = RowStore(cat, MemoryLog())
        gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=4, seed=4, max_txn_size=1, abort_rate=0), cat)
        for txn in gen.txns(2000):
            run_txn(st, txn)
        big = Txn()
        for txn in gen.txns(10**5):
            big.ops.extend(txn.ops)
        big.ops = big.ops[:10**5]
        assert run_txn(st, big) is not None
        small = replayed(st, ReplayConfig(4, 4, precommit_threshold=8192))
        inf = replayed(st, ReplayConfig(4, 4, precommit_threshold=2**62))
        assert small.stats.precommit_flushes > 0 and inf.stats.precommit_flushes == 0
        assert small.visible_state() == inf.visible_state() == st.committed_state()
        for t in (s.table_id for s in cat):
            assert small.indexes[t].locator.items() == inf.indexes[t].locator.items()
        info["detail"] = f"{small.stats.precommit_flushes} pre-commit flushes"


def test_c05_compression_round_trip():
    with criterion(5, "compression round trip, 1e6 int64 and 1e5 strings") as info:
        rng = np.random.default_rng(5)
        lo, hi = np.iinfo(np.int64).min, np.iinfo(np.int64).max
        v = rng.integers(lo, hi, size=10**6, dtype=np.int64, endpoint=True)
        v[:6] = [lo, hi, lo, hi, 0, -1]
        v[1000:5000] = 42                               # all-equal run
        v[10_000:20_000] = np.arange(10_000) * 3 - 7    # narrow run
        sizes = [1, 2, 3, 63, 64, 65, 4096, 65536, len(v)]
        for n in sizes:
            assert np.array_equal(compression.decode_ints(compression.encode_ints(v[:n])), v[:n]), n
        for block in (np.full(100, lo), np.full(100, hi), np.array([lo, hi] * 50)):
            assert np.array_equal(compression.decode_ints(compression.encode_ints(block)), block)
        alphabet = string.ascii_letters + string.digits + "éü中文 \t"
        prng = random.Random(5)
        words = ["".join(prng.choice(alphabet) for _ in range(prng.randrange(0, 24))) for _ in range(10**5)]
        words[:3] = ["", "", "x" * 1000]
        assert compression.decode_strings(compression.encode_strings(words)).tolist() == words
        info["detail"] = f"{len(sizes) + 3} int blocks and {len(words)} strings exact"


def _range_query(rng, table):
    terms = []
    for col in rng.sample(range(6), rng.choice([1, 1, 2])):
        lo, hi = _RANGES[col]
        a, b = sorted(rng.randrange(lo, hi) for _ in range(2))
        op = rng.choice(["between", "between", "<", "<=", ">", ">="])
        terms.append(Term(col, op, a, b if op == "between" else None))
    agg = rng.choice([None, "count", "sum", "min", "max"])
    return QuerySpec(table, None, Predicate(tuple(terms)), agg, rng.randrange(6) if agg not in (None, "count") else None)


def test_c06_pruning_soundness_and_effect():
    with criterion(6, "pruning on/off over 1e4 range queries; 1% range skips >=90% of frozen packs") as info:
        st = mixed(6, 30_000, tables=4)
        node = replayed(st, ReplayConfig(2, 2, group_size=64))
        rng = random.Random(6)
        snap = node.applied_lsn
        skipped = 0
        for _ in range(10_000):
            t = rng.randint(1, 4)
            q = _range_query(rng, f"t{t}")
            on = ScanStats()
            a = column_scan(node.indexes[t], q, snap, prune=True, stats=on)
            assert a == column_scan(node.indexes[t], q, snap, prune=False), q.to_text()
            skipped += on.skipped_groups
        assert skipped > 0

        # clustered: ascending inserts through the replay path
        cat = Catalog.synthetic(1)
        rw = RowStore(cat, MemoryLog())
        n = 64_000
        for txn in WorkloadGenerator(WorkloadSpec(kind="insert_only", tables=1, seed=6), cat).txns(n):
            run_txn(rw, txn)
        ci = replayed(rw, ReplayConfig(2, 2, group_size=64)).indexes[1]
        worst = 1.0
        for _ in range(100):
            lo = rng.randrange(1, n - n // 100)
            q = QuerySpec("t1", predicate=Predicate((Term(0, "between", lo, lo + n // 100 - 1),)), agg="count")
            s = ScanStats()
            assert column_scan(ci, q, rw.latest_commit_seq, prune=True, stats=s) == n // 100
            assert s.frozen_groups >= n // 64 - 1
            worst = min(worst, s.skipped_groups / s.frozen_groups)
        assert worst >= 0.9
        info["detail"] = f"worst skip fraction {worst:.3f}"


def test_c07_cross_engine_equivalence():
    with criterion(7, "1e4 random QuerySpecs equal on row and column paths") as info:
        st = mixed(7, 20_000, tables=3, page_capacity=32)
        node = replayed(st, ReplayConfig(2, 2, group_size=128))
        commits = [e.lsn for e in st.log.entries if e.kind == Kind.COMMIT]
        eng = QueryEngine(node)
        rng = random.Random(7)
        for _ in range(10_000):
            snap = rng.choice(commits) if rng.random() < 0.5 else None
            q = random_query(rng, f"t{rng.randint(1, 3)}", snap)
            r, c = eng.execute(q, engine="row"), eng.execute(q, engine="column")
            assert r.snapshot == c.snapshot
            assert r.value == c.value, q.to_text()
        info["detail"] = "10000 queries identical"


def test_c08_checkpoint_recovery_and_scale_out(tmp_path):
    with criterion(8, "20 checkpoint recoveries exact; checkpoint node catches up before rebuild node") as info:
        for i in range(20):
            rng = random.Random(800 + i)
            tables = rng.randint(1, 4)
            cat = Catalog.synthetic(tables, page_capacity=rng.choice([8, 16, 64]))
            rw = RowStore(cat, MemoryLog())
            gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=tables, seed=i), cat)
            for txn in gen.txns(rng.randint(500, 4000)):
                run_txn(rw, txn)
            rc = ReplayConfig(2, 2, group_size=64, locator_flush=128,
                              precommit_threshold=rng.choice([4, 8192]))
            d = tmp_path / f"ck{i}"
            leader = RoNode(cat, source_for(rw.log), rc, "leader")
            ck = Checkpointer(leader, d, min_interval=0.0, replay_image=rng.random() < 0.5)
            leader.catch_up(rng.randint(1, rw.log.written_lsn))
            m = ck.take_checkpoint()
            ck.close()
            for txn in gen.txns(rng.randint(0, 2000)):
                run_txn(rw, txn)
            leader.catch_up()
            node = RoNode(cat, source_for(rw.log), rc, "recovered", load_checkpoint(d, cat, rc))
            assert node.visible_state(m.csn) == rw.committed_state(m.csn), i
            node.catch_up()
            assert node.applied_lsn == leader.applied_lsn
            assert node.visible_state() == leader.visible_state(), i
            node.stop()
            leader.stop()
        rep = bench.scale_out_demo(1, rate=1000, preload_rows=20_000, tables=10)
        by = {n["bootstrap"]: n for n in rep["nodes"]}
        ck_t, rb_t = by["checkpoint"]["caught_up_s"], by["rebuild"]["caught_up_s"]
        assert ck_t is not None and rb_t is not None
        assert ck_t < rb_t, f"checkpoint {ck_t:.3f} s vs rebuild {rb_t:.3f} s"
        info["detail"] = f"caught up: checkpoint {ck_t:.2f} s, rebuild {rb_t:.2f} s"


def test_c09_strong_reads_under_replay_delay():
    with criterion(9, "1e4 strong reads see their write under 0-100 ms replay delays") as info:
        cat = Catalog.synthetic(4)
        cfg = Config({"strong.timeout_ms": 10_000, "phase1.workers": 2, "phase2.workers": 2, "group.size": 4096})
        trials, threads = 10_000, 32
        seen = []
        bad = []
        with Cluster(cat, cfg, n_ro=2) as cl:
            for k, node in enumerate(cl.ros.values()):
                node.delay = lambda r=random.Random(k): r.uniform(0.0, 0.1)

            def client(c):
                for i in range(c, trials, threads):
                    t, pk = 1 + i % 4, i + 1
                    cl.execute(Txn([("i", t, (pk, i, 0, 0, 0, 0, "w"))]))
                    res = cl.query(f"lookup t{t} {pk}", consistency="strong")
                    (seen if res.value == [(pk, i, 0, 0, 0, 0, "w")] else bad).append(i)

            ts = [threading.Thread(target=client, args=(c,)) for c in range(threads)]
            for th in ts:
                th.start()
            for th in ts:
                th.join()
            cl.check()
            fallbacks = cl.proxy.fallbacks
        assert not bad, f"{len(bad)} stale reads"
        assert len(seen) == trials
        info["detail"] = f"{len(seen)} reads fresh, {fallbacks} answered by the writer"


def test_c10_visibility_delay():
    with criterion(10, "visibility delay at 1k inserts/s, 1 ms poll: p99 < 50 ms, p50 < 10 ms") as info:
        rep = bench.measure_vd(rate=1000, seconds=10, poll_ms=1.0, seed=10)
        t = rep["percentiles_ms"]
        print("percentile table (ms):", {k: round(v, 3) for k, v in t.items()})
        info["detail"] = (f"p50 {t['p50']:.2f} p90 {t['p90']:.2f} p99 {t['p99']:.2f} "
                          f"max {t['max']:.2f} ms over {t['count']} samples")
        assert t["count"] >= 9000
        assert t["p99"] < 50 and t["p50"] < 10


def test_c11_column_scan_speedup():
    with criterion(11, "column path >=3x faster than row path, sum over 1e6 x 16 columns") as info:
        n = 10**6
        data = np.random.default_rng(11).integers(-10**9, 10**9, size=(n, 16))
        data[:, 0] = np.arange(n)
        rows = [tuple(r) for r in data.tolist()]
        schema = TableSchema.build(1, ["int64"] * 16, name="wide")
        ci = ColumnIndex.build_from_rows(schema, rows, vid=1)
        versions = VersionStore()
        for r in rows:
            versions.record(1, r[0], 1, r)
        del rows
        q = QuerySpec("wide", agg="sum", agg_col=7)
        expect = int(data[:, 7].sum())

        def median_time(fn):
            ts = []
            for _ in range(5):
                t0 = time.perf_counter()
                assert fn() == expect
                ts.append(time.perf_counter() - t0)
            return statistics.median(ts)

        col = median_time(lambda: column_scan(ci, q, 1))
        row = median_time(lambda: row_execute(versions, 1, q, 1))
        info["detail"] = f"row {row * 1000:.1f} ms, column {col * 1000:.1f} ms, speedup {row / col:.1f}x"
        assert row / col >= 3


def test_c12_rw_crash_recovery(tmp_path):
    with criterion(12, "redo replay reproduces writer pages byte for byte, 10 workloads") as info:
        pages = 0
        for seed in range(10):
            rng = random.Random(1200 + seed)
            tables = rng.randint(1, 5)
            cat = Catalog.synthetic(tables, page_capacity=rng.choice([4, 16, 64]))
            d = tmp_path / f"w{seed}"
            log = RedoLog(d, segment_bytes=rng.choice([4096, 1 << 20]), sync="none")
            rw = RowStore(cat, log)
            kind = rng.choice(["mixed", "mixed", "insert_only"])
            gen = WorkloadGenerator(WorkloadSpec(kind=kind, tables=tables, seed=seed,
                                                 key_order=rng.choice(["sequential", "random"])), cat)
            for txn in gen.txns(rng.randint(1000, 6000)):
                run_txn(rw, txn)
            expect = rw.page_images()
            log.close()
            rec = RowStore.recover(cat, RedoLog(d, sync="none"))
            assert rec.page_images() == expect, f"workload {seed}"
            assert page_images(rec.pages, cat) == expect
            assert rec.committed_state() == rw.committed_state()
            rec.log.close()
            pages += len(expect)
        info["detail"] = f"{pages} pages identical"
