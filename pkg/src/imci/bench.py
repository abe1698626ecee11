"""Operator-facing measurements: throughput, visibility delay, scale-out and
the oracle verification suite. Every derived metric in a report is computed
from raw samples that are included in the same report."""

from __future__ import annotations

import csv
import io
import json
import random
import sys
import tempfile
import threading
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import compression
from .checkpoint import Checkpointer, load_checkpoint
from .cluster import Cluster
from .config import Config
from .errors import ClusterDown, ImciError
from .query import QueryEngine, parse_query
from .replication import ReplayConfig, RoNode, source_for
from .rowstore import RowStore
from .schema import Catalog
from .workload import Txn, WorkloadGenerator, WorkloadSpec, random_row, run_txn

PERCENTILES = (50, 90, 99, 99.9)


def load_report_schema() -> dict:
    return json.loads(resources.files("imci").joinpath("schemas/bench_report.schema.json").read_text())


def percentile_table(samples_ms) -> dict:
    """{p50, p90, p99, p99.9, max, mean, count} in milliseconds; empty when there are no samples."""
    if len(samples_ms) == 0:
        return {"count": 0}
    a = np.asarray(samples_ms, dtype=np.float64)
    out = {f"p{p:g}": float(np.percentile(a, p)) for p in PERCENTILES}
    out.update(max=float(a.max()), mean=float(a.mean()), count=int(len(a)))
    return out


class _Pacer:
    def __init__(self, rate: float):
        self.rate = rate
        self.t0 = time.perf_counter()
        self.done = 0

    def wait(self, ops: int) -> None:
        self.done += ops
        if self.rate <= 0:
            return
        due = self.t0 + self.done / self.rate
        d = due - time.perf_counter()
        if d > 0:
            time.sleep(d)


class _LagSampler(threading.Thread):
    def __init__(self, cluster: Cluster, interval: float = 0.01):
        super().__init__(daemon=True, name="lag-sampler")
        self.cluster = cluster
        self.interval = interval
        self.samples: list = []
        self.stop_ev = threading.Event()
        self.t0 = time.perf_counter()

    def run(self) -> None:
        while not self.stop_ev.wait(self.interval):
            w = self.cluster.rw.log.written_lsn
            applied = [n.applied_lsn for n in self.cluster.ros.values()]
            self.samples.append([round(time.perf_counter() - self.t0, 4), w, min(applied) if applied else w])


# -- run_bench ------------------------------------------------------------------

def run_bench(spec: WorkloadSpec, config: Config | None = None, data_dir=None, clients: int = 1) -> dict:
    config = config or Config()
    catalog = Catalog.synthetic(spec.tables, page_capacity=config["page.capacity"])
    gen = WorkloadGenerator(spec, catalog)
    with Cluster(catalog, config, data_dir, n_ro=1) as cl:
        if spec.kind == "write_only_zipf":
            for txn in gen.preload():
                cl.execute(txn)
            cl.wait_caught_up()
        sampler = _LagSampler(cl)
        sampler.start()
        pacer = _Pacer(spec.ops_per_second)
        lock = threading.Lock()
        counts = {"committed": 0, "aborted": 0, "dmls": 0}
        deadline = time.perf_counter() + spec.seconds

        def client():
            while time.perf_counter() < deadline:
                with lock:
                    txn = gen.next_txn()
                    pacer_wait = txn.dml_count
                cs = cl.execute(txn)
                with lock:
                    if cs is None:
                        counts["aborted"] += 1
                    else:
                        counts["committed"] += 1
                        counts["dmls"] += txn.dml_count
                    pacer.done += pacer_wait
                    due = pacer.t0 + pacer.done / pacer.rate if pacer.rate > 0 else 0
                d = due - time.perf_counter()
                if d > 0:
                    time.sleep(d)
                cl.check()

        t0 = time.perf_counter()
        threads = [threading.Thread(target=client, daemon=True) for _ in range(max(1, clients))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t0
        if not cl.wait_caught_up(60.0):
            cl.check()
            raise ClusterDown("replica did not catch up within 60 s")
        sampler.stop_ev.set()
        sampler.join()
        node = next(iter(cl.ros.values()))
        st = node.stats
        lags = [w - a for _, w, a in sampler.samples]
        report = {
            "kind": "bench",
            "workload": asdict(spec),
            "config": dict(config),
            "clients": clients,
            "elapsed_s": elapsed,
            "committed_txns": counts["committed"],
            "aborted_txns": counts["aborted"],
            "committed_dmls": counts["dmls"],
            "tp_throughput_dml_per_s": counts["dmls"] / elapsed if elapsed > 0 else 0.0,
            "replay": {
                "entries": st.entries,
                "dmls": st.dmls,
                "batches": st.batches,
                "structural_filtered": st.structural,
                "phase1_s": st.phase1_seconds,
                "serial_s": st.serial_seconds,
                "phase2_s": st.phase2_seconds,
                "phase1_entries_per_s": st.entries / st.phase1_seconds if st.phase1_seconds else 0.0,
                "phase2_dmls_per_s": st.dmls / st.phase2_seconds if st.phase2_seconds else 0.0,
            },
            "lag_samples": sampler.samples,
            "lag": {"max_lsn_lag": max(lags, default=0), "mean_lsn_lag": float(np.mean(lags)) if lags else 0.0},
            "final": {"written_lsn": cl.rw.log.written_lsn, "applied_lsn": node.applied_lsn},
        }
    return report


def lag_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["t_s", "written_lsn", "applied_lsn", "lag_lsn"])
    for t, wr, ap in report["lag_samples"]:
        w.writerow([t, wr, ap, wr - ap])
    return buf.getvalue()


# -- visibility delay ---------------------------------------------------------------

def measure_vd(rate: float = 1000.0, seconds: float = 10.0, poll_ms: float = 1.0, seed: int = 42,
               tables: int = 10, config: Config | None = None, replay_pause: float = 0.0) -> dict:
    """Commit sentinel inserts at ``rate``/s and record when each becomes
    visible in the replica's column index; returns raw samples and percentiles."""
    config = Config(dict(config or {}))
    config.set("poll.interval_ms", poll_ms)
    catalog = Catalog.synthetic(tables, page_capacity=config["page.capacity"])
    rng = random.Random(seed)
    pending: list = []  # (table_id, pk, commit_time)
    samples: list = []
    lock = threading.Lock()
    done = threading.Event()
    old_switch = sys.getswitchinterval()
    # one CPU: short GIL slices keep the probe and replay threads responsive
    sys.setswitchinterval(min(old_switch, 0.0005))
    try:
        with Cluster(catalog, config, n_ro=1) as cl:
            node = next(iter(cl.ros.values()))
            if replay_pause > 0:
                node.delay = lambda: replay_pause

            def probe():
                poll = poll_ms / 1000.0
                while True:
                    with lock:
                        items = list(pending)
                    snap = node.applied_lsn
                    seen = []
                    for item in items:
                        t, pk, tc = item
                        ci = node.indexes[t]
                        rid = ci.locator.get(pk)
                        if rid is not None and ci.visible(rid, snap):
                            seen.append(item)
                    now = time.perf_counter()
                    if seen:
                        with lock:
                            for item in seen:
                                pending.remove(item)
                                samples.append((now - item[2]) * 1000.0)
                    if done.is_set() and not items:
                        return
                    time.sleep(poll)

            th = threading.Thread(target=probe, daemon=True, name="vd-probe")
            th.start()
            pacer = _Pacer(rate)
            next_pk = {t: 1 for t in range(1, tables + 1)}
            end = time.perf_counter() + seconds
            while time.perf_counter() < end:
                t = rng.randint(1, tables)
                pk = next_pk[t]
                next_pk[t] += 1
                cs = run_txn(cl.rw, Txn([("i", t, random_row(rng, pk))]))
                tc = time.perf_counter()
                if cs is not None:
                    with lock:
                        pending.append((t, pk, tc))
                pacer.wait(1)
            done.set()
            th.join(timeout=30)
            cl.check()
    finally:
        sys.setswitchinterval(old_switch)
    table = percentile_table(samples)
    report = {"kind": "vd", "rate": rate, "seconds": seconds, "poll_ms": poll_ms, "seed": seed,
              "percentiles_ms": table, "samples_ms": samples}
    if not samples:
        report["warning"] = "no visibility samples were collected"
    return report


# -- scale-out ------------------------------------------------------------------------

def scale_out_demo(n_nodes: int = 2, rate: float = 1000.0, preload_rows: int = 20000, warmup: float = 1.0,
                   tables: int = 10, seed: int = 42, data_dir=None, compare_rebuild: bool = True,
                   config: Config | None = None) -> dict:
    """Add replicas under steady insert load. Each checkpoint-bootstrapped node
    starts from a fresh checkpoint; optionally each is paired with a node
    rebuilt from the row store under the same load. Returns per-node timelines
    (seconds relative to the node's recover start)."""
    timeline = []
    if n_nodes <= 0:
        return {"kind": "scale_out", "nodes": timeline}
    config = Config(dict(config or {}))
    config.set("log.sync", "none")
    tmp = None
    if data_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="imci-scale-")
        data_dir = tmp.name
    catalog = Catalog.synthetic(tables, page_capacity=config["page.capacity"])
    gen = WorkloadGenerator(WorkloadSpec(kind="insert_only", tables=tables, seed=seed), catalog)
    try:
        with Cluster(catalog, config, data_dir, n_ro=1) as cl:
            for txn in gen.preload(preload_rows // tables):
                cl.execute(txn)
            cl.wait_caught_up(120)
            stop = threading.Event()

            def load():
                pacer = _Pacer(rate)
                while not stop.is_set():
                    cl.execute(gen.next_txn())
                    pacer.wait(1)

            th = threading.Thread(target=load, daemon=True, name="scale-load")
            th.start()
            time.sleep(warmup)
            kinds = ["checkpoint", "rebuild"] if compare_rebuild else ["checkpoint"]
            for i in range(n_nodes):
                for kind in kinds:
                    if kind == "checkpoint":
                        cl.take_checkpoint()
                    timeline.append(_add_and_time(cl, f"{kind}{i + 1}", kind))
                    cl.remove_ro(f"{kind}{i + 1}")
            stop.set()
            th.join()
    finally:
        if tmp is not None:
            tmp.cleanup()
    return {"kind": "scale_out", "rate": rate, "preload_rows": preload_rows, "nodes": timeline}


def _add_and_time(cl: Cluster, node_id: str, bootstrap: str, timeout: float = 120.0) -> dict:
    t0 = time.perf_counter()
    node = cl.add_ro(node_id, bootstrap)
    t_loaded = time.perf_counter()
    serving = caught = None
    deadline = t0 + timeout
    while time.perf_counter() < deadline:
        if node.error is not None:
            raise ClusterDown(f"{node_id} failed: {node.error!r}")
        now = time.perf_counter()
        if serving is None and node.applied_lsn > 0:
            serving = now
        if node.applied_lsn >= cl.rw.log.written_lsn and node.applied_lsn > 0:
            caught = now
            break
        time.sleep(0.0005)
    return {"node": node_id, "bootstrap": bootstrap, "start_lsn": node.start_lsn,
            "load_s": t_loaded - t0,
            "serving_s": None if serving is None else serving - t0,
            "caught_up_s": None if caught is None else caught - t0}


# -- verify ---------------------------------------------------------------------------

SCALES = {"0": 0, "none": 0, "small": 20_000, "medium": 100_000, "large": 1_000_000}


class SkippingSource:
    """Fault injection: hides one log entry from the replica."""

    def __init__(self, inner, skip_lsn: int):
        self.inner = inner
        self.skip_lsn = skip_lsn

    def written_lsn(self):
        return self.inner.written_lsn()

    def wait_beyond(self, lsn, timeout):
        return self.inner.wait_beyond(lsn, timeout)

    def fetch(self, start, upto, limit):
        return [e for e in self.inner.fetch(start, upto, limit) if e.lsn != self.skip_lsn]


def _replay(store: RowStore, catalog, rc: ReplayConfig, fault_lsn: int | None = None) -> RoNode:
    src = source_for(store.log)
    if fault_lsn is not None:
        src = SkippingSource(src, fault_lsn)
    node = RoNode(catalog, src, rc)
    try:
        node.catch_up()
    finally:
        node.stop()
    return node


def _diff(a: dict, b: dict) -> str:
    for t in sorted(set(a) | set(b)):
        ra, rb = a.get(t, []), b.get(t, [])
        if ra != rb:
            sa, sb = set(ra), set(rb)
            return (f"table {t}: {len(ra)} vs {len(rb)} rows; "
                    f"missing {sorted(sb - sa)[:3]} extra {sorted(sa - sb)[:3]}")
    return ""


def verify(seed: int = 42, scale: str = "small", fault: str | None = None) -> dict:
    """Oracle suite; ``report["passed"]`` is False if any check fails."""
    n = SCALES.get(str(scale))
    if n is None:
        raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
    checks = []
    report = {"kind": "verify", "seed": seed, "scale": scale, "fault": fault, "checks": checks}
    if n == 0:
        report["warning"] = "scale 0: nothing to verify"
        report["passed"] = True
        return report

    def check(name, fn):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except ImciError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        except (KeyError, AssertionError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append({"name": name, "passed": bool(ok), "detail": detail, "seconds": time.perf_counter() - t0})

    tables = 10
    catalog = Catalog.synthetic(tables)
    store = RowStore(catalog)
    gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=tables, seed=seed), catalog)
    for txn in gen.txns(n):
        run_txn(store, txn)
    oracle = store.committed_state(store.latest_commit_seq)
    G = 4096

    def equivalence():
        fault_lsn = None
        if fault == "skip-entry":
            rng = random.Random(seed)
            dml = [e.lsn for e in store.log.entries if e.kind <= 3]
            fault_lsn = rng.choice(dml)
        node = _replay(store, catalog, ReplayConfig(4, 4, group_size=G), fault_lsn)
        got = node.visible_state(node.applied_lsn)
        d = _diff(got, oracle)
        return not d, d or f"{sum(map(len, got.values()))} rows equal across {tables} tables"

    def determinism():
        states = []
        for w1, w2, jit in ((1, 1, None), (8, 2, 1), (2, 8, 2)):
            node = RoNode(catalog, source_for(store.log), ReplayConfig(w1, w2, group_size=G))
            node.jitter = None if jit is None else random.Random(seed + jit)
            node.catch_up()
            node.stop()
            states.append(node.visible_state(node.applied_lsn))
        same = all(s == states[0] for s in states[1:])
        return same, "identical across worker counts and schedules" if same else _diff(states[0], states[1])

    def pruning():
        node = _replay(store, catalog, ReplayConfig(2, 2, group_size=64))
        rng = random.Random(seed)
        on = QueryEngine(node, prune=True)
        off = QueryEngine(node, prune=False)
        for _ in range(300):
            t = rng.randint(1, tables)
            lo = rng.randrange(0, n)
            q = parse_query(f"scan t{t} where c0 between {lo} {lo + rng.randrange(1, 500)} agg sum(c3)", catalog)
            a, b = on.execute(q, "column").value, off.execute(q, "column").value
            if a != b:
                return False, f"pruning changed {q.to_text()}: {a} != {b}"
        return True, "300 range queries identical with pruning on and off"

    def roundtrip():
        rng = np.random.default_rng(seed)
        v = rng.integers(-2**63, 2**63 - 1, size=100_000, dtype=np.int64, endpoint=True)
        v[:10] = [-2**63, 2**63 - 1, 0, -1, 1, -2**63, 2**63 - 1, 7, 7, 7]
        if not np.array_equal(compression.decode_ints(compression.encode_ints(v)), v):
            return False, "integer round trip failed"
        s = [f"w{x}" for x in rng.integers(0, 1000, size=10_000)]
        if compression.decode_strings(compression.encode_strings(s)).tolist() != s:
            return False, "string round trip failed"
        return True, "100000 ints and 10000 strings decode exactly"

    def recovery():
        with tempfile.TemporaryDirectory(prefix="imci-verify-") as d:
            rng = random.Random(seed)
            cut = rng.randrange(1, store.log.last_lsn)
            rc = ReplayConfig(2, 2, group_size=G)
            leader = RoNode(catalog, source_for(store.log), rc, "leader")
            ck = Checkpointer(leader, d, min_interval=1e9)
            leader.catch_up(cut)
            ck.take_checkpoint()
            ck.close()
            leader.catch_up()
            node = RoNode(catalog, source_for(store.log), rc, "recovered", load_checkpoint(d, catalog, rc))
            node.catch_up()
            dd = _diff(node.visible_state(node.applied_lsn), leader.visible_state(leader.applied_lsn))
            return not dd, dd or f"checkpoint at lsn {cut} recovered and caught up exactly"

    check("end_to_end_equivalence", equivalence)
    if fault is None:
        check("replay_determinism", determinism)
        check("pruning_soundness", pruning)
        check("compression_roundtrip", roundtrip)
        check("recovery_equivalence", recovery)
    report["passed"] = all(c["passed"] for c in checks)
    return report


def write_report(report: dict, out_dir, stem: str) -> tuple[Path, Path | None]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp = out / f"{stem}.json"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True))
    cp = None
    if report.get("kind") == "bench":
        cp = out / f"{stem}.csv"
        cp.write_text(lag_csv(report))
    return jp, cp
