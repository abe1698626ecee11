"""Compiled vs numpy kernels.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5] [--json out.json]

Times each kernel on both backends with identical inputs, checks the outputs
agree, then times one end-to-end replay and column scan per backend in a
subprocess (``IMCI_PURE_PYTHON=1`` selects the fallback at import).
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from imci import _kernels_py as py

try:
    from imci import _kernels as cy
except ImportError:
    cy = None

END_TO_END = r"""
import json, time
from imci import kernels
from imci.query import QuerySpec, column_scan
from imci.redo import MemoryLog
from imci.replication import ReplayConfig, RoNode, source_for
from imci.rowstore import RowStore
from imci.schema import Catalog
from imci.workload import WorkloadGenerator, WorkloadSpec, run_txn
cat = Catalog.synthetic(8)
st = RowStore(cat, MemoryLog())
for txn in WorkloadGenerator(WorkloadSpec(kind="mixed", tables=8, seed=1), cat).txns(%d):
    run_txn(st, txn)
t0 = time.perf_counter()
node = RoNode(cat, source_for(st.log), ReplayConfig(4, 4, group_size=4096))
node.catch_up(); node.stop()
replay = time.perf_counter() - t0
q = QuerySpec("t1", agg="sum", agg_col=3)
t0 = time.perf_counter()
for _ in range(20):
    column_scan(node.indexes[1], q, node.applied_lsn)
print(json.dumps({"backend": kernels.BACKEND, "replay_s": replay, "scan20_s": time.perf_counter() - t0}))
"""


def timed(fn, repeat):
    ts = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts), out


def same(a, b):
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def kernel_cases(n, rng):
    vals = rng.integers(-2**63, 2**63 - 1, size=n, dtype=np.int64)
    small = rng.integers(0, 1 << 13, size=n, dtype=np.uint64)
    ins = rng.integers(1, 1000, size=n, dtype=np.uint64)
    dele = ins + rng.integers(0, 1000, size=n, dtype=np.uint64)
    scalars = [int(x) for x in vals[:20_000]]
    return {
        "fnv1a64 x20000": lambda m: [m.fnv1a64(x) for x in scalars],
        "fnv1a64_array": lambda m: m.fnv1a64_array(vals),
        "bitpack w=13": lambda m: m.bitpack(small, 13),
        "bitunpack w=13": lambda m: m.bitunpack(py.bitpack(small, 13), 13, n),
        "visible_mask": lambda m: m.visible_mask(ins, dele, 600, n),
    }


def end_to_end(pure, dmls):
    env = dict(os.environ)
    if pure:
        env["IMCI_PURE_PYTHON"] = "1"
    else:
        env.pop("IMCI_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", END_TO_END % dmls], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dmls", type=int, default=50_000)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels are not built; run: pip install -e . --no-build-isolation", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<18}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, fn in kernel_cases(args.n, rng).items():
        tc, oc = timed(lambda: fn(cy), args.repeat)
        tp, op = timed(lambda: fn(py), args.repeat)
        if not same(oc, op):
            raise SystemExit(f"{name}: backends disagree")
        rows.append({"kernel": name, "cython_s": tc, "python_s": tp})
        print(f"{name:<18}{tc * 1e3:>12.2f}{tp * 1e3:>12.2f}{tp / tc:>9.1f}x")
    e2e = [end_to_end(False, args.dmls), end_to_end(True, args.dmls)]
    print(f"\nend to end, {args.dmls} mixed DMLs")
    for r in e2e:
        print(f"  {r['backend']:<8} replay {r['replay_s']:.2f} s, 20 column scans {r['scan20_s'] * 1e3:.1f} ms")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"n": args.n, "kernels": rows, "end_to_end": e2e}, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
