"""Deterministic synthetic workloads.

A generator keeps its own model of which keys are live, so the operation
stream depends only on (spec, seed) and every generated update or delete
targets a row that exists when the transaction runs single-threaded.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field

from .errors import LockConflict
from .rowstore import RowStore
from .schema import Catalog

KINDS = ("insert_only", "write_only_zipf", "mixed")


@dataclass
class WorkloadSpec:
    kind: str = "mixed"
    tables: int = 100
    zipf_theta: float = 0.99
    ops_per_second: float = 1000.0
    seconds: float = 10.0
    seed: int = 42
    preload_rows: int = 1000  # per table, write_only_zipf only
    max_txn_size: int = 8
    abort_rate: float = 0.05
    delete_rate: float = 0.2
    update_rate: float = 0.3
    key_order: str = "sequential"  # or "random"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}; expected one of {KINDS}")
        if self.tables < 1:
            raise ValueError("tables must be >= 1")


@dataclass
class Txn:
    ops: list = field(default_factory=list)  # ("i", table, row) | ("u", table, pk, changes) | ("d", table, pk)
    abort: bool = False

    @property
    def dml_count(self) -> int:
        return len(self.ops)


class ZipfSampler:
    """Zipf(theta) ranks over [0, n), inverse-CDF on a precomputed table."""

    def __init__(self, n: int, theta: float):
        acc = 0.0
        self.cdf = []
        for i in range(1, n + 1):
            acc += 1.0 / i ** theta
            self.cdf.append(acc)
        self.total = acc

    def sample(self, rng: random.Random) -> int:
        return min(bisect.bisect_left(self.cdf, rng.random() * self.total), len(self.cdf) - 1)


class _LiveKeys:
    """Set with O(1) random choice."""

    def __init__(self):
        self.keys: list[int] = []
        self.pos: dict[int, int] = {}

    def __len__(self):
        return len(self.keys)

    def __contains__(self, k):
        return k in self.pos

    def add(self, k: int) -> None:
        self.pos[k] = len(self.keys)
        self.keys.append(k)

    def remove(self, k: int) -> None:
        i = self.pos.pop(k)
        last = self.keys.pop()
        if last != k:
            self.keys[i] = last
            self.pos[last] = i

    def choice(self, rng: random.Random) -> int:
        return self.keys[rng.randrange(len(self.keys))]


def random_row(rng: random.Random, pk: int, ncols: int = 7) -> tuple:
    # c1: uniform 0..999, c2: 16 groups, c3: wide uniform, c4: pk-correlated,
    # c5: signed, c6: short label
    vals = [pk, rng.randrange(1000), rng.randrange(16), rng.randrange(1_000_000),
            pk * 10 + rng.randrange(10), rng.randrange(-2**40, 2**40), f"s{rng.randrange(5000):05d}"]
    return tuple(vals[:ncols])


def random_changes(rng: random.Random, ncols: int = 7) -> list:
    row = random_row(rng, 0, ncols)
    cols = sorted(rng.sample(range(1, ncols), rng.randint(1, min(3, ncols - 1))))
    return [(c, row[c]) for c in cols]


class WorkloadGenerator:
    def __init__(self, spec: WorkloadSpec, catalog: Catalog | None = None):
        self.spec = spec
        self.catalog = catalog or Catalog.synthetic(spec.tables)
        self.table_ids = [s.table_id for s in self.catalog]
        self.rng = random.Random(spec.seed)
        self.live = {t: _LiveKeys() for t in self.table_ids}
        self.next_pk = {t: 1 for t in self.table_ids}
        self.zipf = None
        self.ncols = {t: self.catalog[t].ncols for t in self.table_ids}
        self.inserted = 0

    def _new_pk(self, t: int) -> int:
        if self.spec.key_order == "random":
            while True:
                pk = self.rng.randrange(1, 2**40)
                if pk not in self.live[t]:
                    return pk
        pk = self.next_pk[t]
        self.next_pk[t] = pk + 1
        return pk

    def preload(self, rows_per_table: int | None = None, txn_size: int = 256):
        """Bulk-insert transactions that give every table an initial population."""
        n = self.spec.preload_rows if rows_per_table is None else rows_per_table
        for t in self.table_ids:
            done = 0
            while done < n:
                txn = Txn()
                for _ in range(min(txn_size, n - done)):
                    pk = self._new_pk(t)
                    txn.ops.append(("i", t, random_row(self.rng, pk, self.ncols[t])))
                    self.live[t].add(pk)
                    done += 1
                yield txn

    def next_txn(self) -> Txn:
        spec, rng = self.spec, self.rng
        if spec.kind == "insert_only":
            t = rng.choice(self.table_ids)
            pk = self._new_pk(t)
            self.live[t].add(pk)
            return Txn([("i", t, random_row(rng, pk, self.ncols[t]))])
        if spec.kind == "write_only_zipf":
            if self.zipf is None:
                self.zipf = ZipfSampler(max(1, spec.preload_rows), spec.zipf_theta)
            txn = Txn()
            for _ in range(rng.randint(1, spec.max_txn_size)):
                t = rng.choice(self.table_ids)
                keys = self.live[t].keys
                if not keys:
                    continue
                pk = keys[self.zipf.sample(rng) % len(keys)]
                txn.ops.append(("u", t, pk, random_changes(rng, self.ncols[t])))
            return txn
        return self._mixed_txn()

    def _mixed_txn(self) -> Txn:
        spec, rng = self.spec, self.rng
        txn = Txn(abort=rng.random() < spec.abort_rate)
        undo = []
        for _ in range(rng.randint(1, spec.max_txn_size)):
            t = rng.choice(self.table_ids)
            live = self.live[t]
            r = rng.random()
            if live and r < spec.delete_rate:
                pk = live.choice(rng)
                live.remove(pk)
                undo.append((t, pk, True))
                txn.ops.append(("d", t, pk))
            elif live and r < spec.delete_rate + spec.update_rate:
                pk = live.choice(rng)
                txn.ops.append(("u", t, pk, random_changes(rng, self.ncols[t])))
            else:
                pk = self._new_pk(t)
                live.add(pk)
                undo.append((t, pk, False))
                txn.ops.append(("i", t, random_row(rng, pk, self.ncols[t])))
        if txn.abort:
            for t, pk, was_delete in reversed(undo):
                if was_delete:
                    self.live[t].add(pk)
                else:
                    self.live[t].remove(pk)
        return txn

    def txns(self, n_dmls: int):
        """Transactions until at least ``n_dmls`` statements were generated."""
        done = 0
        while done < n_dmls:
            txn = self.next_txn()
            done += txn.dml_count
            yield txn


def run_txn(store: RowStore, txn: Txn) -> int | None:
    """Execute ``txn``; returns its commit seq, or None if it aborted."""
    h = store.begin_txn()
    try:
        for op in txn.ops:
            if op[0] == "i":
                store.txn_insert(h, op[1], op[2])
            elif op[0] == "u":
                store.txn_update(h, op[1], op[2], op[3])
            else:
                store.txn_delete(h, op[1], op[2])
    except LockConflict:
        store.txn_abort(h)
        return None
    if txn.abort:
        store.txn_abort(h)
        return None
    return store.txn_commit(h)
