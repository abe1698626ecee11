"""Queries on an RO node: a batch-at-a-time column path with zone-map
pruning, a row path over committed versions, and a cost-based router.

Text form (used by the CLI)::

    scan t1 [cols c1 c3] [where c3 between 10 20 and c1 < 5] [agg sum(c4)] [group c2] [snapshot latest|N]
    lookup t1 42 [snapshot N]

Supported ops: = < <= > >= between. Aggregates: count, sum(c), min(c), max(c).
"""

from __future__ import annotations

import shlex
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ImciError, QueryError, SnapshotAhead, SnapshotTooOld
from .kernels import visible_mask
from .schema import Catalog, TableSchema

OPS = ("=", "<", "<=", ">", ">=", "between")
AGGS = ("count", "sum", "min", "max")
DEFAULT_BATCH = 1024
DEFAULT_THRESHOLD = 1000


@dataclass(frozen=True)
class Term:
    col: int
    op: str
    value: object
    value2: object = None

    def bounds(self):
        """Inclusive (lo, hi) bounds for pruning; None = unbounded."""
        v = self.value
        if self.op == "=":
            return v, v
        if self.op == "between":
            return v, self.value2
        if self.op in ("<", "<="):
            return None, v
        return v, None

    def test(self, x) -> bool:
        op, v = self.op, self.value
        if op == "=":
            return x == v
        if op == "<":
            return x < v
        if op == "<=":
            return x <= v
        if op == ">":
            return x > v
        if op == ">=":
            return x >= v
        return v <= x <= self.value2

    def mask(self, arr: np.ndarray) -> np.ndarray:
        op, v = self.op, self.value
        if op == "=":
            return arr == v
        if op == "<":
            return arr < v
        if op == "<=":
            return arr <= v
        if op == ">":
            return arr > v
        if op == ">=":
            return arr >= v
        return (arr >= v) & (arr <= self.value2)


@dataclass(frozen=True)
class Predicate:
    terms: tuple[Term, ...] = ()

    def test(self, row) -> bool:
        for t in self.terms:
            if not t.test(row[t.col]):
                return False
        return True

    def pk_equality(self):
        for t in self.terms:
            if t.col == 0 and t.op == "=":
                return t.value
        return None


@dataclass(frozen=True)
class QuerySpec:
    table: str
    projection: tuple[int, ...] | None = None  # None = all columns
    predicate: Predicate = Predicate()
    agg: str | None = None
    agg_col: int | None = None
    group_by: int | None = None
    snapshot: int | None = None  # None = latest applied

    def to_text(self, schema: TableSchema | None = None) -> str:
        name = (lambda i: schema.columns[i].name) if schema else (lambda i: f"c{i}")
        parts = ["scan", self.table]
        if self.projection is not None:
            parts += ["cols"] + [name(c) for c in self.projection]
        if self.predicate.terms:
            conds = []
            for t in self.predicate.terms:
                vals = [t.value] if t.op != "between" else [t.value, t.value2]
                conds.append(" ".join([name(t.col), t.op] + [_quote(v) for v in vals]))
            parts += ["where", " and ".join(conds)]
        if self.agg:
            parts += ["agg", self.agg if self.agg_col is None else f"{self.agg}({name(self.agg_col)})"]
        if self.group_by is not None:
            parts += ["group", name(self.group_by)]
        parts += ["snapshot", "latest" if self.snapshot is None else str(self.snapshot)]
        return " ".join(parts)


def _quote(v) -> str:
    return str(v) if isinstance(v, int) else shlex.quote(v)


def _const(schema: TableSchema, col: int, tok: str):
    if schema.columns[col].type.numeric:
        try:
            return int(tok)
        except ValueError:
            raise QueryError(f"column {schema.columns[col].name} needs an integer, got {tok!r}") from None
    return tok


def _col(schema: TableSchema, tok: str) -> int:
    try:
        return schema.column_index(tok)
    except KeyError as exc:
        raise QueryError(str(exc)) from None


def parse_query(text: str, catalog: Catalog) -> QuerySpec:
    try:
        toks = shlex.split(text)
    except ValueError as exc:
        raise QueryError(f"bad query text: {exc}") from None
    if len(toks) < 2 or toks[0] not in ("scan", "lookup"):
        raise QueryError("query must start with 'scan <table>' or 'lookup <table> <pk>'")
    try:
        schema = catalog.by_name(toks[1])
    except KeyError:
        raise QueryError(f"unknown table {toks[1]!r}") from None
    if toks[0] == "lookup":
        if len(toks) not in (3, 5):
            raise QueryError("usage: lookup <table> <pk> [snapshot N]")
        snap = None
        if len(toks) == 5:
            if toks[3] != "snapshot":
                raise QueryError(f"unexpected {toks[3]!r}")
            snap = None if toks[4] == "latest" else int(toks[4])
        return QuerySpec(schema.name, predicate=Predicate((Term(0, "=", _const(schema, 0, toks[2])),)),
                         snapshot=snap)
    i = 2
    proj = None
    terms: list[Term] = []
    agg = agg_col = group = snap = None
    keywords = {"cols", "where", "agg", "group", "snapshot"}
    while i < len(toks):
        kw = toks[i]
        i += 1
        if kw == "cols":
            cols = []
            while i < len(toks) and toks[i] not in keywords:
                cols.append(_col(schema, toks[i]))
                i += 1
            proj = tuple(cols)
        elif kw == "where":
            while True:
                if i + 2 >= len(toks):
                    raise QueryError("incomplete where clause")
                c = _col(schema, toks[i])
                op = toks[i + 1]
                if op not in OPS:
                    raise QueryError(f"unknown operator {op!r}")
                if op == "between":
                    if i + 3 >= len(toks):
                        raise QueryError("between needs two bounds")
                    lo, hi = _const(schema, c, toks[i + 2]), _const(schema, c, toks[i + 3])
                    if lo > hi:
                        raise QueryError(f"between bounds out of order: {lo} > {hi}")
                    terms.append(Term(c, op, lo, hi))
                    i += 4
                else:
                    terms.append(Term(c, op, _const(schema, c, toks[i + 2])))
                    i += 3
                if i < len(toks) and toks[i] == "and":
                    i += 1
                    continue
                break
        elif kw == "agg":
            if i >= len(toks):
                raise QueryError("agg needs a function")
            a = toks[i]
            i += 1
            if a in ("count", "count(*)"):
                agg = "count"
            elif "(" in a and a.endswith(")"):
                agg = a[:a.index("(")]
                if agg not in AGGS:
                    raise QueryError(f"unknown aggregate {agg!r}")
                agg_col = _col(schema, a[a.index("(") + 1:-1])
                if agg == "count":
                    agg_col = None
            else:
                raise QueryError(f"bad aggregate {a!r}")
        elif kw == "group":
            if i >= len(toks):
                raise QueryError("group needs a column")
            group = _col(schema, toks[i])
            i += 1
        elif kw == "snapshot":
            if i >= len(toks):
                raise QueryError("snapshot needs 'latest' or a number")
            snap = None if toks[i] == "latest" else int(toks[i])
            i += 1
        else:
            raise QueryError(f"unexpected token {kw!r}")
    q = QuerySpec(schema.name, proj, Predicate(tuple(terms)), agg, agg_col, group, snap)
    validate(q, schema)
    return q


def validate(q: QuerySpec, schema: TableSchema) -> None:
    n = schema.ncols
    for t in q.predicate.terms:
        if not 0 <= t.col < n:
            raise QueryError(f"predicate column {t.col} out of range")
        if t.op not in OPS:
            raise QueryError(f"unknown operator {t.op!r}")
        if t.op == "between" and t.value > t.value2:
            raise QueryError("between bounds out of order")
    if q.agg is not None and q.agg not in AGGS:
        raise QueryError(f"unknown aggregate {q.agg!r}")
    if q.agg in ("sum", "min", "max") and q.agg_col is None:
        raise QueryError(f"{q.agg} needs a column")
    if q.agg == "sum" and not schema.columns[q.agg_col].type.numeric:
        raise QueryError("sum needs a numeric column")
    if q.group_by is not None and q.agg is None:
        raise QueryError("group needs an aggregate")


# -- aggregation shared by both paths ------------------------------------------

def _finish(q: QuerySpec, rows):
    """Canonical result of ``q`` from an iterable of matching full rows (row path)."""
    if q.agg is None:
        proj = q.projection
        out = [tuple(r[c] for c in proj) if proj is not None else tuple(r) for r in rows]
        out.sort()
        return out
    if q.group_by is None:
        return _agg_values(q, rows)
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[q.group_by], []).append(r)
    return sorted((k, _agg_values(q, v)) for k, v in groups.items())


def _agg_values(q: QuerySpec, rows):
    if q.agg == "count":
        return sum(1 for _ in rows)
    vals = [r[q.agg_col] for r in rows]
    if not vals:
        return None
    if q.agg == "sum":
        return sum(vals)
    return min(vals) if q.agg == "min" else max(vals)


# -- column path ----------------------------------------------------------------

@dataclass
class ScanStats:
    groups: int = 0
    frozen_groups: int = 0
    skipped_groups: int = 0
    batches: int = 0
    rows_visible: int = 0


class _Acc:
    """Exact integer/string aggregation over numpy batches."""

    def __init__(self, q: QuerySpec):
        self.q = q
        self.count = 0
        self.value = None
        self.groups: dict = {}
        self.rows: list = []

    def _merge(self, old, new):
        if old is None:
            return new
        agg = self.q.agg
        if agg in ("count", "sum"):
            return old + new
        return min(old, new) if agg == "min" else max(old, new)

    @staticmethod
    def _exact_sum(v: np.ndarray) -> int:
        # split into 32-bit halves so int64 batch sums never overflow
        hi = int(np.sum(v >> 32, dtype=np.int64))
        lo = int(np.sum(v & 0xFFFFFFFF, dtype=np.int64))
        return (hi << 32) + lo

    def _reduce(self, v: np.ndarray):
        agg = self.q.agg
        if agg == "count":
            return len(v)
        if len(v) == 0:
            return None
        if agg == "sum":
            return self._exact_sum(v)
        x = v.min() if agg == "min" else v.max()
        return x if v.dtype == object else int(x)

    def add(self, cols: dict, n: int) -> None:
        q = self.q
        if q.agg is None:
            proj = q.projection
            arrays = [cols[c] for c in proj]
            self.rows.extend(zip(*[a.tolist() for a in arrays]) if arrays else [()] * n)
            return
        v = cols[q.agg_col] if q.agg_col is not None else None
        if q.group_by is None:
            self.value = self._merge(self.value, self._reduce(v if v is not None else np.empty(n)))
            return
        keys = cols[q.group_by]
        if n == 0:
            return
        uniq, inv = np.unique(keys, return_inverse=True)
        inv = inv.reshape(-1)
        for gi, k in enumerate(uniq.tolist()):
            sel = inv == gi
            part = v[sel] if v is not None else np.empty(int(np.count_nonzero(sel)))
            self.groups[k] = self._merge(self.groups.get(k), self._reduce(part))

    def result(self):
        q = self.q
        if q.agg is None:
            self.rows.sort()
            return self.rows
        if q.group_by is None:
            return 0 if q.agg == "count" and self.value is None else self.value
        return sorted(self.groups.items())


def needed_columns(q: QuerySpec, ncols: int) -> list[int]:
    cols = set(t.col for t in q.predicate.terms)
    if q.agg is None:
        cols.update(q.projection if q.projection is not None else range(ncols))
    else:
        if q.agg_col is not None:
            cols.add(q.agg_col)
        if q.group_by is not None:
            cols.add(q.group_by)
    return sorted(cols)


def column_scan(ci, q: QuerySpec, snapshot: int, batch_size: int = DEFAULT_BATCH, prune: bool = True,
                stats: ScanStats | None = None):
    """Evaluate ``q`` over column index ``ci`` at ``snapshot``."""
    if snapshot < ci.snapshot_floor:
        raise SnapshotTooOld(f"snapshot {snapshot} is below the retained floor {ci.snapshot_floor}")
    if q.projection is None and q.agg is None:
        q = QuerySpec(q.table, tuple(range(ci.schema.ncols)), q.predicate, q.agg, q.agg_col, q.group_by, q.snapshot)
    st = stats if stats is not None else ScanStats()
    terms = q.predicate.terms
    need = needed_columns(q, ci.schema.ncols)
    acc = _Acc(q)
    B = max(1, batch_size)
    for grp in list(ci.groups):
        # take references once; compaction may retire the group meanwhile
        packs, ins, dele = grp.packs, grp.insert_vid, grp.delete_vid
        if grp.dropped or dele is None or not packs:
            continue
        st.groups += 1
        frozen = grp.frozen
        if frozen:
            st.frozen_groups += 1
            if prune and terms:
                skip = False
                for t in terms:
                    meta = packs[t.col].meta()
                    lo, hi = t.bounds()
                    if meta is None or meta.disjoint(lo, hi):
                        skip = True
                        break
                if skip:
                    st.skipped_groups += 1
                    continue
        n = ci.group_rows(grp)
        vis = visible_mask(ins, dele, snapshot, n)
        if not vis.any():
            continue
        data = {c: packs[c].decode(n)[:n] for c in need}
        for b in range(0, n, B):
            m = vis[b:b + B]
            for t in terms:
                m = m & t.mask(data[t.col][b:b + B])
            k = int(np.count_nonzero(m))
            st.batches += 1
            if not k:
                continue
            st.rows_visible += k
            acc.add({c: data[c][b:b + B][m] for c in need}, k)
    return acc.result()


# -- row path -------------------------------------------------------------------

def row_execute(versions, table_id: int, q: QuerySpec, snapshot: int):
    pk = q.predicate.pk_equality()
    if pk is not None:
        r = versions.lookup(table_id, pk, snapshot)
        rows = [] if r is None else [r]
    else:
        rows = versions.scan(table_id, snapshot)
    pred = q.predicate
    return _finish(q, (r for r in rows if pred.test(r)) if pred.terms else rows)


# -- cost and routing -------------------------------------------------------------

def estimate_row_cost(ci, q: QuerySpec) -> float:
    """Rows the row path would touch: 1 for a primary-key lookup, otherwise
    the live row count scaled by histogram selectivity."""
    if q.predicate.pk_equality() is not None:
        return 1
    total = len(ci.locator)
    if not q.predicate.terms or total == 0:
        return total
    sel = 1.0
    for t in q.predicate.terms:
        lo, hi = t.bounds()
        num = den = 0.0
        for grp in ci.groups:
            packs = grp.packs
            if grp.dropped or not packs:
                continue
            n = ci.group_rows(grp)
            meta = packs[t.col].meta(n)
            if meta is None:
                continue
            num += meta.fraction(lo, hi) * n
            den += n
        sel *= (num / den) if den else 1.0
    return total * sel


def route_intra(cost: float, threshold: float = DEFAULT_THRESHOLD) -> str:
    return "row" if cost <= threshold else "column"


@dataclass
class QueryResult:
    value: object
    engine: str
    snapshot: int
    cost: float
    rerouted: bool = False
    seconds: float = 0.0
    scan: ScanStats = field(default_factory=ScanStats)


class QueryEngine:
    def __init__(self, node, threshold: float = DEFAULT_THRESHOLD, batch_size: int = DEFAULT_BATCH,
                 prune: bool = True):
        self.node = node
        self.threshold = threshold
        self.batch_size = batch_size
        self.prune = prune
        self.reroutes = 0

    def _schema(self, q: QuerySpec) -> TableSchema:
        try:
            return self.node.catalog.by_name(q.table)
        except KeyError:
            raise QueryError(f"unknown table {q.table!r}") from None

    def execute(self, q: QuerySpec | str, engine: str | None = None) -> QueryResult:
        if isinstance(q, str):
            q = parse_query(q, self.node.catalog)
        schema = self._schema(q)
        validate(q, schema)
        node = self.node
        if q.snapshot is not None and q.snapshot > node.applied_lsn:
            raise SnapshotAhead(f"snapshot {q.snapshot} is ahead of applied LSN {node.applied_lsn}")
        snap = node.pin(q.snapshot)
        try:
            t0 = time.perf_counter()
            ci = node.indexes[schema.table_id]
            cost = estimate_row_cost(ci, q)
            chosen = engine or route_intra(cost, self.threshold)
            rerouted = False
            st = ScanStats()
            if chosen == "column":
                try:
                    value = column_scan(ci, q, snap, self.batch_size, self.prune, st)
                except ImciError:
                    # any column-side failure is retried once on the row path
                    chosen, rerouted = "row", True
                    self.reroutes += 1
            if chosen == "row":
                value = row_execute(node.versions, schema.table_id, q, snap)
            return QueryResult(value, chosen, snap, cost, rerouted, time.perf_counter() - t0, st)
        finally:
            node.unpin(snap)
