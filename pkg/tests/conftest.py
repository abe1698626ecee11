import os

import pytest
from hypothesis import HealthCheck, settings

from imci.redo import MemoryLog
from imci.replication import ReplayConfig, RoNode, source_for
from imci.rowstore import RowStore
from imci.schema import Catalog
from imci.workload import WorkloadGenerator, WorkloadSpec, run_txn

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def catalog():
    return Catalog.synthetic(3)


@pytest.fixture
def store(catalog):
    return RowStore(catalog, MemoryLog())


def make_row(pk, a=0, s="x"):
    return (pk, a, 2, 3, 4, 5, s)


def mixed_store(seed, n_dmls, tables=4, page_capacity=64, **spec):
    catalog = Catalog.synthetic(tables, page_capacity=page_capacity)
    st = RowStore(catalog, MemoryLog())
    gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=tables, seed=seed, **spec), catalog)
    for txn in gen.txns(n_dmls):
        run_txn(st, txn)
    return st


def replay(st, w1=2, w2=2, **kw):
    kw.setdefault("group_size", 256)
    node = RoNode(st.catalog, source_for(st.log), ReplayConfig(w1, w2, **kw))
    node.catch_up()
    node.stop()
    return node


_RANGES = {0: (0, 3000), 1: (0, 1000), 2: (0, 16), 3: (0, 1_000_000), 4: (0, 30000), 5: (-2**40, 2**40)}


def random_query(rng, table: str, snapshot=None):
    """A random QuerySpec over the synthetic schema (columns c0..c6)."""
    from imci.query import Predicate, QuerySpec, Term

    terms = []
    for col in rng.sample(range(7), rng.choice([0, 0, 1, 1, 2])):
        if col == 6:
            a, b = sorted(f"s{rng.randrange(5000):05d}" for _ in range(2))
            op = rng.choice(["=", "<", ">=", "between"])
        else:
            lo, hi = _RANGES[col]
            a, b = sorted(rng.randrange(lo, hi) for _ in range(2))
            op = rng.choice(["=", "<", "<=", ">", ">=", "between", "between"])
        terms.append(Term(col, op, a, b if op == "between" else None))
    agg = rng.choice([None, None, "count", "sum", "min", "max"])
    agg_col = None
    if agg in ("sum", "min", "max"):
        agg_col = rng.randrange(6) if agg == "sum" else rng.randrange(7)
    group = rng.choice([None, None, 2, 6]) if agg else None
    proj = None
    if agg is None and rng.random() < 0.5:
        proj = tuple(sorted(rng.sample(range(7), rng.randint(1, 3))))
    return QuerySpec(table, proj, Predicate(tuple(terms)), agg, agg_col, group, snapshot)


# one line per exit criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
