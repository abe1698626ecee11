"""In-process cluster: one RW row store, any number of RO replicas and a
proxy, all in one Python process and wired through the same interfaces the
multi-process mode uses."""

from __future__ import annotations

from pathlib import Path

from .checkpoint import Checkpointer, RoleFile, designate_leader, load_checkpoint, rebuild_from_row_store
from .config import Config
from .errors import ClusterDown, QueryError
from .proxy import NodeRegistry, Proxy
from .query import QueryEngine, QueryResult, parse_query, row_execute
from .redo import MemoryLog, RedoLog
from .replication import RoNode, source_for
from .rowstore import RowStore
from .schema import Catalog
from .workload import Txn, run_txn


class Cluster:
    RW_ID = "rw"

    def __init__(self, catalog: Catalog, config: Config | None = None, data_dir=None, n_ro: int = 1,
                 start: bool = True):
        self.catalog = catalog
        self.config = config or Config()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            log_dir = self.data_dir / "log"
            existing = log_dir.exists() and any(log_dir.glob("*.redo"))
            log = RedoLog(log_dir, self.config["log.segment_bytes"], self.config["log.sync"])
            self.rw = RowStore.recover(catalog, log) if existing else RowStore(catalog, log)
            self.role = RoleFile(self.data_dir)
        else:
            self.rw = RowStore(catalog, MemoryLog())
            self.role = None
        self.registry = NodeRegistry(written_source=lambda: self.rw.log.written_lsn)
        self.registry.register(self.RW_ID, "rw")
        self.proxy = Proxy(self.registry, self.config["strong.timeout_ms"])
        self.ros: dict[str, RoNode] = {}
        self.engines: dict[str, QueryEngine] = {}
        self.checkpointer: Checkpointer | None = None
        self.leader: str | None = None
        self._start = start
        for _ in range(n_ro):
            self.add_ro()

    # -- nodes ----------------------------------------------------------------

    def _source(self):
        return source_for(self.rw.log, self.config["poll.interval_ms"] / 1000.0)

    def add_ro(self, node_id: str | None = None, bootstrap: str = "empty", start: bool | None = None) -> RoNode:
        """bootstrap: "empty" (replay everything), "checkpoint" or "rebuild"."""
        node_id = node_id or f"ro{len(self.ros) + 1}"
        rc = self.config.replay_config()
        if bootstrap == "checkpoint":
            if self.data_dir is None:
                raise ValueError("checkpoint bootstrap needs a data dir")
            state = load_checkpoint(self.data_dir, self.catalog, rc)
        elif bootstrap == "rebuild":
            snap = self.rw.latest_commit_seq
            state = rebuild_from_row_store(self.catalog, self.rw.committed_state(snap), snap, rc)
        elif bootstrap == "empty":
            state = None
        else:
            raise ValueError(f"unknown bootstrap {bootstrap!r}")
        node = RoNode(self.catalog, self._source(), rc, node_id, state)
        node.listeners.append(self.registry.report)
        self.registry.register(node_id, "ro")
        self.ros[node_id] = node
        self.engines[node_id] = QueryEngine(node, self.config["router.threshold"], self.config["query.batch_size"])
        if self.data_dir is not None and self.checkpointer is None:
            self._designate()
        if self._start if start is None else start:
            node.start()
        return node

    def _designate(self) -> None:
        res = designate_leader(list(self.ros), self.role)
        self.leader = res["leader"]
        node = self.ros[self.leader]
        if self.checkpointer is None or self.checkpointer.node is not node:
            if self.checkpointer is not None:
                self.checkpointer.close()
            ms = self.config["checkpoint.min_interval_ms"] / 1000.0
            self.checkpointer = Checkpointer(node, self.data_dir, lambda n=node.node_id: self.leader == n, ms,
                                             self.config["checkpoint.replay_image"])

    def remove_ro(self, node_id: str) -> None:
        node = self.ros.pop(node_id)
        self.engines.pop(node_id, None)
        self.registry.unregister(node_id)
        node.stop()
        if node_id == self.leader and self.ros:
            self._designate()

    def check(self) -> None:
        for n in self.ros.values():
            if n.error is not None:
                raise ClusterDown(f"{n.node_id} replay failed: {n.error!r}")

    # -- traffic --------------------------------------------------------------

    def execute(self, txn: Txn) -> int | None:
        return run_txn(self.rw, txn)

    def query(self, q, consistency: str = "eventual") -> QueryResult:
        text = q if isinstance(q, str) else q.to_text()
        spec = parse_query(text, self.catalog) if isinstance(q, str) else q
        with self.proxy.session(text, consistency) as node_id:
            if node_id == self.RW_ID:
                return self._query_rw(spec)
            return self.engines[node_id].execute(spec)

    def _query_rw(self, q) -> QueryResult:
        schema = self.catalog.by_name(q.table)
        snap = self.rw.latest_commit_seq if q.snapshot is None else q.snapshot
        if snap > self.rw.latest_commit_seq:
            raise QueryError(f"snapshot {snap} is in the future")
        return QueryResult(row_execute(self.rw.versions, schema.table_id, q, snap), "rw-row", snap, 1)

    def wait_caught_up(self, timeout: float = 60.0) -> bool:
        target = self.rw.log.written_lsn
        return all(n.wait_applied(target, timeout) for n in self.ros.values())

    def take_checkpoint(self):
        if self.checkpointer is None:
            raise ValueError("checkpoints need a data dir")
        return self.checkpointer.take_checkpoint()

    def stop(self) -> None:
        errors = []
        for n in list(self.ros.values()):
            try:
                n.stop()
            except Exception as exc:  # keep stopping the rest
                errors.append(exc)
        if self.checkpointer is not None:
            self.checkpointer.close()
            self.checkpointer = None
        self.rw.log.close()
        if errors:
            raise ClusterDown(f"replica failed: {errors[0]!r}") from errors[0]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
