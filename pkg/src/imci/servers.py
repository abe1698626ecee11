"""Line-protocol servers for the multi-process mode.

RW statement server (one open transaction per connection)::

    BEGIN                              -> OK <tid>
    INSERT <table> <json row>          -> OK
    UPDATE <table> <pk> <json {col: v}> -> OK
    DELETE <table> <pk>                -> OK
    COMMIT                             -> OK <commit lsn>
    ABORT | ROLLBACK                   -> OK
    QUERY <query text>                 -> OK <json result>
    WRITTEN                            -> OK <written lsn>

Statements outside BEGIN/COMMIT autocommit; a failing statement inside one
aborts the whole transaction. RO query server::

    QUERY <query text>                 -> OK <json result>
    APPLIED                            -> OK <applied lsn>
    CHECKPOINT                         -> OK <csn>        (checkpoint leader only)

Errors come back as ``ERR <ErrorName> <message>``. Every server writes its
address to ``<data-dir>/run/<name>.addr`` while it is up.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from pathlib import Path

from .errors import ImciError, NotLeader, QueryError
from .query import QueryEngine, QueryResult, parse_query, row_execute
from .rowstore import RowStore
from .schema import Catalog

log = logging.getLogger(__name__)


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def result_json(res: QueryResult) -> str:
    return json.dumps({"value": res.value, "engine": res.engine, "snapshot": res.snapshot},
                      default=_json_default)


def addr_path(data_dir, name: str) -> Path:
    return Path(data_dir) / "run" / f"{name}.addr"


def publish_addr(data_dir, name: str, host: str, port: int) -> Path:
    p = addr_path(data_dir, name)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".tmp")
    tmp.write_text(f"{host}:{port}\n")
    tmp.replace(p)
    return p


def remove_addr(data_dir, name: str) -> None:
    addr_path(data_dir, name).unlink(missing_ok=True)


def read_addr(data_dir, name: str) -> tuple[str, int] | None:
    try:
        host, port = addr_path(data_dir, name).read_text().strip().rsplit(":", 1)
    except (FileNotFoundError, ValueError):
        return None
    return host, int(port)


class LineServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str, port: int, handler_factory):
        self.handler_factory = handler_factory
        super().__init__((host, port), _LineHandler)
        self._thread = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "LineServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="line-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        session = self.server.handler_factory()
        try:
            for raw in self.rfile:
                line = raw.decode("utf-8", "replace").strip()
                if not line:
                    continue
                try:
                    reply = session.handle(line)
                except ImciError as exc:
                    reply = f"ERR {type(exc).__name__} {exc}"
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    reply = f"ERR BadRequest {exc}"
                self.wfile.write((reply + "\n").encode())
                self.wfile.flush()
        finally:
            session.close()


def _table_id(catalog: Catalog, tok: str) -> int:
    if tok.isdigit():
        t = int(tok)
        if t not in catalog:
            raise QueryError(f"unknown table {tok}")
        return t
    try:
        return catalog.by_name(tok).table_id
    except KeyError:
        raise QueryError(f"unknown table {tok!r}") from None


class RwSession:
    def __init__(self, store: RowStore):
        self.store = store
        self.txn = None

    def _run(self, fn):
        auto = self.txn is None
        h = self.store.begin_txn() if auto else self.txn
        try:
            fn(h)
        except BaseException:
            self.store.txn_abort(h)
            if not auto:
                self.txn = None
            raise
        if auto:
            self.store.txn_commit(h)
        return "OK"

    def handle(self, line: str) -> str:
        store, catalog = self.store, self.store.catalog
        verb, _, rest = line.partition(" ")
        verb = verb.upper()
        if verb == "BEGIN":
            if self.txn is not None:
                raise ValueError("transaction already open")
            self.txn = store.begin_txn()
            return f"OK {self.txn.tid}"
        if verb == "INSERT":
            t, row = rest.split(None, 1)
            tid = _table_id(catalog, t)
            return self._run(lambda h: store.txn_insert(h, tid, tuple(json.loads(row))))
        if verb == "UPDATE":
            t, pk, changes = rest.split(None, 2)
            tid = _table_id(catalog, t)
            schema = catalog[tid]
            ch = [(schema.column_index(k) if not k.isdigit() else int(k), v)
                  for k, v in json.loads(changes).items()]
            return self._run(lambda h: store.txn_update(h, tid, int(pk), ch))
        if verb == "DELETE":
            t, pk = rest.split()
            tid = _table_id(catalog, t)
            return self._run(lambda h: store.txn_delete(h, tid, int(pk)))
        if verb == "COMMIT":
            if self.txn is None:
                raise ValueError("no open transaction")
            h, self.txn = self.txn, None
            return f"OK {store.txn_commit(h)}"
        if verb in ("ABORT", "ROLLBACK"):
            if self.txn is None:
                raise ValueError("no open transaction")
            h, self.txn = self.txn, None
            store.txn_abort(h)
            return "OK"
        if verb == "QUERY":
            q = parse_query(rest, catalog)
            snap = store.latest_commit_seq if q.snapshot is None else q.snapshot
            schema = catalog.by_name(q.table)
            res = QueryResult(row_execute(store.versions, schema.table_id, q, snap), "rw-row", snap, 1)
            return "OK " + result_json(res)
        if verb == "WRITTEN":
            return f"OK {store.log.written_lsn}"
        raise ValueError(f"unknown command {verb!r}")

    def close(self) -> None:
        if self.txn is not None:
            self.store.txn_abort(self.txn)
            self.txn = None


class RoSession:
    def __init__(self, engine: QueryEngine, checkpointer=None):
        self.engine = engine
        self.checkpointer = checkpointer

    def handle(self, line: str) -> str:
        verb, _, rest = line.partition(" ")
        verb = verb.upper()
        if verb == "QUERY":
            return "OK " + result_json(self.engine.execute(rest))
        if verb == "APPLIED":
            return f"OK {self.engine.node.applied_lsn}"
        if verb == "CHECKPOINT":
            if self.checkpointer is None:
                raise NotLeader(f"{self.engine.node.node_id} does not checkpoint")
            return f"OK {self.checkpointer.take_checkpoint().csn}"
        raise ValueError(f"unknown command {verb!r}")

    def close(self) -> None:
        pass
