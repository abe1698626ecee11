"""Front-door routing: writes to the RW node, reads to the least-busy RO,
strong reads only to an RO that has applied everything written at dispatch.

The multi-process mode speaks a line protocol over a local TCP socket::

    REPORT <node> <applied_lsn>      -> OK
    WRITTEN <lsn>                    -> OK
    REGISTER <node> rw|ro            -> OK
    ROUTE <eventual|strong> <stmt>   -> NODE <id>
    DONE <node>                      -> OK      (ends the session ROUTE opened)

Errors come back as ``ERR <ErrorName> <message>``.
"""

from __future__ import annotations

import contextlib
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from .errors import ImciError, NoAvailableNode, UnknownVerb

WRITE_VERBS = frozenset({"insert", "update", "delete", "begin", "commit", "abort", "rollback"})
READ_VERBS = frozenset({"scan", "lookup", "select"})
CONSISTENCY = ("eventual", "strong")


def classify(stmt: str) -> str:
    parts = stmt.split(None, 1)
    verb = parts[0].lower() if parts else ""
    if verb in WRITE_VERBS:
        return "write"
    if verb in READ_VERBS:
        return "read"
    raise UnknownVerb(f"cannot classify statement starting with {verb!r}")


@dataclass
class NodeInfo:
    node_id: str
    kind: str  # "rw" | "ro"
    active_sessions: int = 0
    applied_lsn: int = 0
    last_report: float = 0.0


class NodeRegistry:
    def __init__(self, written_source=None):
        self.nodes: dict[str, NodeInfo] = {}
        self.cond = threading.Condition()
        self._written = 0
        self.written_source = written_source  # optional callable -> written LSN

    def register(self, node_id: str, kind: str) -> None:
        if kind not in ("rw", "ro"):
            raise ValueError(f"bad node kind {kind!r}")
        with self.cond:
            if kind == "rw" and any(n.kind == "rw" and n.node_id != node_id for n in self.nodes.values()):
                raise ValueError("registry already has an RW node")
            self.nodes.setdefault(node_id, NodeInfo(node_id, kind))

    def unregister(self, node_id: str) -> None:
        with self.cond:
            self.nodes.pop(node_id, None)
            self.cond.notify_all()

    def report(self, node_id: str, applied_lsn: int) -> None:
        with self.cond:
            info = self.nodes.get(node_id)
            if info is None:
                info = self.nodes[node_id] = NodeInfo(node_id, "ro")
            if applied_lsn > info.applied_lsn:
                info.applied_lsn = applied_lsn
            info.last_report = time.monotonic()
            self.cond.notify_all()

    def report_written(self, lsn: int) -> None:
        with self.cond:
            if lsn > self._written:
                self._written = lsn

    def written_lsn(self) -> int:
        if self.written_source is not None:
            return max(self._written, self.written_source())
        return self._written

    def rw(self) -> NodeInfo | None:
        for n in self.nodes.values():
            if n.kind == "rw":
                return n
        return None

    def ros(self) -> list[NodeInfo]:
        return [n for n in self.nodes.values() if n.kind == "ro"]


class Proxy:
    def __init__(self, registry: NodeRegistry | None = None, strong_timeout_ms: float = 1000.0):
        self.registry = registry or NodeRegistry()
        self.strong_timeout = strong_timeout_ms / 1000.0
        self.fallbacks = 0

    def _least_busy(self, candidates: list[NodeInfo]) -> NodeInfo:
        return min(candidates, key=lambda n: n.active_sessions)

    def route(self, stmt: str, consistency: str = "eventual", open_session: bool = False) -> str:
        """Pick the node for ``stmt``; with ``open_session`` the node's session
        count is incremented atomically with the choice (release with ``done``)."""
        if consistency not in CONSISTENCY:
            raise ValueError(f"consistency must be one of {CONSISTENCY}")
        kind = classify(stmt)
        reg = self.registry
        with reg.cond:
            rw = reg.rw()
            if kind == "write" or (not reg.ros()):
                if rw is None:
                    raise NoAvailableNode("no RW node registered")
                return self._pick(rw, open_session)
            if consistency == "eventual":
                return self._pick(self._least_busy(reg.ros()), open_session)
            target = reg.written_lsn()  # sampled once, at dispatch
            ok = lambda: [n for n in reg.ros() if n.applied_lsn >= target]  # noqa: E731
            reg.cond.wait_for(lambda: bool(ok()), self.strong_timeout)
            ready = ok()
            if ready:
                return self._pick(self._least_busy(ready), open_session)
            if rw is None:
                raise NoAvailableNode("no RO caught up and no RW to fall back to")
            self.fallbacks += 1
            return self._pick(rw, open_session)

    def _pick(self, node: NodeInfo, open_session: bool) -> str:
        if open_session:
            node.active_sessions += 1
        return node.node_id

    def done(self, node_id: str) -> None:
        with self.registry.cond:
            info = self.registry.nodes.get(node_id)
            if info is not None and info.active_sessions > 0:
                info.active_sessions -= 1

    @contextlib.contextmanager
    def session(self, stmt: str, consistency: str = "eventual"):
        node = self.route(stmt, consistency, open_session=True)
        try:
            yield node
        finally:
            self.done(node)


# -- socket front end -------------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        proxy: Proxy = self.server.proxy
        for raw in self.rfile:
            line = raw.decode("utf-8", "replace").strip()
            if not line:
                continue
            try:
                reply = handle_line(proxy, line)
            except ImciError as exc:
                reply = f"ERR {type(exc).__name__} {exc}"
            except (ValueError, IndexError) as exc:
                reply = f"ERR BadRequest {exc}"
            self.wfile.write((reply + "\n").encode())
            self.wfile.flush()


def handle_line(proxy: Proxy, line: str) -> str:
    parts = line.split(None, 2)
    cmd = parts[0].upper()
    if cmd == "REPORT":
        _, node, lsn = line.split()
        proxy.registry.report(node, int(lsn))
        return "OK"
    if cmd == "WRITTEN":
        proxy.registry.report_written(int(parts[1]))
        return "OK"
    if cmd == "REGISTER":
        proxy.registry.register(parts[1], parts[2].strip())
        return "OK"
    if cmd == "ROUTE":
        if len(parts) < 3:
            raise ValueError("usage: ROUTE <consistency> <stmt>")
        return f"NODE {proxy.route(parts[2], parts[1].lower(), open_session=True)}"
    if cmd == "DONE":
        proxy.done(parts[1])
        return "OK"
    raise ValueError(f"unknown command {cmd!r}")


class ProxyServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, proxy: Proxy, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.proxy = proxy
        self._thread = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(target=self.serve_forever, name="proxy", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class ProxyClient:
    """Blocking client for the line protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout)
        self.rfile = self.sock.makefile("rb")

    def call(self, line: str) -> str:
        self.sock.sendall((line + "\n").encode())
        reply = self.rfile.readline().decode().strip()
        if not reply:
            raise ConnectionError("proxy closed the connection")
        return reply

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()
