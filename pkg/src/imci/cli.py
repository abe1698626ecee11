"""``imci`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import bench
from .checkpoint import Checkpointer, RoleFile, recover_node
from .config import Config
from .errors import ImciError
from .proxy import NodeRegistry, Proxy, ProxyClient, ProxyServer
from .query import QueryEngine
from .redo import LogReader, RedoLog, read_sidecar
from .replication import DirSource
from .rowstore import RowStore
from .schema import Catalog
from .servers import LineServer, RoSession, RwSession, publish_addr, read_addr, remove_addr
from .workload import WorkloadSpec

log = logging.getLogger("imci")


# -- helpers ----------------------------------------------------------------------

def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise SystemExit(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(args, **flags) -> Config:
    """File (``--config`` or ``<data-dir>/imci.conf``), then ``--set``, then command flags."""
    path = args.config
    if path is None and getattr(args, "data_dir", None):
        path = Path(args.data_dir) / "imci.conf"
    over = _overrides(args.set)
    over.update({k: v for k, v in flags.items() if v is not None})
    try:
        return Config.load(path, over) if path else Config(over)
    except (KeyError, ValueError) as exc:
        raise SystemExit(f"config error: {exc}") from None


def _catalog(data_dir) -> Catalog:
    p = Path(data_dir) / "catalog.json"
    if not p.exists():
        raise SystemExit(f"{data_dir} is not initialized (run: imci init --data-dir {data_dir})")
    return Catalog.load(p)


def _wait_for_signal() -> None:
    ev = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: ev.set())
    while not ev.wait(0.5):
        pass


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _require_dir(args) -> Path:
    if not args.data_dir:
        raise SystemExit(f"imci {args.cmd}: --data-dir is required")
    return Path(args.data_dir)


# -- commands -----------------------------------------------------------------------

def cmd_init(args) -> int:
    d = _require_dir(args)
    if (d / "catalog.json").exists() and not args.force:
        raise SystemExit(f"{d} is already initialized (use --force to overwrite the catalog)")
    cfg = load_config(args, tables=args.tables)
    for sub in ("log", "ckpt", "run"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    Catalog.synthetic(cfg["tables"], page_capacity=cfg["page.capacity"]).save(d / "catalog.json")
    (d / "imci.conf").write_text(cfg.dump())
    print(f"initialized {d} with {cfg['tables']} tables")
    return 0


def cmd_rw(args) -> int:
    d = _require_dir(args)
    catalog = _catalog(d)
    cfg = load_config(args)
    rlog = RedoLog(d / "log", cfg["log.segment_bytes"], cfg["log.sync"])
    store = RowStore.recover(catalog, rlog) if rlog.last_lsn else RowStore(catalog, rlog)
    srv = LineServer(cfg["proxy.host"], args.port, lambda: RwSession(store)).start()
    publish_addr(d, "rw", cfg["proxy.host"], srv.port)
    print(f"rw listening on {cfg['proxy.host']}:{srv.port}, log at lsn {rlog.last_lsn}", flush=True)
    try:
        _wait_for_signal()
    finally:
        remove_addr(d, "rw")
        srv.stop()
        rlog.close()
    return 0


class _Reporter:
    """Forwards applied-LSN reports from the replay thread to the proxy."""

    def __init__(self, data_dir, node_id: str):
        self.data_dir = data_dir
        self.node_id = node_id
        self.client = None
        self.lock = threading.Lock()
        self.warned = False

    def _connect(self) -> bool:
        addr = read_addr(self.data_dir, "proxy")
        if addr is None:
            return False
        try:
            self.client = ProxyClient(*addr, timeout=2.0)
            self.client.call(f"REGISTER {self.node_id} ro")
        except OSError:
            self.client = None
            return False
        return True

    def __call__(self, node_id: str, applied: int) -> None:
        with self.lock:
            if self.client is None and not self._connect():
                return
            try:
                self.client.call(f"REPORT {node_id} {applied}")
            except OSError as exc:
                if not self.warned:
                    log.warning("lost proxy connection: %s", exc)
                    self.warned = True
                self.client = None


def cmd_ro(args) -> int:
    d = _require_dir(args)
    catalog = _catalog(d)
    cfg = load_config(args)
    rc = cfg.replay_config()
    source = DirSource(d / "log", None, cfg["poll.interval_ms"] / 1000.0)
    node, how = recover_node(d, catalog, source, rc, args.node_id)
    print(f"{args.node_id}: bootstrap={how} start_lsn={node.start_lsn}", flush=True)
    role = RoleFile(d)
    ckpt = None
    if args.role == "leader":
        st = role.read()
        st.update(epoch=st.get("epoch", 0) + 1, leader=args.node_id)
        role.write(st)
        ckpt = Checkpointer(node, d, lambda: role.is_leader(args.node_id),
                            cfg["checkpoint.min_interval_ms"] / 1000.0, cfg["checkpoint.replay_image"])
    node.listeners.append(_Reporter(d, args.node_id))
    node.start()
    engine = QueryEngine(node, cfg["router.threshold"], cfg["query.batch_size"])
    srv = LineServer(cfg["proxy.host"], args.port, lambda: RoSession(engine, ckpt)).start()
    publish_addr(d, args.node_id, cfg["proxy.host"], srv.port)
    stop = threading.Event()

    def heartbeat():
        while not stop.wait(1.0):
            role.heartbeat(args.node_id)

    threading.Thread(target=heartbeat, daemon=True).start()
    print(f"{args.node_id} listening on {cfg['proxy.host']}:{srv.port} role={args.role}", flush=True)
    try:
        _wait_for_signal()
    finally:
        remove_addr(d, args.node_id)
        stop.set()
        srv.stop()
        node.stop()
        if ckpt is not None:
            ckpt.close()
    return 0


def cmd_proxy(args) -> int:
    d = _require_dir(args)
    cfg = load_config(args)
    reader = LogReader(d / "log")
    registry = NodeRegistry(written_source=reader.written_lsn)
    registry.register("rw", "rw")
    srv = ProxyServer(Proxy(registry, cfg["strong.timeout_ms"]), cfg["proxy.host"],
                      args.port if args.port is not None else cfg["proxy.port"]).start()
    publish_addr(d, "proxy", cfg["proxy.host"], srv.port)
    print(f"proxy listening on {cfg['proxy.host']}:{srv.port}", flush=True)
    try:
        _wait_for_signal()
    finally:
        remove_addr(d, "proxy")
        srv.stop()
    return 0


def _offline_node(d: Path, cfg: Config, node_id: str = "offline"):
    catalog = _catalog(d)
    node, how = recover_node(d, catalog, DirSource(d / "log"), cfg.replay_config(), node_id)
    node.catch_up(read_sidecar(d / "log"))
    return node, how


def cmd_checkpoint(args) -> int:
    d = _require_dir(args)
    cfg = load_config(args)
    leader = RoleFile(d).read().get("leader")
    addr = read_addr(d, leader) if leader else None
    if addr is not None:
        try:
            c = ProxyClient(*addr, timeout=120.0)
            reply = c.call("CHECKPOINT")
            c.close()
        except OSError:
            reply = None
        if reply is not None:
            if not reply.startswith("OK"):
                print(reply, file=sys.stderr)
                return 1
            print(f"checkpoint csn={reply.split()[1]} by {leader}")
            return 0
    node, how = _offline_node(d, cfg)
    ck = Checkpointer(node, d, min_interval=1e9, replay_image=cfg["checkpoint.replay_image"])
    try:
        m = ck.take_checkpoint()
    finally:
        ck.close()
    print(f"checkpoint csn={m.csn} offline (bootstrap={how})")
    return 0


def _query_via_proxy(d: Path, text: str, consistency: str):
    """Route through a running proxy; None when no proxy answers."""
    paddr = read_addr(d, "proxy")
    if paddr is None:
        return None
    try:
        pc = ProxyClient(*paddr)
    except OSError:
        return None
    try:
        reply = pc.call(f"ROUTE {consistency} {text}")
        if not reply.startswith("NODE "):
            raise SystemExit(f"proxy: {reply}")
        node_id = reply.split()[1]
        try:
            naddr = read_addr(d, node_id)
            if naddr is None:
                raise SystemExit(f"no address published for {node_id}")
            nc = ProxyClient(*naddr, timeout=120.0)
            out = nc.call(f"QUERY {text}")
            nc.close()
        finally:
            pc.call(f"DONE {node_id}")
    finally:
        pc.close()
    if not out.startswith("OK "):
        raise SystemExit(f"{node_id}: {out}")
    res = json.loads(out[3:])
    res["node"] = node_id
    return res


def cmd_query(args) -> int:
    d = _require_dir(args)
    cfg = load_config(args)
    res = _query_via_proxy(d, args.text, args.consistency)
    if res is None:
        node, how = _offline_node(d, cfg)
        try:
            r = QueryEngine(node, cfg["router.threshold"], cfg["query.batch_size"]).execute(args.text)
        finally:
            node.stop()
        res = {"value": r.value, "engine": r.engine, "snapshot": r.snapshot, "node": f"offline/{how}"}
    _print_json(res)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args, tables=args.tables)
    spec = WorkloadSpec(kind=args.workload, tables=cfg["tables"], zipf_theta=cfg["zipf.theta"],
                        ops_per_second=args.rate, seconds=args.seconds, seed=args.seed)
    report = bench.run_bench(spec, cfg, args.data_dir, clients=args.clients)
    jp, cp = bench.write_report(report, args.out, f"bench_{args.workload}_{args.seed}")
    print(f"committed {report['committed_txns']} txns / {report['committed_dmls']} dmls "
          f"in {report['elapsed_s']:.2f} s ({report['tp_throughput_dml_per_s']:.0f} dml/s)")
    r = report["replay"]
    print(f"replay: {r['entries']} entries in {r['batches']} batches, "
          f"phase1 {r['phase1_entries_per_s']:.0f} entries/s, phase2 {r['phase2_dmls_per_s']:.0f} dml/s, "
          f"max lag {report['lag']['max_lsn_lag']} lsn")
    print(f"wrote {jp} and {cp}")
    return 0


def cmd_vd(args) -> int:
    cfg = load_config(args)
    report = bench.measure_vd(args.rate, args.seconds, args.poll_ms, args.seed, config=cfg)
    jp, _ = bench.write_report(report, args.out, f"vd_{args.seed}")
    t = report["percentiles_ms"]
    if t["count"] == 0:
        print(f"warning: {report['warning']}", file=sys.stderr)
    else:
        print("percentile  delay_ms")
        for k in ("p50", "p90", "p99", "p99.9", "max", "mean"):
            print(f"{k:>10}  {t[k]:8.3f}")
        print(f"{t['count']} samples")
    print(f"wrote {jp}")
    return 0


def cmd_scale_out(args) -> int:
    cfg = load_config(args)
    report = bench.scale_out_demo(args.nodes, args.rate, args.preload, config=cfg,
                                  compare_rebuild=not args.no_rebuild)
    jp, _ = bench.write_report(report, args.out, "scale_out")
    for n in report["nodes"]:
        print(f"{n['node']:>12} {n['bootstrap']:>10} start_lsn={n['start_lsn']:<8} "
              f"serving={n['serving_s']:.3f}s caught_up={n['caught_up_s']:.3f}s")
    print(f"wrote {jp}")
    return 0


def cmd_verify(args) -> int:
    report = bench.verify(args.seed, args.scale, args.fault)
    if "warning" in report:
        print(f"warning: {report['warning']}", file=sys.stderr)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} ({c['seconds']:.2f} s): {c['detail']}")
    if args.out:
        bench.write_report(report, args.out, f"verify_{args.seed}")
    return 0 if report["passed"] else 1


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", help="cluster data directory")
    common.add_argument("--config", help="key = value config file (default: <data-dir>/imci.conf)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="imci", description="In-memory column index replicas over a row store")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("init", parents=[common], help="create a data directory")
    s.add_argument("--tables", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("rw", parents=[common], help="run the read-write node")
    s.add_argument("--port", type=int, default=0)
    s.set_defaults(fn=cmd_rw)

    s = sub.add_parser("ro", parents=[common], help="run a read-only replica")
    s.add_argument("--node-id", default="ro1")
    s.add_argument("--role", choices=("leader", "follower"), default="follower")
    s.add_argument("--port", type=int, default=0)
    s.set_defaults(fn=cmd_ro)

    s = sub.add_parser("proxy", parents=[common], help="run the routing proxy")
    s.add_argument("--port", type=int)
    s.set_defaults(fn=cmd_proxy)

    s = sub.add_parser("bench", parents=[common], help="throughput and replication lag")
    s.add_argument("--workload", choices=("insert_only", "write_only_zipf", "mixed"), default="insert_only")
    s.add_argument("--rate", type=float, default=1000.0, help="target DMLs per second (0 = unthrottled)")
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--tables", type=int)
    s.add_argument("--clients", type=int, default=1)
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("vd", parents=[common], help="visibility delay percentiles")
    s.add_argument("--poll-ms", type=float, default=1.0)
    s.add_argument("--rate", type=float, default=1000.0)
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_vd)

    s = sub.add_parser("scale-out", parents=[common], help="add replicas under load")
    s.add_argument("--nodes", type=int, default=2)
    s.add_argument("--rate", type=float, default=1000.0)
    s.add_argument("--preload", type=int, default=20000)
    s.add_argument("--no-rebuild", action="store_true", help="skip the rebuild comparison nodes")
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_scale_out)

    s = sub.add_parser("checkpoint", parents=[common], help="take a checkpoint now")
    s.set_defaults(fn=cmd_checkpoint)

    s = sub.add_parser("query", parents=[common], help="run one query")
    s.add_argument("text")
    s.add_argument("--consistency", choices=("eventual", "strong"), default="eventual")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--scale", default="small")
    s.add_argument("--fault", choices=("skip-entry",))
    s.add_argument("--out")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ImciError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
