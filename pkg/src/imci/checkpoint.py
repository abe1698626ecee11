"""Column-index checkpoints on shared storage and node bootstrap from them.

Layout under ``<data-dir>/ckpt``::

    packs/t<table>_g<group>_c<col>.pack   frozen packs, written once when frozen
    <csn>/t<table>.meta                   group flags, counters
    <csn>/t<table>.vid                    VID maps and slot states
    <csn>/t<table>_g<group>.partial       unfrozen tail packs
    <csn>/t<table>.loc                    locator runs
    <csn>/pages.img, <csn>/units.json     replay image (buffer pool and open transactions)
    <csn>.manifest                        written last; its presence commits the checkpoint

Every file ends with a CRC32 of its body.
"""

from __future__ import annotations

import json
import os
import queue
import struct
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import compression
from .colindex import INVALID, PENDING, ColumnIndex, DataPack, PackMeta, PartialPack, RowGroup
from .errors import ChecksumMismatch, IoFailure, MissingPackFile, NoLiveRo, NotLeader
from .locator import LocatorSnapshot, RidLocator
from .pages import Page
from .redo import Kind
from .replication import (DmlStatement, LoadedState, ReplayConfig, ReplayImage, RoNode,
                          TransactionBufferUnit)
from .schema import Catalog

FORMAT_VERSION = 1
MANIFEST_MAGIC = b"IMCICKP1"
_CRC = struct.Struct("<I")
_PACK_HDR = struct.Struct("<IIIB")  # group_no, col, row_count, encoding tag
_U32 = struct.Struct("<I")
_VID_GROUP = struct.Struct("<IB")  # group_no, has insert map
HEARTBEAT_TIMEOUT = 3.0

_INVALID = np.uint64(INVALID)


# -- file helpers ---------------------------------------------------------------

def write_file(path: Path, body: bytes) -> None:
    """Atomic write of ``body`` followed by its CRC32."""
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(body)
            f.write(_CRC.pack(zlib.crc32(body)))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"writing {path}: {exc}") from exc


def read_file(path: Path) -> bytes:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingPackFile(f"{path} is missing") from None
    except OSError as exc:
        raise IoFailure(f"reading {path}: {exc}") from exc
    if len(data) < 4:
        raise ChecksumMismatch(f"{path} is truncated")
    body = data[:-4]
    (crc,) = _CRC.unpack_from(data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path} fails its checksum")
    return body


def _meta_json(meta: PackMeta | None) -> bytes:
    return json.dumps(None if meta is None else asdict(meta)).encode()


def encode_pack(group_no: int, col: int, pack: DataPack) -> bytes:
    meta = _meta_json(pack.meta())
    return b"".join([_PACK_HDR.pack(group_no, col, pack.n, pack.tag),
                     _U32.pack(len(pack.encoded)), pack.encoded,
                     _U32.pack(len(meta)), meta])


def decode_pack(body: bytes) -> tuple[int, int, DataPack]:
    group_no, col, n, tag = _PACK_HDR.unpack_from(body, 0)
    off = _PACK_HDR.size
    (ln,) = _U32.unpack_from(body, off)
    encoded = body[off + 4:off + 4 + ln]
    off += 4 + ln
    (ml,) = _U32.unpack_from(body, off)
    m = json.loads(body[off + 4:off + 4 + ml])
    meta = None if m is None else PackMeta(**m)
    return group_no, col, DataPack(encoded, n, tag != compression.TAG_DICT, meta)


# -- manifest -----------------------------------------------------------------

@dataclass
class CheckpointManifest:
    csn: int
    start_lsn: int
    packs: list[str] = field(default_factory=list)
    vidmaps: list[str] = field(default_factory=list)
    locators: list[str] = field(default_factory=list)
    partials: list[str] = field(default_factory=list)
    metas: list[str] = field(default_factory=list)
    replay: list[str] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    created: float = 0.0

    def to_bytes(self) -> bytes:
        return MANIFEST_MAGIC + json.dumps(asdict(self), sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, body: bytes) -> "CheckpointManifest":
        if body[:8] != MANIFEST_MAGIC:
            raise ChecksumMismatch("not a checkpoint manifest")
        d = json.loads(body[8:])
        if d.get("format_version") != FORMAT_VERSION:
            raise ChecksumMismatch(f"unsupported manifest version {d.get('format_version')}")
        return cls(**d)


class CheckpointStore:
    def __init__(self, data_dir):
        self.root = Path(data_dir) / "ckpt"
        self.packs = self.root / "packs"
        self.packs.mkdir(parents=True, exist_ok=True)

    def manifests(self) -> list[int]:
        out = []
        for p in self.root.glob("*.manifest"):
            try:
                out.append(int(p.stem))
            except ValueError:
                continue
        return sorted(out)

    def load_manifest(self, csn: int) -> CheckpointManifest:
        return CheckpointManifest.from_bytes(read_file(self.root / f"{csn}.manifest"))

    def latest(self) -> CheckpointManifest | None:
        m = self.manifests()
        return self.load_manifest(m[-1]) if m else None


# -- capture ------------------------------------------------------------------

def mask_vids(vids: np.ndarray, csn: int, clamp: set[int] = frozenset()) -> np.ndarray:
    """Copy of ``vids`` as of ``csn``: later VIDs become INVALID, except
    compaction VIDs in ``clamp``, which are pulled down to ``csn`` (the row
    moves are complete, only their stamp lies in the future)."""
    out = vids.copy()
    late = out > np.uint64(csn)
    late &= out != _INVALID
    if late.any():
        if clamp:
            c = np.isin(out, np.fromiter(clamp, dtype=np.uint64, count=len(clamp))) & late
            out[c] = csn
            late &= ~c
        out[late] = _INVALID
    return out


@dataclass
class _TableCapture:
    table_id: int
    meta: dict
    vid_groups: list  # (group_no, insert | None, delete, state)
    partials: list  # (group_no, [column arrays], n)
    locator: LocatorSnapshot
    frozen: list  # (group_no, col, DataPack)


@dataclass
class CheckpointStats:
    captures: int = 0
    persisted: int = 0
    capture_seconds: float = 0.0
    io_seconds: float = 0.0
    replay_waits: int = 0  # times the replay thread blocked on checkpoint I/O (stays 0)


class Checkpointer:
    """Leader-side checkpointing for one RoNode.

    Capture happens on the replay thread between batches and only copies
    in-memory state; one background thread writes files in FIFO order, so
    replay never waits on disk. Frozen packs are queued for writing the moment
    they are created.
    """

    def __init__(self, node: RoNode, data_dir, is_leader=lambda: True, min_interval: float = 1.0,
                 replay_image: bool = True):
        self.node = node
        self.replay_image = replay_image
        self.store = CheckpointStore(data_dir)
        self.is_leader = is_leader
        self.min_interval = min_interval
        self.stats = CheckpointStats()
        self._queue: queue.Queue = queue.Queue()
        self._queued_packs: set[tuple[int, int, int]] = set()
        self._requested = False
        self._last = 0.0
        self._waiters: list = []
        self.io_error: BaseException | None = None
        self.last_manifest: CheckpointManifest | None = None
        self._io = threading.Thread(target=self._io_loop, name=f"{node.node_id}-ckpt", daemon=True)
        self._io.start()
        for ci in node.indexes.values():
            ci.on_pack_frozen = self._pack_frozen
            ci.locator.on_flush = self._memtable_flushed
        node.batch_hooks.append(self._on_batch)

    # triggers
    def _memtable_flushed(self, _locator) -> None:
        self._requested = True

    def _pack_frozen(self, table_id, group_no, col, pack) -> None:
        key = (table_id, group_no, col)
        if key not in self._queued_packs and self.is_leader():
            self._queued_packs.add(key)
            self._queue.put(("pack", key, pack))

    def _on_batch(self, node) -> None:
        if self._waiters or (self._requested and time.monotonic() - self._last >= self.min_interval):
            if node.serving and self.is_leader():
                self._requested = False
                self._capture_and_queue()

    def _capture_and_queue(self):
        cap = self.capture()
        done = threading.Event()
        box = {}
        waiters, self._waiters = self._waiters, []
        self._queue.put(("ckpt", cap, (done, box, waiters)))
        return done, box

    def take_checkpoint(self, timeout: float | None = 60.0) -> CheckpointManifest:
        """Checkpoint now. If the node's replay thread is running the capture
        is done by it at the next batch boundary; otherwise inline."""
        if not self.is_leader():
            raise NotLeader(f"{self.node.node_id} is not the checkpoint leader")
        if self.node._thread is not None:
            ev = threading.Event()
            box = {}
            self._waiters.append((ev, box))
            if not ev.wait(timeout):
                raise IoFailure("checkpoint did not complete in time")
        else:
            done, box = self._capture_and_queue()
            done.wait(timeout)
        if "error" in box:
            raise box["error"]
        return box["manifest"]

    def capture(self) -> tuple[int, list[_TableCapture], ReplayImage | None]:
        t0 = time.perf_counter()
        node = self.node
        csn = node.applied_lsn
        caps = []
        for t, ci in node.indexes.items():
            for g in ci.groups:
                if g.frozen and not g.dropped:
                    for c, p in enumerate(g.packs):
                        self._pack_frozen(t, g.group_no, c, p)
            clamp = ci.compaction_vids
            vid_groups, partials, frozen = [], [], []
            flags = []
            for g in ci.groups:
                flags.append([g.group_no, g.frozen, g.dropped])
                if g.dropped:
                    continue
                ins = None if g.insert_vid is None else mask_vids(g.insert_vid, csn, clamp)
                vid_groups.append((g.group_no, ins, mask_vids(g.delete_vid, csn, clamp), g.state.copy()))
                if g.frozen:
                    frozen.extend((g.group_no, c, p) for c, p in enumerate(g.packs))
                else:
                    n = ci.group_rows(g)
                    partials.append((g.group_no, [p.values[:n].copy() for p in g.packs], n))
            meta = {"table_id": t, "group_size": ci.group_size, "next_rid": ci.next_rid,
                    "max_vid": min(ci.max_vid, csn), "floor": ci.snapshot_floor, "groups": flags,
                    "live": len(ci.locator)}
            caps.append(_TableCapture(t, meta, vid_groups, partials, ci.locator.split_snapshot(), frozen))
        image = node.replay_image() if self.replay_image else None
        self.stats.captures += 1
        self.stats.capture_seconds += time.perf_counter() - t0
        self._last = time.monotonic()
        return csn, caps, image

    # background I/O
    def _io_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            t0 = time.perf_counter()
            kind, payload, extra = item
            try:
                if kind == "barrier":
                    extra.set()
                elif kind == "pack":
                    t, g, c = payload
                    path = self.store.packs / f"t{t}_g{g}_c{c}.pack"
                    if not path.exists():
                        write_file(path, encode_pack(g, c, extra))
                else:
                    done, box, waiters = extra
                    try:
                        m = self._persist(*payload)
                        self.last_manifest = m
                        box["manifest"] = m
                        for _, b in waiters:
                            b["manifest"] = m
                    except BaseException as exc:
                        box["error"] = exc
                        for _, b in waiters:
                            b["error"] = exc
                    done.set()
                    for ev, _ in waiters:
                        ev.set()
            except BaseException as exc:
                self.io_error = exc
            self.stats.io_seconds += time.perf_counter() - t0

    def _persist(self, csn: int, caps: list[_TableCapture], image: ReplayImage | None = None) -> CheckpointManifest:
        root = self.store.root
        d = root / str(csn)
        d.mkdir(exist_ok=True)
        m = CheckpointManifest(csn, csn + 1, created=time.time())
        for cap in caps:
            t = cap.table_id
            write_file(d / f"t{t}.meta", json.dumps(cap.meta).encode())
            m.metas.append(f"{csn}/t{t}.meta")
            parts = [_U32.pack(len(cap.vid_groups))]
            for g, ins, dele, state in cap.vid_groups:
                parts.append(_VID_GROUP.pack(g, ins is not None))
                if ins is not None:
                    parts.append(ins.astype("<u8").tobytes())
                parts.append(dele.astype("<u8").tobytes())
                parts.append(state.tobytes())
            write_file(d / f"t{t}.vid", b"".join(parts))
            m.vidmaps.append(f"{csn}/t{t}.vid")
            for g, cols, n in cap.partials:
                parts = [_U32.pack(n), _U32.pack(len(cols))]
                for arr in cols:
                    enc = compression.encode_ints(arr) if arr.dtype != object else compression.encode_strings(arr.tolist())
                    parts.append(_U32.pack(len(enc)))
                    parts.append(enc)
                write_file(d / f"t{t}_g{g}.partial", b"".join(parts))
                m.partials.append(f"{csn}/t{t}_g{g}.partial")
            write_file(d / f"t{t}.loc", cap.locator.to_bytes())
            m.locators.append(f"{csn}/t{t}.loc")
            m.packs.extend(f"packs/t{t}_g{g}_c{c}.pack" for g, c, _ in cap.frozen)
        if image is not None:
            write_file(d / "pages.img", encode_pages(image.pages, self.node.catalog))
            write_file(d / "units.json", encode_units(image.units))
            m.replay = [f"{csn}/pages.img", f"{csn}/units.json"]
        # packs are queued ahead of this item, so they are already on disk
        missing = [p for p in m.packs if not (root / p).exists()]
        if missing:
            raise MissingPackFile(f"pack files not persisted: {missing[:3]}")
        write_file(root / f"{csn}.manifest", m.to_bytes())
        self.stats.persisted += 1
        return m

    def drain(self, timeout: float = 60.0) -> None:
        """Wait until every write queued so far has finished."""
        ev = threading.Event()
        self._queue.put(("barrier", None, ev))
        if not ev.wait(timeout):
            raise IoFailure("checkpoint I/O queue did not drain in time")

    def close(self) -> None:
        self._queue.put(None)
        self._io.join()


# -- replay image -------------------------------------------------------------

def encode_pages(pages: dict, catalog: Catalog) -> bytes:
    parts = [_U32.pack(len(pages))]
    for pid in sorted(pages):
        p = pages[pid]
        parts.append(p.to_bytes(catalog[p.table_id]))
    return b"".join(parts)


def decode_pages(body: bytes, catalog: Catalog) -> dict:
    (n,) = _U32.unpack_from(body, 0)
    off = 4
    pages = {}
    for _ in range(n):
        table_id = struct.unpack_from("<I", body, off + 8)[0]
        p, off = Page.from_bytes(catalog[table_id], body, off)
        pages[p.page_id] = p
    return pages


def encode_units(units: dict) -> bytes:
    out = []
    for tid, u in sorted(units.items()):
        out.append({
            "tid": tid,
            "dmls": [[int(d.kind), d.table_id, d.pk, d.row, d.lsn] for d in u.dmls],
            "inserted": sorted(u.pk_insert_set),
            "final": [[t, pk, row] for (t, pk), row in u.final.items()],
            "n_dmls": u.n_dmls,
        })
    return json.dumps(out).encode()


def decode_units(body: bytes) -> dict:
    units = {}
    for d in json.loads(body):
        u = TransactionBufferUnit(d["tid"])
        u.dmls = [DmlStatement(Kind(k), t, pk, None if row is None else tuple(row), lsn, u.tid)
                  for k, t, pk, row, lsn in d["dmls"]]
        u.pk_insert_set = {tuple(x) for x in d["inserted"]}
        u.final = {(t, pk): None if row is None else tuple(row) for t, pk, row in d["final"]}
        u.n_dmls = d["n_dmls"]
        units[u.tid] = u
    return units


# -- recovery -----------------------------------------------------------------

def load_checkpoint(data_dir, catalog: Catalog, config: ReplayConfig | None = None,
                    manifest: CheckpointManifest | None = None) -> LoadedState:
    """Column-index state exactly as of the manifest's csn."""
    config = config or ReplayConfig()
    store = CheckpointStore(data_dir)
    if manifest is None:
        manifest = store.latest()
        if manifest is None:
            raise MissingPackFile(f"no checkpoint manifest under {store.root}")
    root = store.root
    csn = manifest.csn
    packs: dict[tuple[int, int, int], DataPack] = {}
    for rel in manifest.packs:
        g, c, pack = decode_pack(read_file(root / rel))
        t = int(Path(rel).name.split("_")[0][1:])
        packs[(t, g, c)] = pack
    indexes = {}
    for rel in manifest.metas:
        meta = json.loads(read_file(root / rel))
        t = meta["table_id"]
        schema = catalog[t]
        G = meta["group_size"]
        ci = ColumnIndex(schema, G, RidLocator(config.locator_flush, config.locator_max_runs))
        ci.next_rid = meta["next_rid"]
        ci.max_vid = meta["max_vid"]
        ci.snapshot_floor = max(meta["floor"], csn)
        for g, frozen, dropped in meta["groups"]:
            grp = RowGroup.__new__(RowGroup)
            grp.group_no, grp.capacity, grp.frozen, grp.dropped = g, G, frozen, dropped
            grp.packs, grp.insert_vid, grp.delete_vid, grp.state = [], None, None, None
            if frozen and not dropped:
                try:
                    grp.packs = [packs[(t, g, c)] for c in range(schema.ncols)]
                except KeyError:
                    raise MissingPackFile(f"table {t} group {g}: pack not listed in manifest") from None
            ci.groups.append(grp)
        body = read_file(root / f"{csn}/t{t}.vid")
        (ng,) = _U32.unpack_from(body, 0)
        off = 4
        for _ in range(ng):
            g, has_ins = _VID_GROUP.unpack_from(body, off)
            off += _VID_GROUP.size
            grp = ci.groups[g]
            if has_ins:
                grp.insert_vid = np.frombuffer(body, "<u8", G, off).astype(np.uint64)
                off += 8 * G
            grp.delete_vid = np.frombuffer(body, "<u8", G, off).astype(np.uint64)
            off += 8 * G
            grp.state = np.frombuffer(body, np.uint8, G, off).copy()
            off += G
            # transactions still open at csn restart from their first statement
            pend = grp.state == PENDING
            if pend.any():
                grp.state[pend] = 3
                grp.delete_vid[pend] = 0
                if grp.insert_vid is not None:
                    grp.insert_vid[pend] = _INVALID
        for rel in manifest.partials:
            name = Path(rel).name
            if not name.startswith(f"t{t}_g"):
                continue
            g = int(name[len(f"t{t}_g"):-len(".partial")])
            body = read_file(root / rel)
            n, ncols = _U32.unpack_from(body, 0)[0], _U32.unpack_from(body, 4)[0]
            off = 8
            grp = ci.groups[g]
            grp.packs = []
            for col in range(ncols):
                (ln,) = _U32.unpack_from(body, off)
                enc = body[off + 4:off + 4 + ln]
                off += 4 + ln
                numeric = schema.columns[col].type.numeric
                pp = PartialPack(G, numeric)
                vals = compression.decode_ints(enc) if numeric else compression.decode_strings(enc)
                pp.values[:n] = vals
                grp.packs.append(pp)
        snap = LocatorSnapshot.from_bytes(read_file(root / f"{csn}/t{t}.loc"))
        ci.locator = RidLocator.from_snapshot(snap, config.locator_flush, config.locator_max_runs)
        indexes[t] = ci
    for schema in catalog:
        if schema.table_id not in indexes:
            indexes[schema.table_id] = ColumnIndex(schema, config.group_size,
                                                   RidLocator(config.locator_flush, config.locator_max_runs))
    image = None
    if manifest.replay:
        pages_rel, units_rel = manifest.replay
        image = ReplayImage(decode_pages(read_file(root / pages_rel), catalog),
                            decode_units(read_file(root / units_rel)))
    return LoadedState(indexes, manifest.start_lsn, image)


def rebuild_from_row_store(catalog: Catalog, rows_by_table: dict, snapshot: int,
                           config: ReplayConfig | None = None) -> LoadedState:
    """Column indexes built from a committed row-store snapshot at ``snapshot``."""
    config = config or ReplayConfig()
    indexes = {}
    for schema in catalog:
        indexes[schema.table_id] = ColumnIndex.build_from_rows(
            schema, rows_by_table.get(schema.table_id, ()), snapshot, config.group_size,
            config.locator_flush, config.locator_max_runs)
    return LoadedState(indexes, snapshot + 1)


def recover_node(data_dir, catalog: Catalog, source, config: ReplayConfig | None = None,
                 node_id: str = "ro", row_store=None) -> tuple[RoNode, str]:
    """New RO node from the latest checkpoint, or rebuilt from ``row_store``
    when there is none. Returns (node, "checkpoint" | "rebuild" | "empty")."""
    store = CheckpointStore(data_dir)
    if store.manifests():
        return RoNode(catalog, source, config, node_id, load_checkpoint(data_dir, catalog, config)), "checkpoint"
    if row_store is not None:
        snap = row_store.latest_commit_seq
        rows = row_store.committed_state(snap)
        return RoNode(catalog, source, config, node_id, rebuild_from_row_store(catalog, rows, snap, config)), "rebuild"
    return RoNode(catalog, source, config, node_id), "empty"


# -- roles ----------------------------------------------------------------------

class RoleFile:
    """``<data-dir>/ROLE``: the RW's record of who leads checkpointing."""

    def __init__(self, data_dir):
        self.path = Path(data_dir) / "ROLE"

    def read(self) -> dict:
        try:
            return json.loads(read_file(self.path))
        except MissingPackFile:
            return {"epoch": 0, "leader": None, "heartbeats": {}}

    def write(self, state: dict) -> None:
        write_file(self.path, json.dumps(state, sort_keys=True).encode())

    def heartbeat(self, node: str, now: float | None = None) -> None:
        st = self.read()
        st.setdefault("heartbeats", {})[node] = time.time() if now is None else now
        self.write(st)

    def live_nodes(self, nodes, now: float | None = None) -> list[str]:
        now = time.time() if now is None else now
        hb = self.read().get("heartbeats", {})
        return [n for n in nodes if now - hb.get(n, -1e18) <= HEARTBEAT_TIMEOUT]

    def is_leader(self, node: str) -> bool:
        return self.read().get("leader") == node


def designate_leader(nodes, role_file: RoleFile | None = None, live=None) -> dict:
    """Keep the current leader while it is live; otherwise promote the first
    live node and bump the epoch. Returns {"epoch", "leader", "roles"}."""
    nodes = list(nodes)
    live = nodes if live is None else [n for n in nodes if n in set(live)]
    if not live:
        raise NoLiveRo("no live RO node to lead checkpoints")
    st = role_file.read() if role_file is not None else {"epoch": 0, "leader": None, "heartbeats": {}}
    leader = st.get("leader")
    if leader not in live:
        leader = live[0]
        st["epoch"] = st.get("epoch", 0) + 1
        st["leader"] = leader
        if role_file is not None:
            role_file.write(st)
    roles = {n: ("leader" if n == leader else "follower") for n in nodes}
    return {"epoch": st["epoch"], "leader": leader, "roles": roles}
