import threading

import numpy as np
import pytest

from imci import checkpoint as ck
from imci.checkpoint import (Checkpointer, CheckpointStore, RoleFile, designate_leader, load_checkpoint,
                             mask_vids, recover_node)
from imci.colindex import INVALID
from imci.errors import ChecksumMismatch, MissingPackFile, NoLiveRo, NotLeader
from imci.pages import page_images
from imci.redo import MemoryLog
from imci.replication import ReplayConfig, RoNode, source_for
from imci.rowstore import RowStore
from imci.schema import Catalog
from imci.workload import WorkloadGenerator, WorkloadSpec, run_txn

from conftest import make_row

CFG = dict(group_size=64, locator_flush=128)


def rc(**kw):
    return ReplayConfig(2, 2, **{**CFG, **kw})


class Setup:
    def __init__(self, tmp_path, seed=1, tables=3, **cfg):
        self.catalog = Catalog.synthetic(tables, page_capacity=16)
        self.rw = RowStore(self.catalog, MemoryLog())
        self.gen = WorkloadGenerator(WorkloadSpec(kind="mixed", tables=tables, seed=seed), self.catalog)
        self.dir = tmp_path
        self.cfg = cfg
        self.leader = RoNode(self.catalog, source_for(self.rw.log), rc(**cfg), "ro1")
        self.ckpt = Checkpointer(self.leader, tmp_path, min_interval=0.0)

    def write(self, n):
        for txn in self.gen.txns(n):
            run_txn(self.rw, txn)

    def load(self, n):
        self.write(n)
        self.leader.catch_up()

    def recover(self, **kw):
        state = load_checkpoint(self.dir, self.catalog, rc(**self.cfg), **kw)
        return RoNode(self.catalog, source_for(self.rw.log), rc(**self.cfg), "ro2", state)

    def close(self):
        self.ckpt.close()
        self.leader.stop()


def test_empty_checkpoint(tmp_path):
    s = Setup(tmp_path)
    m = s.ckpt.take_checkpoint()
    assert (m.csn, m.start_lsn, m.packs) == (0, 1, [])
    node = s.recover()
    assert node.visible_state() == {t: [] for t in (1, 2, 3)}
    s.close()


def test_mask_vids_rule():
    c = 10
    v = np.array([3, c, c + 1, INVALID, c + 5], dtype=np.uint64)
    assert mask_vids(v, c).tolist() == [3, c, INVALID, INVALID, INVALID]
    # compaction stamps are pulled down instead of hidden
    assert mask_vids(v, c, {c + 5}).tolist() == [3, c, INVALID, INVALID, c]
    assert v.tolist()[2] == c + 1  # input untouched


@pytest.mark.parametrize("image", [True, False])
def test_recover_and_catch_up_equals_leader(tmp_path, image):
    s = Setup(tmp_path)
    s.ckpt.replay_image = image
    s.load(3000)
    m = s.ckpt.take_checkpoint()
    assert m.csn == s.leader.applied_lsn
    assert bool(m.replay) == image
    assert m.packs  # some groups froze
    s.load(2000)
    node = s.recover()
    assert node.start_lsn == m.csn + 1
    # exact state at csn straight after load
    assert node.visible_state(m.csn) == s.rw.committed_state(m.csn)
    node.catch_up()
    assert node.applied_lsn == s.leader.applied_lsn
    assert node.visible_state() == s.leader.visible_state() == s.rw.committed_state()
    assert page_images(node.pages, s.catalog) == page_images(s.leader.pages, s.catalog)
    if image:
        assert node.stats.entries == s.rw.log.written_lsn - m.csn
    node.stop()
    s.close()


def test_twenty_checkpoints_recover_exactly(tmp_path):
    s = Setup(tmp_path, seed=9, tables=2)
    for i in range(20):
        s.load(200)
        m = s.ckpt.take_checkpoint()
        node = s.recover()
        assert node.visible_state(m.csn) == s.rw.committed_state(m.csn)
        node.catch_up()
        assert node.visible_state() == s.rw.committed_state()
        node.stop()
    s.close()


def test_image_omitted_when_open_txn_precommitted(tmp_path):
    s = Setup(tmp_path, precommit_threshold=4)
    s.load(500)
    t = s.rw.begin_txn()
    for pk in range(10):
        s.rw.txn_insert(t, 1, make_row(10**9 + pk))
    s.leader.catch_up()
    assert s.leader.replay_image() is None
    m = s.ckpt.take_checkpoint()
    assert m.replay == []
    s.rw.txn_commit(t)
    node = s.recover()
    node.catch_up()
    s.leader.catch_up()
    assert node.visible_state() == s.leader.visible_state() == s.rw.committed_state()
    node.stop()
    s.close()


def test_open_txn_is_carried_by_the_image(tmp_path):
    s = Setup(tmp_path)
    s.load(500)
    t = s.rw.begin_txn()
    s.rw.txn_insert(t, 1, make_row(10**9))
    s.leader.catch_up()
    m = s.ckpt.take_checkpoint()
    assert m.replay
    s.rw.txn_insert(t, 1, make_row(10**9 + 1))
    s.rw.txn_commit(t)
    node = s.recover()
    node.catch_up()
    assert node.visible_state() == s.rw.committed_state()
    assert node.stats.entries == s.rw.log.written_lsn - m.csn
    node.stop()
    s.close()


def test_no_manifest_falls_back_to_rebuild(tmp_path):
    s = Setup(tmp_path)
    s.load(800)
    node, how = recover_node(tmp_path / "elsewhere", s.catalog, source_for(s.rw.log), rc(), row_store=s.rw)
    assert how == "rebuild"
    node.catch_up()
    assert node.visible_state() == s.rw.committed_state()
    _, how = recover_node(tmp_path / "elsewhere", s.catalog, source_for(s.rw.log), rc())
    assert how == "empty"
    with pytest.raises(MissingPackFile):
        load_checkpoint(tmp_path / "elsewhere", s.catalog)
    s.close()


def test_corrupt_or_missing_pack_refuses(tmp_path):
    s = Setup(tmp_path)
    s.load(3000)
    m = s.ckpt.take_checkpoint()
    root = CheckpointStore(tmp_path).root
    victim = root / m.packs[0]
    raw = bytearray(victim.read_bytes())
    raw[5] ^= 0x55
    victim.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        s.recover()
    victim.unlink()
    with pytest.raises(MissingPackFile):
        s.recover()
    s.close()


def test_follower_cannot_checkpoint(tmp_path):
    s = Setup(tmp_path)
    s.ckpt.is_leader = lambda: False
    with pytest.raises(NotLeader):
        s.ckpt.take_checkpoint()
    s.close()


def test_designate_leader(tmp_path):
    rf = RoleFile(tmp_path)
    r = designate_leader(["ro1", "ro2"], rf)
    assert r["leader"] == "ro1" and r["roles"] == {"ro1": "leader", "ro2": "follower"}
    e = r["epoch"]
    assert designate_leader(["ro1", "ro2"], rf)["epoch"] == e  # stable
    r = designate_leader(["ro1", "ro2"], rf, live=["ro2"])
    assert r["leader"] == "ro2" and r["epoch"] == e + 1
    assert rf.is_leader("ro2")
    assert designate_leader(["solo"])["leader"] == "solo"
    with pytest.raises(NoLiveRo):
        designate_leader([])


def test_heartbeats_decide_liveness(tmp_path):
    rf = RoleFile(tmp_path)
    rf.heartbeat("ro1", now=100.0)
    rf.heartbeat("ro2", now=103.5)
    assert rf.live_nodes(["ro1", "ro2"], now=104.0) == ["ro2"]


def test_replay_does_not_wait_for_checkpoint_io(tmp_path, monkeypatch):
    s = Setup(tmp_path)
    s.load(1000)
    gate = threading.Event()
    real = ck.write_file

    def slow_write(path, body):
        gate.wait(30)
        real(path, body)

    monkeypatch.setattr(ck, "write_file", slow_write)
    s.leader.start()
    waiter = threading.Thread(target=s.ckpt.take_checkpoint)
    waiter.start()
    # I/O is stalled; replay must keep applying new commits regardless
    while s.ckpt.stats.captures == 0:
        s.write(10)
    before = s.leader.applied_lsn
    s.write(500)
    assert s.leader.wait_applied(s.rw.log.written_lsn, 30)
    assert s.leader.applied_lsn > before
    assert s.ckpt.stats.persisted == 0
    gate.set()
    waiter.join(30)
    assert s.ckpt.stats.persisted == 1
    assert s.ckpt.stats.replay_waits == 0
    s.close()
