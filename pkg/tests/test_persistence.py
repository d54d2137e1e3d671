import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_op
from gaslite.core_types import RuleId, keccak256, unhex
from gaslite.enclave import replay_batch
from gaslite.errors import ChainBreak, CorruptBlob, MissingBlob, RootMismatch
from gaslite.merkle_state import StateTree, genesis_root
from gaslite.persistence import (
    NO_PARENT,
    Archive,
    ContentStore,
    UpdateLogEntry,
    audit_log,
    persist_round,
    reconstruct,
)
from gaslite.rules import RuleParams

P = RuleParams()


def filed(archive, rule, rounds, rng, start=0):
    """Record ``rounds`` random accepted batches; return the root after each."""
    roots = []
    for r in range(start, start + rounds):
        tree = archive.live[rule].copy()
        ops = []
        for j in range(rng.randint(1, 5)):
            op = make_op(f"s{rng.randrange(12)}/{r}/{j}", rule=rule, gas=rng.randint(1, 50_000), block=r)
            if not replay_batch(tree, [op], P):
                ops.append(op)
        prev = archive.live[rule].root
        assert archive.record(rule, r, keccak256(b"bundle", bytes([r % 256])), ops, prev, tree.root)
        roots.append(tree.root)
    return roots


@given(st.binary(max_size=512))
def test_put_get_round_trip(blob):
    store = ContentStore()
    cid = store.put(blob)
    assert cid == keccak256(blob) and store.get(cid) == blob
    assert store.put(blob) == cid


def test_put_refuses_different_bytes(tmp_path):
    for store in (ContentStore(), ContentStore(tmp_path)):
        cid = store.put(b"x")
        store.overwrite(cid, b"y")
        with pytest.raises(CorruptBlob):
            store.get(cid)
        with pytest.raises(CorruptBlob):
            store.put(b"x")
        with pytest.raises(MissingBlob):
            store.get(b"\x00" * 32)


def test_entry_codec():
    e = UpdateLogEntry(3, RuleId.RULE2, 9, b"\x01" * 32, (make_op("a", rule=RuleId.RULE2),), b"\x02" * 32, b"\x03" * 32, b"\x04" * 32)
    assert UpdateLogEntry.decode(e.encode()) == e


def test_wrong_prev_root_is_chain_break():
    store = ContentStore()
    e = UpdateLogEntry(1, RuleId.RULE1, 0, bytes(32), (), b"\x09" * 32, b"\x03" * 32, NO_PARENT)
    with pytest.raises(ChainBreak):
        persist_round(store, e)
    good = UpdateLogEntry(1, RuleId.RULE1, 0, bytes(32), (), genesis_root(), genesis_root(), NO_PARENT)
    cid, _ = persist_round(store, good)
    with pytest.raises(ChainBreak):
        persist_round(store, UpdateLogEntry(3, RuleId.RULE1, 0, bytes(32), (), genesis_root(), genesis_root(), cid))
    with pytest.raises(ChainBreak):
        persist_round(store, UpdateLogEntry(2, RuleId.RULE1, 0, bytes(32), (), genesis_root(), genesis_root(), NO_PARENT))


def test_snapshot_cadence():
    archive = Archive(ContentStore(), P, snapshot_every=50)
    filed(archive, RuleId.RULE1, 120, random.Random(120))
    assert archive.snapshot_count == 2
    assert [s for s, _ in archive.store.tip(RuleId.RULE1)["snapshots"]] == [50, 100]


def test_genesis_reconstruct():
    store = ContentStore()
    for rule in RuleId:
        assert reconstruct(store, rule, genesis_root(), P).root == genesis_root()


@pytest.mark.parametrize("rule", list(RuleId))
def test_every_committed_root_reconstructs(rule):
    archive = Archive(ContentStore(), P, snapshot_every=7)
    roots = filed(archive, rule, 30, random.Random(int(rule)))
    for root in roots:
        tree = reconstruct(archive.store, rule, root, P)
        assert tree.root == root and tree.rule is rule
    final = reconstruct(archive.store, rule, roots[-1], P)
    assert final.leaves == archive.live[rule].leaves
    assert final.global_state == archive.live[rule].global_state
    assert audit_log(archive.store, rule, P).root == roots[-1]
    with pytest.raises(RootMismatch):
        reconstruct(archive.store, rule, b"\x77" * 32, P)


def test_deleted_blob_is_missing():
    archive = Archive(ContentStore(), P, snapshot_every=1000)
    roots = filed(archive, RuleId.RULE1, 6, random.Random(6))
    tip = archive.store.tip(RuleId.RULE1)
    archive.store.delete(unhex(tip["cid"]))
    with pytest.raises(MissingBlob) as exc:
        reconstruct(archive.store, RuleId.RULE1, roots[-1], P)
    assert exc.value.seq == 6
    assert archive.tree_at(RuleId.RULE1, roots[0]) is None


def test_single_blob_tamper_is_found():
    rng = random.Random(9)
    for trial in range(10):
        archive = Archive(ContentStore(), P, snapshot_every=4)
        filed(archive, RuleId.RULE3, 10, rng)
        store = archive.store
        victim = rng.choice(store.cids())
        blob = bytearray(store.get(victim))
        blob[rng.randrange(len(blob))] ^= 1 << rng.randrange(8)
        store.overwrite(victim, bytes(blob))
        with pytest.raises((ChainBreak, MissingBlob, RootMismatch)) as exc:
            audit_log(store, RuleId.RULE3, P)
        assert 1 <= exc.value.seq <= 10


def test_on_disk_layout(tmp_path):
    store = ContentStore(tmp_path)
    archive = Archive(store, P, snapshot_every=2)
    roots = filed(archive, RuleId.RULE4, 5, random.Random(4))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "tips.json" in names
    blobs = [n for n in names if n != "tips.json"]
    assert len(blobs) == 5 + 2
    for n in blobs:
        assert keccak256((tmp_path / n).read_bytes()).hex() == n
    again = ContentStore(tmp_path)
    assert reconstruct(again, RuleId.RULE4, roots[-1], P).root == roots[-1]


def test_archive_flags_unreproducible_root():
    archive = Archive(ContentStore(), P)
    op = make_op("z")
    assert not archive.record(RuleId.RULE1, 1, bytes(32), [op], genesis_root(), b"\x55" * 32)
    assert archive.divergences == [(RuleId.RULE1, 1, b"\x55" * 32)]
    assert archive.store.tip(RuleId.RULE1) is None
    assert archive.live[RuleId.RULE1].root == StateTree(RuleId.RULE1).root
