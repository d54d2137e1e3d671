"""
Content-addressed storage for committed rounds.

Every accepted bundle becomes an update-log entry stored under the keccak256
of its bytes. Entries for a rule link back to their predecessor by content id
and carry the (prev_root, new_root) pair they move between, so the log is a
hash chain. A full snapshot of the rule's state tree is stored every
``snapshot_every`` entries. Any committed root can then be rebuilt by loading
the nearest earlier snapshot and replaying the log forward through the rule
engine.

On disk a store is a directory of files named by hex content id, plus
``tips.json`` mapping each rule to its latest entry and snapshot index.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .core_types import RuleId, UserOp, hexify, keccak256, unhex
from .enclave import replay_batch
from .errors import ChainBreak, CorruptBlob, EncodingError, MissingBlob, RootMismatch
from .merkle_state import RuleGlobalState, StateTree, UserState, genesis_root
from .rules import RuleParams

logger = logging.getLogger(__name__)

DEFAULT_SNAPSHOT_EVERY = 50
NO_PARENT = bytes(32)


class ContentStore:
    """Append-only blob store keyed by keccak256 of the blob.

    With ``directory`` set, blobs live in files; otherwise in memory.
    """

    def __init__(self, directory: Union[str, Path, None] = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: Dict[bytes, bytes] = {}
        self._tips: Dict[str, dict] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            tips = self.directory / "tips.json"
            if tips.exists():
                self._tips = json.loads(tips.read_text())

    def put(self, blob: bytes) -> bytes:
        cid = keccak256(blob)
        if self.directory is None:
            existing = self._mem.get(cid)
            if existing is not None and existing != blob:
                raise CorruptBlob(cid, "refusing to overwrite a blob with different bytes")
            self._mem[cid] = bytes(blob)
        else:
            path = self.directory / cid.hex()
            if path.exists():
                if path.read_bytes() != blob:
                    raise CorruptBlob(cid, "refusing to overwrite a blob with different bytes")
            else:
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(blob)
                os.replace(tmp, path)
        return cid

    def get(self, cid: bytes) -> bytes:
        if self.directory is None:
            blob = self._mem.get(cid)
        else:
            path = self.directory / cid.hex()
            blob = path.read_bytes() if path.exists() else None
        if blob is None:
            raise MissingBlob(cid)
        if keccak256(blob) != cid:
            raise CorruptBlob(cid)
        return blob

    def __contains__(self, cid: bytes) -> bool:
        if self.directory is None:
            return cid in self._mem
        return (self.directory / cid.hex()).exists()

    def cids(self) -> List[bytes]:
        if self.directory is None:
            return list(self._mem)
        return [bytes.fromhex(p.name) for p in self.directory.iterdir() if len(p.name) == 64]

    # test and fault-injection hooks; they bypass the append-only guard
    def delete(self, cid: bytes) -> None:
        if self.directory is None:
            self._mem.pop(cid, None)
        else:
            (self.directory / cid.hex()).unlink(missing_ok=True)

    def overwrite(self, cid: bytes, blob: bytes) -> None:
        if self.directory is None:
            self._mem[cid] = blob
        else:
            (self.directory / cid.hex()).write_bytes(blob)

    # index of rule tips
    def tip(self, rule: RuleId) -> Optional[dict]:
        return self._tips.get(str(int(rule)))

    def set_tip(self, rule: RuleId, tip: dict) -> None:
        self._tips[str(int(rule))] = tip
        if self.directory is not None:
            tmp = self.directory / "tips.json.tmp"
            tmp.write_text(json.dumps(self._tips, sort_keys=True, indent=1))
            os.replace(tmp, self.directory / "tips.json")


@dataclass(frozen=True)
class UpdateLogEntry:
    seq: int
    rule: RuleId
    block: int
    bundle_digest: bytes
    ops: Tuple[UserOp, ...]
    prev_root: bytes
    new_root: bytes
    prev_cid: bytes = NO_PARENT

    def encode(self) -> bytes:
        doc = {
            "seq": self.seq,
            "rule": int(self.rule),
            "block": self.block,
            "bundle_digest": hexify(self.bundle_digest),
            "ops": [hexify(op.encode()) for op in self.ops],
            "prev_root": hexify(self.prev_root),
            "new_root": hexify(self.new_root),
            "prev_cid": hexify(self.prev_cid),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def decode(cls, blob: bytes) -> "UpdateLogEntry":
        try:
            d = json.loads(blob)
            return cls(
                d["seq"],
                RuleId(d["rule"]),
                d["block"],
                unhex(d["bundle_digest"]),
                tuple(UserOp.decode(unhex(o)) for o in d["ops"]),
                unhex(d["prev_root"]),
                unhex(d["new_root"]),
                unhex(d["prev_cid"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise EncodingError(f"malformed log entry: {exc}") from exc


def encode_snapshot(tree: StateTree, seq: int) -> bytes:
    doc = {
        "rule": int(tree.rule),
        "seq": seq,
        "root": hexify(tree.root),
        "global": hexify(tree.global_state.encode()),
        "leaves": {hexify(u): hexify(s.encode()) for u, s in sorted(tree.leaves.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def decode_snapshot(blob: bytes) -> Tuple[StateTree, int, bytes]:
    try:
        d = json.loads(blob)
        leaves = {unhex(u): UserState.decode(unhex(s)) for u, s in d["leaves"].items()}
        tree = StateTree(RuleId(d["rule"]), leaves, RuleGlobalState.decode(unhex(d["global"])))
        return tree, d["seq"], unhex(d["root"])
    except (ValueError, KeyError, TypeError) as exc:
        raise EncodingError(f"malformed snapshot: {exc}") from exc


def persist_round(
    store: ContentStore,
    entry: UpdateLogEntry,
    snapshot: Optional[StateTree] = None,
    snapshot_every: int = DEFAULT_SNAPSHOT_EVERY,
) -> Tuple[bytes, Optional[bytes]]:
    """Append ``entry`` to its rule's log; store ``snapshot`` if this seq is due one.

    The entry must extend the stored tip: its seq is the next one, its
    prev_root is the tip's new_root and its prev_cid names the tip entry.
    """
    tip = store.tip(entry.rule)
    if tip is None:
        want_seq, want_root, want_cid = 1, genesis_root(), NO_PARENT
        snapshots: List[List] = []
    else:
        want_seq, want_root, want_cid = tip["seq"] + 1, unhex(tip["root"]), unhex(tip["cid"])
        snapshots = tip["snapshots"]
    if entry.prev_root != want_root:
        raise ChainBreak(f"{entry.rule.name} seq {entry.seq}: prev_root does not match the stored tip")
    if entry.seq != want_seq or entry.prev_cid != want_cid:
        raise ChainBreak(f"{entry.rule.name} seq {entry.seq}: does not extend the stored tip")
    cid = store.put(entry.encode())
    snap_cid = None
    if snapshot is not None and entry.seq % snapshot_every == 0:
        if snapshot.root != entry.new_root:
            raise RootMismatch("snapshot root differs from the entry it is filed under")
        snap_cid = store.put(encode_snapshot(snapshot, entry.seq))
        snapshots = snapshots + [[entry.seq, hexify(snap_cid)]]
    store.set_tip(
        entry.rule, {"seq": entry.seq, "cid": hexify(cid), "root": hexify(entry.new_root), "snapshots": snapshots}
    )
    return cid, snap_cid


def _fail(exc: Exception, seq: int) -> Exception:
    exc.seq = seq
    return exc


def _load_entry(store: ContentStore, cid: bytes, seq: int) -> UpdateLogEntry:
    try:
        entry = UpdateLogEntry.decode(store.get(cid))
    except (CorruptBlob, MissingBlob) as exc:
        raise _fail(exc, seq)
    except EncodingError as exc:
        raise _fail(ChainBreak(f"seq {seq}: {exc}"), seq) from exc
    if entry.seq != seq:
        raise _fail(ChainBreak(f"entry {cid.hex()} claims seq {entry.seq}, expected {seq}"), seq)
    return entry


def reconstruct(store: ContentStore, rule: RuleId, target_root: bytes, params: RuleParams) -> StateTree:
    """Rebuild the state tree whose root is ``target_root`` from the store alone.

    Raises ``MissingBlob`` if a needed blob is gone, ``ChainBreak`` if the
    links or bytes of the log are damaged, and ``RootMismatch`` if replay
    lands anywhere other than the logged roots. Failures carry the offending
    ``seq`` where one is known.
    """
    rule = RuleId(rule)
    if target_root == genesis_root():
        return StateTree(rule)
    tip = store.tip(rule)
    if tip is None:
        raise RootMismatch(f"{rule.name}: no log, cannot reach {target_root.hex()}")

    entries: Dict[int, UpdateLogEntry] = {}
    seq, cid = tip["seq"], unhex(tip["cid"])
    target_seq = None
    while seq >= 1:
        entries[seq] = _load_entry(store, cid, seq)
        if entries[seq].new_root == target_root:
            target_seq = seq
            break
        cid, seq = entries[seq].prev_cid, seq - 1
    if target_seq is None:
        raise RootMismatch(f"{rule.name}: {target_root.hex()} is not a logged root")

    snaps = [(s, unhex(c)) for s, c in tip["snapshots"] if s <= target_seq]
    if snaps:
        start_seq, snap_cid = snaps[-1]
        try:
            tree, stored_seq, stored_root = decode_snapshot(store.get(snap_cid))
        except (CorruptBlob, MissingBlob) as exc:
            raise _fail(exc, start_seq)
        if stored_seq != start_seq or tree.rule != rule or tree.root != stored_root:
            raise _fail(RootMismatch(f"{rule.name}: snapshot at seq {start_seq} is inconsistent"), start_seq)
    else:
        start_seq, tree = 0, StateTree(rule)

    for s in range(target_seq - 1, start_seq, -1):
        entries[s] = _load_entry(store, entries[s + 1].prev_cid, s)
    for s in range(start_seq + 1, target_seq + 1):
        entry = entries[s]
        if entry.rule != rule or entry.prev_root != tree.root:
            raise _fail(ChainBreak(f"{rule.name}: seq {s} does not follow the replayed root"), s)
        failed = replay_batch(tree, entry.ops, params)
        if failed or tree.root != entry.new_root:
            raise _fail(RootMismatch(f"{rule.name}: replaying seq {s} gave a different root"), s)
    if tree.root != target_root:
        raise _fail(RootMismatch(f"{rule.name}: snapshot at seq {start_seq} does not hold the target"), start_seq)
    return tree


def audit_log(store: ContentStore, rule: RuleId, params: RuleParams) -> StateTree:
    """Check a rule's whole log from genesis and return the tree at its tip.

    Unlike :func:`reconstruct`, which trusts the latest usable snapshot, this
    loads every entry and every snapshot, so damage to any single blob is
    reported. Failures carry the offending ``seq``.
    """
    rule = RuleId(rule)
    tip = store.tip(rule)
    if tip is None:
        return StateTree(rule)
    entries: Dict[int, UpdateLogEntry] = {}
    seq, cid = tip["seq"], unhex(tip["cid"])
    while seq >= 1:
        entries[seq] = _load_entry(store, cid, seq)
        cid, seq = entries[seq].prev_cid, seq - 1
    if cid != NO_PARENT:
        raise _fail(ChainBreak(f"{rule.name}: first entry does not start the log"), 1)
    snaps = {s: unhex(c) for s, c in tip["snapshots"]}
    tree = StateTree(rule)
    for s in range(1, tip["seq"] + 1):
        entry = entries[s]
        if entry.rule != rule or entry.prev_root != tree.root:
            raise _fail(ChainBreak(f"{rule.name}: seq {s} does not follow the replayed root"), s)
        if replay_batch(tree, entry.ops, params) or tree.root != entry.new_root:
            raise _fail(RootMismatch(f"{rule.name}: replaying seq {s} gave a different root"), s)
        if s in snaps:
            try:
                snap, stored_seq, stored_root = decode_snapshot(store.get(snaps[s]))
            except (CorruptBlob, MissingBlob) as exc:
                raise _fail(exc, s)
            except EncodingError as exc:
                raise _fail(ChainBreak(f"snapshot at seq {s}: {exc}"), s) from exc
            if stored_seq != s or snap.rule != rule or snap.root != tree.root or stored_root != tree.root:
                raise _fail(RootMismatch(f"{rule.name}: snapshot at seq {s} disagrees with replay"), s)
    if tree.root != unhex(tip["root"]):
        raise _fail(RootMismatch(f"{rule.name}: tip root disagrees with replay"), tip["seq"])
    return tree


class Archive:
    """Keeps the store in step with the chain and serves committed trees.

    It holds a live tree per rule, advances it by replaying each committed
    bundle, and files the round with :func:`persist_round`. A committed root
    that replay cannot reproduce (only possible with a stolen enclave key) is
    recorded as a divergence instead of being filed.
    """

    def __init__(self, store: ContentStore, params: RuleParams, snapshot_every: int = DEFAULT_SNAPSHOT_EVERY):
        self.store = store
        self.params = params
        self.snapshot_every = snapshot_every
        self.live: Dict[RuleId, StateTree] = {r: StateTree(r) for r in RuleId}
        self.divergences: List[Tuple[RuleId, int, bytes]] = []
        self.snapshot_count = 0

    def record(self, rule: RuleId, block: int, bundle_digest: bytes, ops, prev_root: bytes, new_root: bytes) -> bool:
        rule = RuleId(rule)
        tree = self.live[rule]
        if tree.root != prev_root:
            self.divergences.append((rule, block, new_root))
            return False
        work = tree.copy()
        failed = replay_batch(work, ops, self.params)
        if failed or work.root != new_root:
            logger.warning("%s: committed root %s is not reproducible from its ops", rule.name, new_root.hex())
            self.divergences.append((rule, block, new_root))
            return False
        tip = self.store.tip(rule)
        seq = 1 if tip is None else tip["seq"] + 1
        prev_cid = NO_PARENT if tip is None else unhex(tip["cid"])
        entry = UpdateLogEntry(seq, rule, block, bundle_digest, tuple(ops), prev_root, new_root, prev_cid)
        _, snap = persist_round(self.store, entry, work, self.snapshot_every)
        if snap is not None:
            self.snapshot_count += 1
        self.live[rule] = work
        return True

    def tree_at(self, rule: RuleId, root: bytes) -> Optional[StateTree]:
        """A private copy of the tree with ``root``, or None if it cannot be produced."""
        live = self.live[RuleId(rule)]
        if live.root == root:
            return live.copy()
        try:
            return reconstruct(self.store, rule, root, self.params)
        except (RootMismatch, ChainBreak, MissingBlob):
            return None

