"""Bundler node: pull routed ops, pre-validate on the host, run the enclave,
submit the optimized bundle and settle the mempool from the receipt.

Ops pulled for a round stay in the mempool marked in-flight until the
receipt says what happened to them, so a crash between pull and receipt
cannot lose an op.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .chain import ChainState, ExecutionReceipt
from .core_types import OptimizedBundle, RuleId, UserOp
from .enclave import EnclaveIdentity, EnclaveOutput, tee_execute
from .gas_model import GasMode
from .merkle_state import StateTree
from .persistence import Archive
from .routing import BundlerRegistry, assign_index
from .rules import RuleParams

logger = logging.getLogger(__name__)

DEFAULT_MAX_BATCH = 1000

Key = Tuple[bytes, int]


class Mempool:
    """Shared pending-op pool with requeue priority and in-flight marking."""

    def __init__(self):
        self.pending: List[UserOp] = []
        self.requeued: List[UserOp] = []
        self.in_flight: Dict[Key, Tuple[UserOp, bytes, int]] = {}
        self.terminal: Dict[Key, Tuple[str, int]] = {}
        self._keys: Dict[Key, UserOp] = {}
        # called as on_terminal(op, disposition, block) when an op leaves the pool
        self.on_terminal: Optional[Callable[[UserOp, str, int], None]] = None

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: Key) -> bool:
        return key in self._keys

    def ops(self) -> List[UserOp]:
        return list(self._keys.values())

    def senders(self) -> List[bytes]:
        return [k[0] for k in self._keys]

    def add(self, op: UserOp, block: int = 0) -> bool:
        """Queue ``op``; refuses a (sender, nonce) already queued or executed."""
        key = op.key
        if key in self._keys or self.terminal.get(key, ("",))[0] == "executed":
            return False
        self._keys[key] = op
        self.pending.append(op)
        self.terminal.pop(key, None)
        return True

    def pull(self, account: bytes, registry: BundlerRegistry, block: int, max_batch: int) -> Dict[RuleId, List[UserOp]]:
        if account not in registry:
            return {}
        slot = registry.active.index(account)
        out: Dict[RuleId, List[UserOp]] = {}
        for op in self.requeued + self.pending:
            key = op.key
            if key in self.in_flight:
                continue
            if assign_index(op.sender, block, registry) != slot:
                continue
            batch = out.setdefault(op.rule, [])
            if len(batch) >= max_batch:
                continue
            batch.append(op)
            self.in_flight[key] = (op, account, block)
        return out

    def _remove(self, key: Key) -> Optional[UserOp]:
        op = self._keys.pop(key, None)
        if op is None:
            return None
        self.in_flight.pop(key, None)
        for queue in (self.requeued, self.pending):
            for i, o in enumerate(queue):
                if o.key == key:
                    del queue[i]
                    break
        return op

    def complete(self, ops: Iterable[UserOp], block: int) -> None:
        for op in ops:
            if self._remove(op.key) is not None:
                self._finish(op, "executed", block)

    def drop(self, ops: Iterable[UserOp], reason: str, block: int) -> None:
        for op in ops:
            if self._remove(op.key) is not None:
                self._finish(op, reason, block)

    def _finish(self, op: UserOp, disposition: str, block: int) -> None:
        self.terminal[op.key] = (disposition, block)
        if self.on_terminal is not None:
            self.on_terminal(op, disposition, block)

    def requeue(self, ops: Iterable[UserOp]) -> None:
        for op in ops:
            key = op.key
            if key not in self._keys:
                continue
            self.in_flight.pop(key, None)
            if op in self.pending:
                self.pending.remove(op)
            if op not in self.requeued:
                self.requeued.append(op)

    def release_in_flight(self, before_block: int) -> List[UserOp]:
        """Requeue ops pulled before ``before_block`` that never got a receipt."""
        stale = [op for op, _, b in self.in_flight.values() if b < before_block]
        self.requeue(stale)
        return stale


def pull_assigned(mempool: Mempool, node: "BundlerNode", registry: BundlerRegistry, block: int) -> Dict[RuleId, List[UserOp]]:
    return mempool.pull(node.account, registry, block, node.max_batch)


def pre_validate(ops: Sequence[UserOp], chain_view: ChainState) -> List[UserOp]:
    """Host-side filter: user signature, contiguous nonce, positive cost, no future ops."""
    expected: Dict[bytes, int] = {}
    kept = []
    for op in ops:
        if op.gas_cost <= 0 or op.submit_block > chain_view.height:
            continue
        want = expected.get(op.sender, chain_view.next_nonce(op.sender))
        if op.nonce != want:
            continue
        if not op.has_valid_signature():
            continue
        expected[op.sender] = want + 1
        kept.append(op)
    return kept


@dataclass
class PreparedBundle:
    rule: RuleId
    block: int
    pulled: List[UserOp]
    filtered: List[UserOp]
    output: EnclaveOutput
    bundle: Optional[OptimizedBundle]


class BundlerNode:
    def __init__(
        self,
        account: bytes,
        enclave: EnclaveIdentity,
        params: RuleParams,
        max_batch: int = DEFAULT_MAX_BATCH,
        mode: GasMode = GasMode.GASLITE,
    ):
        self.account = account
        self.enclave = enclave
        self.params = params
        self.max_batch = max_batch
        self.mode = mode
        self.local_trees: Dict[RuleId, StateTree] = {r: StateTree(r) for r in RuleId}
        self.unavailable: set = set()
        self._missing: Dict[RuleId, bytes] = {}
        self.events: List[dict] = []

    def __repr__(self) -> str:
        return f"BundlerNode({self.account.hex()[:10]})"

    def refresh(self, chain: ChainState, archive: Archive) -> None:
        """Bring every local tree to the chain's committed root."""
        self.unavailable.clear()
        for rule in RuleId:
            root = chain.current_root(rule)
            if self.local_trees[rule].root == root:
                continue
            tree = archive.tree_at(rule, root)
            if tree is None:
                self.unavailable.add(rule)
                if self._missing.get(rule) != root:
                    logger.warning("%r: cannot obtain state for %s root %s", self, rule.name, root.hex()[:12])
                self._missing[rule] = root
            else:
                self.local_trees[rule] = tree

    def prepare(self, rule: RuleId, pulled: List[UserOp], chain: ChainState, mempool: Mempool) -> PreparedBundle:
        """Pre-validate and run the enclave; no chain mutation."""
        block = chain.height
        valid = pre_validate(pulled, chain)
        valid_keys = {op.key for op in valid}
        filtered = [op for op in pulled if op.key not in valid_keys]
        mempool.drop(filtered, "pre_validate", block)
        bundler_id = chain.registry.id_of(self.account)
        out = tee_execute(valid, self.local_trees[rule], self.params, self.enclave, block, bundler_id)
        bundle = None
        if out.accepted_ops:
            bundle = OptimizedBundle(
                tuple(out.accepted_ops), rule, bundler_id, out.old_root, out.new_root, out.attestation, block
            )
        return PreparedBundle(rule, block, list(pulled), filtered, out, bundle)

    def submit(
        self, prepared: PreparedBundle, chain: ChainState, mempool: Mempool, archive: Archive
    ) -> Optional[ExecutionReceipt]:
        rule, block, out = prepared.rule, prepared.block, prepared.output
        rejected = [op for op, _ in out.rejected_ops]
        receipt = None
        if prepared.bundle is not None:
            receipt = chain.handle_ops(prepared.bundle, self.mode, self.account)
        if receipt is None or receipt.accepted:
            if receipt is not None:
                mempool.complete(out.accepted_ops, block)
                self.local_trees[rule] = out.tree
            if chain.current_root(rule) == out.old_root or receipt is not None:
                self._settle_rejected(out, mempool, block)
            else:
                # judged against a root that is no longer current: let a fresh round decide
                mempool.requeue(rejected)
        else:
            # rejections inside a failed bundle may have depended on ops that never landed
            mempool.requeue(list(receipt.requeue) + rejected)
            self.refresh(chain, archive)
        self.events.append(
            {
                "type": "round",
                "block": block,
                "bundler": self.account.hex(),
                "rule": int(rule),
                "pulled": len(prepared.pulled),
                "pre_filtered": len(prepared.filtered),
                "accepted": len(out.accepted_ops),
                "rejected": len(out.rejected_ops),
                "receipt": receipt.status.value if receipt else "none",
                "reason": receipt.reason if receipt else "",
            }
        )
        return receipt

    def build_and_submit(
        self, rule: RuleId, ops: List[UserOp], chain: ChainState, mempool: Mempool, archive: Archive
    ) -> Optional[ExecutionReceipt]:
        return self.submit(self.prepare(rule, ops, chain, mempool), chain, mempool, archive)

    def run_round(self, chain: ChainState, mempool: Mempool, archive: Archive) -> List[ExecutionReceipt]:
        """Refresh, pull and submit one bundle per rule, sequentially."""
        receipts = []
        self.refresh(chain, archive)
        pulled = mempool.pull(self.account, chain.registry, chain.height, self.max_batch)
        for rule in sorted(pulled):
            if rule in self.unavailable:
                mempool.requeue(pulled[rule])
                continue
            r = self.build_and_submit(rule, pulled[rule], chain, mempool, archive)
            if r is not None:
                receipts.append(r)
        return receipts

    def _settle_rejected(self, out: EnclaveOutput, mempool: Mempool, block: int) -> None:
        # time is the op's signed submit_block, so a rejection against the
        # committed root never heals on retry
        for op, decision in out.rejected_ops:
            mempool.drop([op], f"rule:{decision.reason.name}", block)
