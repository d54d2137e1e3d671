"""In-process L1: entry point execution, on-chain bundle verification, root
history, bundler staking and slashing, the delayed reward buffer, and the gas
ledger.

``ChainState`` is single-writer. Every mutation goes through one of its
methods; bundlers interact with it only by submitting bundles and reading
receipts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Set, Tuple

from .core_types import OptimizedBundle, RuleId, UserOp, op_digest, verify_signature
from .errors import DuplicateBundler, NotSlashable, SlashedBundler, UnknownBundler
from .gas_model import CostTable, GasMode, price_bundle
from .merkle_state import genesis_root
from .routing import BundlerRegistry, rotate_membership, verify_assignment

logger = logging.getLogger(__name__)

ETH = 10**18


@dataclass(frozen=True)
class ChainConfig:
    freshness_window: int = 2
    grace: int = 1
    reward_delay: int = 20
    reporter_share_bps: int = 5_000
    fee_per_op: int = 10**13
    gas_price: int = 10**9
    min_stake: int = 10 * ETH
    balance_tolerance: int = 0

    def __post_init__(self):
        if not 0 <= self.reporter_share_bps <= 10_000:
            raise ValueError("reporter_share_bps must be within [0, 10000]")
        for name in ("freshness_window", "grace", "reward_delay", "fee_per_op", "gas_price", "min_stake",
                     "balance_tolerance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class BundlerStatus(str, Enum):
    PENDING = "pending"  # staked, joins the registry at the next block
    ACTIVE = "active"
    SLASHED = "slashed"
    EXITED = "exited"


@dataclass
class BundlerRecord:
    stake: int
    status: BundlerStatus
    joined_block: int


@dataclass(frozen=True)
class RewardEntry:
    amount: int
    unlock_block: int
    rule: RuleId


@dataclass(frozen=True)
class GasEvent:
    block: int
    bundle_id: bytes
    mode: GasMode
    rule: RuleId
    ops: int
    gas: int


class Clause(str, Enum):
    """Which verification condition a bundle failed."""

    ROOT = "a"
    ATTESTATION = "b"
    SIGNATURE = "c"
    BUNDLER = "d"
    ROUTING = "e"


class ReceiptStatus(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    REVERTED = "reverted"


@dataclass(frozen=True)
class ExecutionReceipt:
    status: ReceiptStatus
    bundle_id: bytes
    rule: RuleId
    block: int
    bundler: bytes
    requeue: Tuple[UserOp, ...] = ()
    failure: Optional[Clause] = None
    attributable: bool = False
    reason: str = ""
    gas: int = 0

    @property
    def accepted(self) -> bool:
        return self.status is ReceiptStatus.ACCEPTED

    @property
    def stale(self) -> bool:
        return self.failure is Clause.ROOT and not self.attributable


@dataclass(frozen=True)
class SlashOutcome:
    bundler: bytes
    stake: int
    reporter: bytes
    reporter_reward: int
    burned: int
    forfeited_rewards: int
    clause: Optional[Clause]


@dataclass
class RootHistory:
    current_root: bytes
    history: List[Tuple[int, bytes]]

    def __contains__(self, root: bytes) -> bool:
        return any(r == root for _, r in self.history)


CommitListener = Callable[[OptimizedBundle, ExecutionReceipt], None]


class ChainState:
    def __init__(
        self,
        config: Optional[ChainConfig] = None,
        cost_table: Optional[CostTable] = None,
        balances: Optional[Dict[bytes, int]] = None,
        paymaster_pools: Optional[Dict[RuleId, int]] = None,
    ):
        self.config = config or ChainConfig()
        self.cost_table = cost_table or CostTable()
        self.height = 0
        g = genesis_root()
        self.roots: Dict[RuleId, RootHistory] = {r: RootHistory(g, [(0, g)]) for r in RuleId}
        self.bundlers: Dict[bytes, BundlerRecord] = {}
        self.registry = BundlerRegistry()
        self.reward_buffer: Dict[bytes, List[RewardEntry]] = {}
        self.mrenclave_allowlist: Set[bytes] = set()
        self.enclave_keys: Set[bytes] = set()
        self.balances: Dict[bytes, int] = dict(balances or {})
        self.paymaster_pools: Dict[RuleId, int] = {r: 0 for r in RuleId}
        self.paymaster_pools.update(paymaster_pools or {})
        self.nonces: Dict[bytes, int] = {}
        self.burned = 0
        self.gas_fees = 0
        self.gas_ledger: List[GasEvent] = []
        self.submitted: Dict[bytes, ExecutionReceipt] = {}
        self.listeners: List[CommitListener] = []
        self.injected_reverts: Set[bytes] = set()
        self._queued_joins: List[bytes] = []
        self._queued_leaves: List[bytes] = []

    # -- views
    def current_root(self, rule: RuleId) -> bytes:
        return self.roots[RuleId(rule)].current_root

    def next_nonce(self, sender: bytes) -> int:
        return self.nonces.get(sender, 0)

    def balance_of(self, account: bytes) -> int:
        return self.balances.get(account, 0)

    def total_wei(self) -> int:
        return (
            sum(self.balances.values())
            + sum(self.paymaster_pools.values())
            + sum(r.stake for r in self.bundlers.values())
            + sum(e.amount for entries in self.reward_buffer.values() for e in entries)
            + self.burned
            + self.gas_fees
        )

    def status_of(self, account: bytes) -> Optional[BundlerStatus]:
        rec = self.bundlers.get(account)
        return rec.status if rec else None

    # -- governance
    def allow_enclave(self, mrenclave: bytes, pubkey: bytes) -> None:
        self.mrenclave_allowlist.add(mrenclave)
        self.enclave_keys.add(pubkey)

    def fund_paymaster(self, rule: RuleId, source: bytes, amount: int) -> None:
        self._debit(source, amount)
        self.paymaster_pools[RuleId(rule)] += amount

    def register_bundler(self, account: bytes, stake: int, immediate: bool = False) -> None:
        """Lock ``stake`` and queue ``account`` to join at the next block boundary."""
        rec = self.bundlers.get(account)
        if rec is not None:
            if rec.status is BundlerStatus.SLASHED:
                raise SlashedBundler(f"{account.hex()} was slashed and cannot rejoin")
            if rec.status is not BundlerStatus.EXITED:
                raise DuplicateBundler(account.hex())
        if stake < self.config.min_stake:
            raise ValueError(f"stake {stake} below minimum {self.config.min_stake}")
        self._debit(account, stake)
        self.bundlers[account] = BundlerRecord(stake, BundlerStatus.PENDING, self.height)
        if immediate:
            self.registry = rotate_membership(self.registry, [account], [], self.height)
            self.bundlers[account].status = BundlerStatus.ACTIVE
        else:
            self._queued_joins.append(account)

    def request_exit(self, account: bytes) -> None:
        rec = self.bundlers.get(account)
        if rec is None or rec.status is not BundlerStatus.ACTIVE:
            raise UnknownBundler(account.hex())
        if account not in self._queued_leaves:
            self._queued_leaves.append(account)

    def inject_revert(self, op: UserOp) -> None:
        """Make the next execution of ``op`` revert (one shot)."""
        self.injected_reverts.add(op_digest(op))

    def advance_block(self) -> "ChainState":
        self.height += 1
        joins = [a for a in self._queued_joins if self.bundlers[a].status is BundlerStatus.PENDING]
        leaves = [a for a in self._queued_leaves if a in self.registry]
        if joins or leaves:
            self.registry = rotate_membership(self.registry, joins, leaves, self.height)
        for a in joins:
            self.bundlers[a].status = BundlerStatus.ACTIVE
            self.bundlers[a].joined_block = self.height
        for a in leaves:
            rec = self.bundlers[a]
            if rec.status is BundlerStatus.ACTIVE:
                rec.status = BundlerStatus.EXITED
                self.balances[a] = self.balances.get(a, 0) + rec.stake
                rec.stake = 0
        self._queued_joins.clear()
        self._queued_leaves.clear()
        return self

    # -- verification
    def check_bundle(self, bundle: OptimizedBundle) -> Optional[Tuple[Clause, bool]]:
        """First failed clause and whether the failure is the bundler's fault, or None."""
        cfg = self.config
        hist = self.roots[bundle.rule]
        if bundle.old_root != hist.current_root:
            # a root we once committed means an ordinary race; anything else was made up
            return Clause.ROOT, bundle.old_root not in hist
        att = bundle.attestation
        if att.mrenclave not in self.mrenclave_allowlist or att.enclave_pubkey not in self.enclave_keys:
            return Clause.ATTESTATION, True
        if att.report_block > self.height or self.height - att.report_block > cfg.freshness_window:
            return Clause.ATTESTATION, False
        if not verify_signature(att.enclave_pubkey, bundle.payload(), att.signature):
            return Clause.SIGNATURE, True
        if self.status_of(bundle.bundler.account) is not BundlerStatus.ACTIVE:
            return Clause.BUNDLER, False
        for op in bundle.ops:
            if not verify_assignment(op, bundle.bundler, bundle.submit_block, self.registry, cfg.grace):
                return Clause.ROUTING, True
        return None

    def verify_bundle(self, bundle: OptimizedBundle) -> bool:
        return self.check_bundle(bundle) is None

    # -- execution
    def handle_ops(
        self, bundle: OptimizedBundle, mode: GasMode = GasMode.GASLITE, submitter: Optional[bytes] = None
    ) -> ExecutionReceipt:
        """Verify and execute ``bundle`` atomically.

        ``submitter`` is the transaction sender and defaults to the named
        bundler. A bundle sent by anyone else is rejected without blame, so a
        third party cannot get a bundler slashed by submitting junk in its name.
        """
        bid = bundle.bundle_id
        base = dict(bundle_id=bid, rule=bundle.rule, block=self.height, bundler=bundle.bundler.account)
        if submitter is not None and submitter != bundle.bundler.account:
            return ExecutionReceipt(
                ReceiptStatus.REJECTED, requeue=bundle.ops, failure=Clause.BUNDLER,
                reason="sender is not the named bundler", **base,
            )
        failed = self.check_bundle(bundle)
        if failed is not None:
            clause, attributable = failed
            receipt = ExecutionReceipt(
                ReceiptStatus.REJECTED, requeue=bundle.ops, failure=clause, attributable=attributable,
                reason=f"clause {clause.value} failed", **base,
            )
            # a resubmitted bundle keeps the receipt of its first submission
            self.submitted.setdefault(bid, receipt)
            return receipt

        revert = self._dry_run(bundle)
        if revert is not None:
            receipt = ExecutionReceipt(ReceiptStatus.REVERTED, requeue=bundle.ops, reason=revert, **base)
            self.submitted.setdefault(bid, receipt)
            return receipt

        cfg = self.config
        n = len(bundle.ops)
        gas_cost = sum(op.gas_cost for op in bundle.ops) * cfg.gas_price
        fee = cfg.fee_per_op * n
        self.paymaster_pools[bundle.rule] -= gas_cost + fee
        self.gas_fees += gas_cost
        for op in bundle.ops:
            self.nonces[op.sender] = op.nonce + 1
        self.reward_buffer.setdefault(bundle.bundler.account, []).append(
            RewardEntry(fee, self.height + cfg.reward_delay, bundle.rule)
        )
        hist = self.roots[bundle.rule]
        hist.current_root = bundle.new_root
        hist.history.append((self.height, bundle.new_root))
        gas = price_bundle(self.cost_table, mode, bundle.rule, n)
        self.gas_ledger.append(GasEvent(self.height, bid, GasMode.parse(mode), bundle.rule, n, gas))
        receipt = ExecutionReceipt(ReceiptStatus.ACCEPTED, gas=gas, **base)
        self.submitted[bid] = receipt
        for listener in self.listeners:
            listener(bundle, receipt)
        return receipt

    def _dry_run(self, bundle: OptimizedBundle) -> Optional[str]:
        """Execute against scratch state; return a revert reason or None."""
        cfg = self.config
        nonces: Dict[bytes, int] = {}
        pool = self.paymaster_pools[bundle.rule]
        for i, op in enumerate(bundle.ops):
            # the wallet's own signature check runs on chain regardless of the enclave
            if not op.has_valid_signature():
                return f"op {i}: invalid user signature"
            expected = nonces.get(op.sender, self.next_nonce(op.sender))
            if op.nonce != expected:
                return f"op {i}: nonce {op.nonce} != {expected}"
            nonces[op.sender] = op.nonce + 1
            if op.submit_block > self.height:
                return f"op {i}: submitted in the future"
            if abs(op.wallet_balance - self.balance_of(op.sender)) > cfg.balance_tolerance:
                return f"op {i}: wallet balance snapshot mismatch"
            d = op_digest(op)
            if d in self.injected_reverts:
                self.injected_reverts.discard(d)
                return f"op {i}: injected revert"
            cost = op.gas_cost * cfg.gas_price
            if pool < cost:
                return f"op {i}: paymaster pool depleted"
            pool -= cost
        if pool < cfg.fee_per_op * len(bundle.ops):
            return "paymaster pool cannot cover bundler fee"
        return None

    # -- staking
    def report_misbehavior(self, bundle: OptimizedBundle, reporter: bytes) -> SlashOutcome:
        receipt = self.submitted.get(bundle.bundle_id)
        if receipt is None:
            raise NotSlashable("bundle was never submitted")
        if receipt.status is not ReceiptStatus.REJECTED or not receipt.attributable:
            raise NotSlashable(f"no attributable fault ({receipt.status.value}, {receipt.reason or 'ok'})")
        account = bundle.bundler.account
        rec = self.bundlers.get(account)
        if rec is None or rec.status is BundlerStatus.SLASHED:
            raise NotSlashable("bundler unknown or already slashed")
        stake = rec.stake
        share = stake * self.config.reporter_share_bps // 10_000
        self.balances[reporter] = self.balances.get(reporter, 0) + share
        self.burned += stake - share
        forfeited = 0
        for entry in self.reward_buffer.pop(account, []):
            self.paymaster_pools[entry.rule] += entry.amount
            forfeited += entry.amount
        rec.stake = 0
        rec.status = BundlerStatus.SLASHED
        if account in self.registry and account not in self._queued_leaves:
            self._queued_leaves.append(account)
        if account in self._queued_joins:
            self._queued_joins.remove(account)
        logger.info("slashed %s: stake %d, reporter %d, burned %d", account.hex(), stake, share, stake - share)
        return SlashOutcome(account, stake, reporter, share, stake - share, forfeited, receipt.failure)

    def withdraw_rewards(self, account: bytes) -> int:
        rec = self.bundlers.get(account)
        if rec is None:
            raise UnknownBundler(account.hex())
        if rec.status is BundlerStatus.SLASHED:
            raise SlashedBundler(account.hex())
        entries = self.reward_buffer.get(account, [])
        due = [e for e in entries if e.unlock_block <= self.height]
        self.reward_buffer[account] = [e for e in entries if e.unlock_block > self.height]
        paid = sum(e.amount for e in due)
        self.balances[account] = self.balances.get(account, 0) + paid
        return paid

    def locked_rewards(self, account: bytes) -> int:
        return sum(e.amount for e in self.reward_buffer.get(account, []))

    # -- helpers
    def _debit(self, account: bytes, amount: int) -> None:
        if amount < 0:
            raise ValueError("amount must be non-negative")
        have = self.balances.get(account, 0)
        if have < amount:
            raise ValueError(f"insufficient balance: {have} < {amount}")
        self.balances[account] = have - amount


def verify_bundle(chain: ChainState, bundle: OptimizedBundle) -> bool:
    return chain.verify_bundle(bundle)


def handle_ops(
    chain: ChainState, bundle: OptimizedBundle, mode: GasMode = GasMode.GASLITE, submitter: Optional[bytes] = None
) -> ExecutionReceipt:
    return chain.handle_ops(bundle, mode, submitter)
