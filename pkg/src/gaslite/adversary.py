"""Scripted attackers run inside a simulated world.

Each script kind has one expected chain outcome; :func:`execute_attack`
plays the attack against the live world and reports whether that outcome
was observed. The world is duck-typed (see ``simulator.World``): it needs
``chain``, ``mempool``, ``archive``, ``nodes``, ``users``, ``reporter``,
``committed``, ``step()`` and ``user_balances()``.

Attack traffic comes from throwaway harness accounts derived from labels, so
it never collides with workload nonces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Tuple

from .chain import BundlerStatus, Clause, ReceiptStatus
from .core_types import (
    Attestation,
    OptimizedBundle,
    RuleId,
    UserOp,
    address_of,
    attested_payload,
    batch_digest,
    derive_private_key,
    keccak256,
    sign_digest,
)
from .enclave import tee_execute
from .errors import NotSlashable
from .rules import RuleParams, dynamic_limit
from .merkle_state import UserState
from .routing import assign_index, verify_assignment

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    FORGE_ROOT_NO_KEY = "ForgeRootNoKey"
    FORGE_ROOT_STOLEN_KEY = "ForgeRootStolenKey"
    REPLAY_ATTESTATION = "ReplayAttestation"
    SKIP_ROUTING = "SkipRouting"
    QUOTA_DOUBLE_SPEND = "QuotaDoubleSpendAcrossBundlers"
    WITHHOLD_BUNDLE = "WithholdBundle"


EXPECTED = {
    AttackKind.FORGE_ROOT_NO_KEY: "rejected at clause c, no state change",
    AttackKind.FORGE_ROOT_STOLEN_KEY: "forged root accepted, unsigned victim op reverts, zero user-balance deltas",
    AttackKind.REPLAY_ATTESTATION: "replayed bundle rejected at clause a, spliced attestation rejected at clause c",
    AttackKind.SKIP_ROUTING: "rejected at clause e, bundler slashed on report",
    AttackKind.QUOTA_DOUBLE_SPEND: "second bundle rejected stale at clause a, combined cost within the rule limit",
    AttackKind.WITHHOLD_BUNDLE: "victim op executed within |B| blocks by the next bundler",
}


@dataclass(frozen=True)
class AttackScript:
    kind: AttackKind
    at_block: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class AttackOutcome:
    kind: AttackKind
    block: int
    ok: bool
    expected: str
    observed: str
    details: Dict[str, Any] = field(default_factory=dict)

    def as_event(self) -> dict:
        return {
            "type": "attack",
            "kind": self.kind.value,
            "block": self.block,
            "ok": self.ok,
            "expected": self.expected,
            "observed": self.observed,
            "details": self.details,
        }


# --- helpers ------------------------------------------------------------------


def _active_node(world, index: int):
    active = [n for n in world.nodes if world.chain.status_of(n.account) is BundlerStatus.ACTIVE]
    if not active:
        return None
    return active[index % len(active)]


def harness_account(world, label: str, want=None) -> Tuple[bytes, bytes]:
    """Fresh (private key, address) whose routing satisfies ``want(address)``."""
    for i in range(10_000):
        key = derive_private_key(f"adversary/{world.scenario.seed}/{label}/{i}".encode())
        addr = address_of(key)
        if want is None or want(addr):
            return key, addr
    raise RuntimeError(f"no harness account satisfies the routing constraint for {label}")


def routed_to(world, account: bytes, block: int):
    def want(addr: bytes) -> bool:
        reg = world.chain.registry
        return reg.active[assign_index(addr, block, reg)] == account

    return want


def signed_op(world, key: bytes, sender: bytes, rule: RuleId, gas_cost: int, nonce: Optional[int] = None) -> UserOp:
    chain = world.chain
    op = UserOp(
        sender,
        rule,
        gas_cost,
        chain.next_nonce(sender) if nonce is None else nonce,
        chain.balance_of(sender),
        chain.height,
    )
    return op.signed(key)


def _bundle_with_key(world, node, rule: RuleId, ops, old_root: bytes, new_root: bytes, block: int, key: bytes):
    """Bundle in ``node``'s name whose attestation is signed with ``key``."""
    bid = world.chain.registry.id_of(node.account)
    pubkey = node.enclave.pubkey
    payload = attested_payload(old_root, new_root, rule, bid.account, block, batch_digest(ops))
    att = Attestation(node.enclave.mrenclave, pubkey, block, sign_digest(key, payload))
    return OptimizedBundle(tuple(ops), rule, bid, old_root, new_root, att, block)


def _forged_root(*parts: bytes) -> bytes:
    return keccak256(b"forged-root", *parts)


def _snapshot(world):
    chain = world.chain
    return {r: chain.current_root(r) for r in RuleId}, world.user_balances(), dict(chain.nonces)


# --- attacks ------------------------------------------------------------------


def _forge_root_no_key(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    rule = RuleId.parse(script.params.get("rule", 1))
    node = _active_node(world, int(script.params.get("bundler", 0)))
    h = chain.height
    ukey, user = harness_account(world, f"nokey/{h}", routed_to(world, node.account, h))
    op = signed_op(world, ukey, user, rule, 50_000)
    old = chain.current_root(rule)
    # allowlisted identity, but the attacker only has its own key
    rogue_key = derive_private_key(f"rogue/{h}".encode())
    bundle = _bundle_with_key(world, node, rule, [op], old, _forged_root(old), h, rogue_key)
    before = _snapshot(world)
    verified = chain.verify_bundle(bundle)
    receipt = chain.handle_ops(bundle, world.scenario.gas_mode, node.account)
    after = _snapshot(world)
    ok = (
        not verified
        and receipt.status is ReceiptStatus.REJECTED
        and receipt.failure is Clause.SIGNATURE
        and before == after
    )
    return AttackOutcome(
        script.kind, h, ok, EXPECTED[script.kind],
        f"{receipt.status.value} clause={receipt.failure.value if receipt.failure else '-'} state_changed={before != after}",
        {"bundler": node.account.hex(), "rule": int(rule)},
    )


def _forge_root_stolen_key(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    rule = RuleId.parse(script.params.get("rule", 1))
    node = _active_node(world, int(script.params.get("bundler", 0)))
    h = chain.height
    stolen = node.enclave.signing_key
    balances_before = world.user_balances()
    ukey, user = harness_account(world, f"stolen/{h}", routed_to(world, node.account, h))
    op = signed_op(world, ukey, user, rule, 50_000)
    old = chain.current_root(rule)
    forged = _forged_root(old, b"stolen")
    bundle = _bundle_with_key(world, node, rule, [op], old, forged, h, stolen)
    verified = chain.verify_bundle(bundle)
    first = chain.handle_ops(bundle, world.scenario.gas_mode, node.account)

    # same key, now trying to move a victim's funds without the victim's signature
    reg = chain.registry
    victims = [
        u for u in world.users
        if verify_assignment(UserOp(u.address, rule, 1, 0, 0, h), reg.id_of(node.account), h, reg, chain.config.grace)
    ]
    if victims:
        victim = max(victims, key=lambda u: (chain.balance_of(u.address), u.index))
        vaddr = victim.address
    else:
        _, vaddr = harness_account(world, f"victim/{h}", routed_to(world, node.account, h))
    attacker_key = derive_private_key(f"thief/{h}".encode())
    nonce_before = chain.next_nonce(vaddr)
    theft = signed_op(world, attacker_key, vaddr, rule, 60_000)
    cur = chain.current_root(rule)
    bundle2 = _bundle_with_key(world, node, rule, [theft], cur, _forged_root(cur, b"theft"), h, stolen)
    second = chain.handle_ops(bundle2, world.scenario.gas_mode, node.account)
    balances_after = world.user_balances()
    deltas = {a.hex(): balances_after[a] - balances_before[a] for a in balances_before if balances_after[a] != balances_before[a]}
    ok = (
        verified
        and first.accepted
        and chain.current_root(rule) == forged
        and second.status is ReceiptStatus.REVERTED
        and "signature" in second.reason
        and not deltas
        and chain.next_nonce(vaddr) == nonce_before
    )
    world.forged_rules.add(rule)
    return AttackOutcome(
        script.kind, h, ok, EXPECTED[script.kind],
        f"forged={first.status.value} theft={second.status.value} ({second.reason}) balance_deltas={len(deltas)}",
        {"bundler": node.account.hex(), "rule": int(rule), "forged_root": forged.hex(), "victim": vaddr.hex()},
    )


def _replay_attestation(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    want_rule = script.params.get("rule")
    want_rule = None if want_rule is None else RuleId.parse(want_rule)
    for _ in range(4 * max(1, len(chain.registry)) + 8):
        past = [b for b, _ in world.committed if want_rule is None or b.rule is want_rule]
        if past:
            break
        world.step()
    else:
        return AttackOutcome(script.kind, chain.height, False, EXPECTED[script.kind], "no committed bundle to replay")
    original = past[-1]
    h = chain.height
    node = next((n for n in world.nodes if n.account == original.bundler.account), None)
    before = _snapshot(world)
    # anyone can copy calldata; the replayer is the original bundler here so the sender check passes
    replay = chain.handle_ops(original, world.scenario.gas_mode, original.bundler.account)
    # splice the old attestation onto a bundle built on the current root
    cur = chain.current_root(original.rule)
    splice = OptimizedBundle(
        original.ops, original.rule, original.bundler, cur, _forged_root(cur, b"splice"), original.attestation, h
    )
    spliced = chain.handle_ops(splice, world.scenario.gas_mode, original.bundler.account)
    after = _snapshot(world)
    ok = (
        replay.status is ReceiptStatus.REJECTED
        and replay.failure is Clause.ROOT
        and spliced.status is ReceiptStatus.REJECTED
        and spliced.failure in (Clause.SIGNATURE, Clause.ATTESTATION)
        and before == after
    )
    return AttackOutcome(
        script.kind, h, ok, EXPECTED[script.kind],
        f"replay clause={replay.failure.value if replay.failure else '-'} "
        f"splice clause={spliced.failure.value if spliced.failure else '-'}",
        {"bundle": original.bundle_id.hex(), "rule": int(original.rule), "node_known": node is not None},
    )


def _skip_routing(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    rule = RuleId.parse(script.params.get("rule", 1))
    report = bool(script.params.get("report", True))
    node = _active_node(world, int(script.params.get("bundler", 0)))
    h = chain.height
    reg = chain.registry
    grace = chain.config.grace
    if len(reg) <= grace + 1:
        return AttackOutcome(
            script.kind, h, False, EXPECTED[script.kind],
            f"needs more than {grace + 1} bundlers so some user is not routed to the attacker",
        )
    bid = reg.id_of(node.account)

    def not_mine(addr: bytes) -> bool:
        return not verify_assignment(UserOp(addr, rule, 1, 0, 0, h), bid, h, reg, grace)

    ukey, user = harness_account(world, f"skip/{h}", not_mine)
    op = signed_op(world, ukey, user, rule, 50_000)
    node.refresh(chain, world.archive)
    out = tee_execute([op], node.local_trees[rule], node.params, node.enclave, h, bid)
    bundle = OptimizedBundle(tuple(out.accepted_ops), rule, bid, out.old_root, out.new_root, out.attestation, h)
    before = _snapshot(world)
    receipt = chain.handle_ops(bundle, world.scenario.gas_mode, node.account)
    after = _snapshot(world)
    ok = receipt.status is ReceiptStatus.REJECTED and receipt.failure is Clause.ROUTING and before == after
    details = {"bundler": node.account.hex(), "rule": int(rule)}
    observed = f"{receipt.status.value} clause={receipt.failure.value if receipt.failure else '-'}"
    if report:
        try:
            slash = world.report(bundle)
        except NotSlashable as exc:
            ok = False
            observed += f" report failed: {exc}"
        else:
            ok = ok and slash.reporter_reward + slash.burned == slash.stake
            details.update(stake=slash.stake, reporter_reward=slash.reporter_reward, burned=slash.burned)
            observed += " slashed"
    return AttackOutcome(script.kind, h, ok, EXPECTED[script.kind], observed, details)


def rule_limit(rule: RuleId, params: RuleParams) -> int:
    """Largest combined cost a fresh user may spend at once under ``rule``."""
    if rule is RuleId.RULE1 or rule is RuleId.RULE2:
        return params.l_daily
    if rule is RuleId.RULE3:
        return params.l_win
    return dynamic_limit(UserState(), 0, params)


def _quota_double_spend(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    rule = RuleId.parse(script.params.get("rule", 1))
    h = chain.height
    reg = chain.registry
    if len(reg) < 2 or chain.config.grace < 1:
        return AttackOutcome(script.kind, h, False, EXPECTED[script.kind], "needs two bundlers and grace >= 1")
    ukey, user = harness_account(world, f"double/{h}")
    first_node = next(n for n in world.nodes if n.account == reg.active[assign_index(user, h, reg)])
    second_node = next(n for n in world.nodes if n.account == reg.active[assign_index(user, h - 1, reg)])
    params = world.scenario.rule_params
    limit = rule_limit(rule, params)
    cost = limit * 3 // 5
    if rule is RuleId.RULE3:
        cost = min(cost, params.l_one)
    nonce = chain.next_nonce(user)
    op_a = signed_op(world, ukey, user, rule, cost, nonce)
    op_b = signed_op(world, ukey, user, rule, cost - 1, nonce)
    # both bundlers build from the same committed root before either submits
    for node in (first_node, second_node):
        node.refresh(chain, world.archive)
    prep_a = first_node.prepare(rule, [op_a], chain, world.mempool)
    prep_b = second_node.prepare(rule, [op_b], chain, world.mempool)
    if prep_a.bundle is None or prep_b.bundle is None:
        return AttackOutcome(script.kind, h, False, EXPECTED[script.kind], "enclave refused a single op under the limit")
    ra = chain.handle_ops(prep_a.bundle, world.scenario.gas_mode, first_node.account)
    rb = chain.handle_ops(prep_b.bundle, world.scenario.gas_mode, second_node.account)
    # the user tries again through the loser, now on the fresh root
    second_node.refresh(chain, world.archive)
    retry = signed_op(world, ukey, user, rule, cost - 1)
    prep_c = second_node.prepare(rule, [retry], chain, world.mempool)
    rc = None
    if prep_c.bundle is not None:
        rc = chain.handle_ops(prep_c.bundle, world.scenario.gas_mode, second_node.account)
    spent = sum(op.gas_cost for b, _ in world.committed for op in b.ops if op.sender == user and op.rule is rule)
    ok = ra.accepted and rb.status is ReceiptStatus.REJECTED and rb.stale and (rc is None or not rc.accepted)
    ok = ok and spent <= limit
    return AttackOutcome(
        script.kind, h, ok, EXPECTED[script.kind],
        f"first={ra.status.value} second={rb.status.value} clause={rb.failure.value if rb.failure else '-'} "
        f"retry={'no bundle' if rc is None else rc.status.value} spent={spent} limit={limit}",
        {"rule": int(rule), "user": user.hex(), "spent": spent, "limit": limit},
    )


def _withhold_bundle(world, script: AttackScript) -> AttackOutcome:
    chain = world.chain
    rule = RuleId.parse(script.params.get("rule", 1))
    node = _active_node(world, int(script.params.get("bundler", 0)))
    h = chain.height
    n_bundlers = len(chain.registry)
    duration = int(script.params.get("blocks", n_bundlers))
    ukey, user = harness_account(world, f"withhold/{h}", routed_to(world, node.account, h))
    op = signed_op(world, ukey, user, rule, 40_000)
    world.submit_op(op)
    world.withholding[node.account] = h + duration
    executed_at = None
    for _ in range(n_bundlers + 1):
        world.step()
        state = world.mempool.terminal.get(op.key)
        if state is not None:
            if state[0] == "executed":
                executed_at = state[1]
            break
    latency = None if executed_at is None else executed_at - h
    slashed = chain.status_of(node.account) is BundlerStatus.SLASHED
    ok = latency is not None and latency <= n_bundlers and not slashed
    return AttackOutcome(
        script.kind, h, ok, EXPECTED[script.kind],
        f"latency={latency} bound={n_bundlers} withholder_slashed={slashed}",
        {"bundler": node.account.hex(), "latency": latency, "bundlers": n_bundlers},
    )


_HANDLERS = {
    AttackKind.FORGE_ROOT_NO_KEY: _forge_root_no_key,
    AttackKind.FORGE_ROOT_STOLEN_KEY: _forge_root_stolen_key,
    AttackKind.REPLAY_ATTESTATION: _replay_attestation,
    AttackKind.SKIP_ROUTING: _skip_routing,
    AttackKind.QUOTA_DOUBLE_SPEND: _quota_double_spend,
    AttackKind.WITHHOLD_BUNDLE: _withhold_bundle,
}


def execute_attack(script: AttackScript, world) -> AttackOutcome:
    """Play ``script`` against ``world`` at its current height."""
    if _active_node(world, 0) is None:
        return AttackOutcome(script.kind, world.chain.height, False, EXPECTED[script.kind], "no active bundler")
    outcome = _HANDLERS[AttackKind(script.kind)](world, script)
    logger.info("attack %s at %d: %s (%s)", outcome.kind.value, outcome.block, "ok" if outcome.ok else "UNEXPECTED",
                outcome.observed)
    return outcome
