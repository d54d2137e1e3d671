"""Software stand-in for the bundler's trusted enclave.

The enclave is a pure batch executor plus a signing key. It trusts the tree it
is handed; root freshness is the chain's job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .core_types import (
    Attestation,
    BundlerId,
    UserOp,
    attested_payload,
    batch_digest,
    derive_private_key,
    keccak256,
    public_key,
    sign_digest,
)
from .errors import RuleMismatch
from .merkle_state import StateTree
from .rules import RuleDecision, RuleParams, apply_op

ENGINE_VERSION = "gaslite-rule-engine/1.0"


def measure(version: str) -> bytes:
    """Code-identity measurement for a rule-engine build."""
    return keccak256(b"mrenclave:", version.encode())


@dataclass(frozen=True)
class EnclaveIdentity:
    mrenclave: bytes
    signing_key: bytes
    pubkey: bytes

    @classmethod
    def create(cls, seed: bytes, version: str = ENGINE_VERSION) -> "EnclaveIdentity":
        key = derive_private_key(b"enclave:" + seed)
        return cls(measure(version), key, public_key(key))

    def __repr__(self) -> str:
        return f"EnclaveIdentity(mrenclave={self.mrenclave.hex()[:12]}, pubkey={self.pubkey.hex()[:12]})"


@dataclass
class EnclaveOutput:
    accepted_ops: List[UserOp]
    rejected_ops: List[Tuple[UserOp, RuleDecision]]
    old_root: bytes
    new_root: bytes
    attestation: Attestation
    tree: StateTree


def make_attestation_report(identity: EnclaveIdentity, payload: bytes, block: int) -> Attestation:
    return Attestation(identity.mrenclave, identity.pubkey, block, sign_digest(identity.signing_key, payload))


def tee_execute(
    batch: Sequence[UserOp],
    tree: StateTree,
    params: RuleParams,
    identity: EnclaveIdentity,
    block: int,
    bundler: BundlerId,
) -> EnclaveOutput:
    """Run ``batch`` in order against a copy of ``tree`` and sign the result.

    Each op sees the state left by the ops before it, so a user cannot spend
    the same quota twice inside one batch.
    """
    for op in batch:
        if op.rule != tree.rule:
            raise RuleMismatch(f"op for {op.rule.name} in a {tree.rule.name} batch")
    old_root = tree.root
    work = tree.copy()
    accepted: List[UserOp] = []
    rejected: List[Tuple[UserOp, RuleDecision]] = []
    for op in batch:
        decision = apply_op(work, op, params)
        if decision.accepted:
            accepted.append(op)
        else:
            rejected.append((op, decision))
    new_root = work.root
    payload = attested_payload(old_root, new_root, tree.rule, bundler.account, block, batch_digest(accepted))
    return EnclaveOutput(
        accepted, rejected, old_root, new_root, make_attestation_report(identity, payload, block), work
    )


def replay_batch(tree: StateTree, ops: Sequence[UserOp], params: RuleParams) -> List[UserOp]:
    """Apply already-accepted ops to ``tree`` in place; return any that no longer pass."""
    return [op for op in ops if not apply_op(tree, op, params).accepted]

