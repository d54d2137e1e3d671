import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import pytest
from hypothesis import HealthCheck, settings

from gaslite.chain import ETH, ChainConfig, ChainState
from gaslite.core_types import OptimizedBundle, RuleId, UserOp, address_of, derive_private_key
from gaslite.enclave import EnclaveIdentity, tee_execute
from gaslite.merkle_state import StateTree
from gaslite.routing import assign
from gaslite.rules import RuleParams

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

VECTORS = Path(__file__).parent / "vectors"


@pytest.fixture(scope="session")
def golden():
    return json.loads((VECTORS / "golden.json").read_text())


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR)


def key_for(label: str) -> bytes:
    return derive_private_key(label.encode())


def addr_for(label: str) -> bytes:
    return address_of(key_for(label))


def make_op(label: str, rule=RuleId.RULE1, gas=30_000, nonce=0, balance=0, block=1) -> UserOp:
    key = key_for(label)
    return UserOp(address_of(key), rule, gas, nonce, balance, block).signed(key)


@dataclass
class Net:
    """A chain with staked bundlers, each with its own enclave and local trees."""

    chain: ChainState
    accounts: List[bytes]
    enclaves: List[EnclaveIdentity]
    params: RuleParams
    trees: Dict[RuleId, StateTree] = field(default_factory=lambda: {r: StateTree(r) for r in RuleId})
    reporter: bytes = b""

    def fund_user(self, label: str, wei: int = 0) -> bytes:
        a = addr_for(label)
        self.chain.balances[a] = wei
        return a

    def owner(self, sender: bytes, block=None) -> int:
        block = self.chain.height if block is None else block
        return self.accounts.index(assign(sender, block, self.chain.registry).account)

    def bundle(self, ops, idx=None, tree=None, block=None):
        """Honest enclave bundle built by bundler ``idx`` (default: the routed one)."""
        ops = list(ops)
        block = self.chain.height if block is None else block
        idx = self.owner(ops[0].sender, block) if idx is None else idx
        rule = ops[0].rule
        tree = tree or self.trees[rule]
        bid = self.chain.registry.id_of(self.accounts[idx])
        out = tee_execute(ops, tree, self.params, self.enclaves[idx], block, bid)
        b = OptimizedBundle(tuple(out.accepted_ops), rule, bid, out.old_root, out.new_root, out.attestation, block)
        return b, out

    def commit(self, ops, idx=None):
        b, out = self.bundle(ops, idx)
        r = self.chain.handle_ops(b)
        if r.accepted:
            self.trees[b.rule] = out.tree
        return b, r


def make_net(n_bundlers=3, params=None, config=None, height=1) -> Net:
    accounts = [addr_for(f"bundler/{i}") for i in range(n_bundlers)]
    treasury, reporter = addr_for("treasury"), addr_for("reporter")
    balances = {a: 20 * ETH for a in accounts}
    balances[treasury] = 4_000 * ETH
    balances[reporter] = 0
    chain = ChainState(config or ChainConfig(), balances=balances)
    for r in RuleId:
        chain.fund_paymaster(r, treasury, 1_000 * ETH)
    enclaves = []
    for i, a in enumerate(accounts):
        e = EnclaveIdentity.create(f"test/{i}".encode())
        chain.allow_enclave(e.mrenclave, e.pubkey)
        chain.register_bundler(a, 10 * ETH, immediate=True)
        enclaves.append(e)
    while chain.height < height:
        chain.advance_block()
    return Net(chain, accounts, enclaves, params or RuleParams(), reporter=reporter)


@pytest.fixture
def net():
    return make_net()
