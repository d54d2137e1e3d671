"""Random op traces for the rule oracles, shared by unit and acceptance tests."""

import random

import oracles
from gaslite.core_types import RuleId, UserOp
from gaslite.merkle_state import StateTree
from gaslite.rules import ETH, RuleParams, apply_op

# small round limits so that costs (multiples of 100) often land exactly on them
TRACE_PARAMS = RuleParams(
    l_daily=1_000, l_total=3_000, delta_t=2, l_one=400, l_win=700, window_blocks=5,
    l_base=800, epoch_blocks=20, balance_unit=10 * ETH, balance_gas_scale=50,
)
SENDERS = [bytes([i + 1]) * 20 for i in range(6)]
BALANCES = [0, 5 * ETH, 10 * ETH, 20 * ETH, 25 * ETH, 99 * ETH]


def random_trace(rng: random.Random, n: int):
    block, out = rng.randrange(0, 40), []
    for _ in range(n):
        block += rng.choice((0, 0, 1, 1, 2, 3, 7))
        out.append((rng.choice(SENDERS), 100 * rng.randint(1, 6), block, rng.choice(BALANCES)))
    return out


def oracle_flags(rule: RuleId, trace, p: RuleParams = TRACE_PARAMS):
    if rule is RuleId.RULE1:
        return oracles.rule1_trace(trace, p.l_daily, p.epoch_blocks)
    if rule is RuleId.RULE2:
        return oracles.rule2_trace(trace, p.l_daily, p.l_total, p.epoch_blocks)
    if rule is RuleId.RULE3:
        return oracles.rule3_trace(trace, p.delta_t, p.l_one, p.l_win, p.window_blocks)
    return oracles.rule4_trace(trace, p.l_base, p.balance_unit, p.balance_gas_scale, p.epoch_blocks)


def package_flags(rule: RuleId, trace, p: RuleParams = TRACE_PARAMS):
    tree = StateTree(rule)
    flags = []
    for i, (sender, cost, block, balance) in enumerate(trace):
        flags.append(apply_op(tree, UserOp(sender, rule, cost, i, balance, block), p).accepted)
    return flags, tree
