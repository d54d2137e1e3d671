"""The four gas-allocation rules: validators and state transitions.

Everything here is a pure function of its arguments. Time is the op's
``submit_block``; days last ``epoch_blocks`` and rule-3 windows are fixed,
tumbling windows of ``window_blocks``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from enum import IntEnum
from typing import Tuple

from .core_types import U64_MAX, RuleId, UserOp
from .errors import ArithmeticOverflow, NotValidated
from .merkle_state import RuleGlobalState, StateTree, UserState

ETH = 10**18


@dataclass(frozen=True)
class RuleParams:
    l_daily: int = 2_000_000
    l_total: int = 40_000_000
    delta_t: int = 2
    l_one: int = 300_000
    l_win: int = 600_000
    window_blocks: int = 10
    l_base: int = 1_500_000
    epoch_blocks: int = 100
    balance_unit: int = 10 * ETH
    balance_gas_scale: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValueError(f"{f.name} must be an integer")
        for name in ("l_daily", "l_total", "l_one", "l_win", "l_base", "balance_unit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta_t < 0:
            raise ValueError("delta_t must be non-negative")
        if self.window_blocks < 1 or self.epoch_blocks < 1:
            raise ValueError("window_blocks and epoch_blocks must be at least 1")
        if self.balance_gas_scale < 0:
            raise ValueError("balance_gas_scale must be non-negative")


class Reason(IntEnum):
    OK = 0
    DAILY_EXCEEDED = 1
    GLOBAL_EXCEEDED = 2
    TOO_FREQUENT = 3
    SINGLE_OP_TOO_LARGE = 4
    WINDOW_EXCEEDED = 5
    DYNAMIC_EXCEEDED = 6


@dataclass(frozen=True)
class RuleDecision:
    accepted: bool
    reason: Reason

    def __post_init__(self):
        if self.accepted != (self.reason == Reason.OK):
            raise ValueError("accepted must be true exactly when reason is OK")


ACCEPT = RuleDecision(True, Reason.OK)


def _reject(reason: Reason) -> RuleDecision:
    return RuleDecision(False, reason)


def _checked(value: int) -> int:
    if value > U64_MAX:
        raise ArithmeticOverflow(f"{value} overflows u64")
    return value


def epoch_normalize(
    state: UserState, global_state: RuleGlobalState, block: int, params: RuleParams
) -> Tuple[UserState, RuleGlobalState]:
    day = block // params.epoch_blocks
    window = block // params.window_blocks
    changes = {}
    if day > state.day_index:
        changes.update(day_usage=0, day_index=day)
    if window > state.window_index:
        changes.update(window_usage=0, window_index=window)
    if changes:
        state = replace(state, **changes)
    if day > global_state.day_index:
        global_state = RuleGlobalState(0, day)
    return state, global_state


def validate_rule1(state: UserState, op: UserOp, params: RuleParams) -> RuleDecision:
    if state.day_usage + op.gas_cost <= params.l_daily:
        return ACCEPT
    return _reject(Reason.DAILY_EXCEEDED)


def validate_rule2(
    state: UserState, global_state: RuleGlobalState, op: UserOp, params: RuleParams
) -> RuleDecision:
    daily = validate_rule1(state, op, params)
    if not daily.accepted:
        return daily
    if global_state.global_day_usage + op.gas_cost <= params.l_total:
        return ACCEPT
    return _reject(Reason.GLOBAL_EXCEEDED)


def validate_rule3(state: UserState, op: UserOp, params: RuleParams) -> RuleDecision:
    # a user with no history has no t_last to measure from
    if state.hist_count and not state.last_op_block + params.delta_t < op.submit_block:
        return _reject(Reason.TOO_FREQUENT)
    if op.gas_cost > params.l_one:
        return _reject(Reason.SINGLE_OP_TOO_LARGE)
    if state.window_usage + op.gas_cost > params.l_win:
        return _reject(Reason.WINDOW_EXCEEDED)
    return ACCEPT


def dynamic_limit(state: UserState, wallet_balance: int, params: RuleParams) -> int:
    limit = (
        params.l_base
        + (wallet_balance // params.balance_unit) * params.balance_gas_scale
        - state.hist_mean // 10
    )
    return max(limit, 0)


def validate_rule4(state: UserState, op: UserOp, params: RuleParams) -> RuleDecision:
    if state.day_usage + op.gas_cost <= dynamic_limit(state, op.wallet_balance, params):
        return ACCEPT
    return _reject(Reason.DYNAMIC_EXCEEDED)


def validate(
    state: UserState, global_state: RuleGlobalState, op: UserOp, params: RuleParams
) -> RuleDecision:
    """Dispatch on ``op.rule``. States must already be normalized."""
    rule = op.rule
    if rule == RuleId.RULE1:
        return validate_rule1(state, op, params)
    if rule == RuleId.RULE2:
        return validate_rule2(state, global_state, op, params)
    if rule == RuleId.RULE3:
        return validate_rule3(state, op, params)
    return validate_rule4(state, op, params)


def apply_transition(
    state: UserState, global_state: RuleGlobalState, op: UserOp, params: RuleParams
) -> Tuple[UserState, RuleGlobalState]:
    decision = validate(state, global_state, op, params)
    if not decision.accepted:
        raise NotValidated(f"op rejected by {op.rule.name}: {decision.reason.name}")
    c = op.gas_cost
    new_state = replace(
        state,
        day_usage=_checked(state.day_usage + c),
        window_usage=_checked(state.window_usage + c) if op.rule == RuleId.RULE3 else state.window_usage,
        last_op_block=op.submit_block,
        hist_count=_checked(state.hist_count + 1),
        hist_sum=_checked(state.hist_sum + c),
    )
    if op.rule == RuleId.RULE2:
        global_state = RuleGlobalState(_checked(global_state.global_day_usage + c), global_state.day_index)
    return new_state, global_state


def apply_op(tree: StateTree, op: UserOp, params: RuleParams) -> RuleDecision:
    """Normalize, validate and (on acceptance) apply one op to ``tree`` in place."""
    state, glob = epoch_normalize(tree.state_of(op.sender), tree.global_state, op.submit_block, params)
    decision = validate(state, glob, op, params)
    if decision.accepted:
        state, glob = apply_transition(state, glob, op, params)
        tree.set_state(op.sender, state)
        if glob != tree.global_state:
            tree.set_global(glob)
    return decision
