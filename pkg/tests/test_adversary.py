import pytest

from gaslite.adversary import EXPECTED, AttackKind, AttackScript, execute_attack, rule_limit
from gaslite.chain import BundlerStatus
from gaslite.core_types import RuleId
from gaslite.rules import RuleParams
from gaslite.scenario import default_scenario
from gaslite.simulator import World, run_scenario

ALL = (
    AttackScript(AttackKind.FORGE_ROOT_NO_KEY, 5),
    AttackScript(AttackKind.REPLAY_ATTESTATION, 10),
    AttackScript(AttackKind.QUOTA_DOUBLE_SPEND, 15, {"rule": 1}),
    AttackScript(AttackKind.WITHHOLD_BUNDLE, 20, {"bundler": 1}),
    AttackScript(AttackKind.SKIP_ROUTING, 30, {"bundler": 3}),
    AttackScript(AttackKind.FORGE_ROOT_STOLEN_KEY, 35, {"bundler": 0}),
)


def world(seed=1, bundlers=4, blocks=40, warm=3):
    w = World(default_scenario(seed=seed, bundlers=bundlers, blocks=blocks, measure_tee=False))
    for _ in range(warm):
        w.step()
    return w


@pytest.fixture(scope="module")
def full_run():
    return run_scenario(default_scenario(seed=21, bundlers=4, blocks=40, attacks=ALL, measure_tee=False))


def test_all_attacks_have_documented_outcome(full_run):
    assert [a.kind for a in full_run.attacks] == [s.kind for s in ALL]
    for a in full_run.attacks:
        assert a.ok, (a.kind, a.observed)
        assert a.expected == EXPECTED[a.kind]
    assert full_run.ok, full_run.violations


def test_attacks_are_deterministic(full_run):
    again = run_scenario(default_scenario(seed=21, bundlers=4, blocks=40, attacks=ALL, measure_tee=False))
    assert [a.as_event() for a in again.attacks] == [a.as_event() for a in full_run.attacks]


def test_conservation_with_attacks(full_run):
    assert full_run.summary["total_wei"]["genesis"] == full_run.summary["total_wei"]["final"]


def test_forge_without_key_changes_nothing():
    w = world()
    roots = {r: w.chain.current_root(r) for r in RuleId}
    out = execute_attack(AttackScript(AttackKind.FORGE_ROOT_NO_KEY), w)
    assert out.ok and "clause=c" in out.observed
    assert roots == {r: w.chain.current_root(r) for r in RuleId}
    assert w.slashes == []


def test_stolen_key_bounded_damage():
    w = world()
    balances = w.user_balances()
    out = execute_attack(AttackScript(AttackKind.FORGE_ROOT_STOLEN_KEY, params={"bundler": 0}), w)
    assert out.ok, out.observed
    assert w.user_balances() == balances
    assert w.archive.divergences


def test_skip_routing_slashes():
    w = world()
    out = execute_attack(AttackScript(AttackKind.SKIP_ROUTING, params={"bundler": 2}), w)
    assert out.ok and out.details["reporter_reward"] + out.details["burned"] == out.details["stake"]
    assert w.chain.status_of(w.nodes[2].account) is BundlerStatus.SLASHED


def test_skip_routing_needs_enough_bundlers():
    w = world(bundlers=2)
    assert not execute_attack(AttackScript(AttackKind.SKIP_ROUTING), w).ok


@pytest.mark.parametrize("rule", list(RuleId))
def test_double_spend_within_limit(rule):
    w = world(seed=int(rule))
    out = execute_attack(AttackScript(AttackKind.QUOTA_DOUBLE_SPEND, params={"rule": int(rule)}), w)
    assert out.ok, out.observed
    assert out.details["spent"] <= out.details["limit"] == rule_limit(rule, w.scenario.rule_params)


@pytest.mark.parametrize("bundler", range(4))
def test_withhold_latency_bounded(bundler):
    w = world(seed=9)
    out = execute_attack(AttackScript(AttackKind.WITHHOLD_BUNDLE, params={"bundler": bundler}), w)
    assert out.ok, out.observed
    assert 1 <= out.details["latency"] <= 4


def test_rule_limit():
    p = RuleParams()
    assert rule_limit(RuleId.RULE1, p) == rule_limit(RuleId.RULE2, p) == p.l_daily
    assert rule_limit(RuleId.RULE3, p) == p.l_win
    assert rule_limit(RuleId.RULE4, p) == p.l_base
