import json

import pytest

from gaslite.core_types import RuleId
from gaslite.gas_model import GasMode
from gaslite.persistence import ContentStore
from gaslite.scenario import FaultKind, FaultSpec, default_scenario
from gaslite.simulator import (
    SUMMARY,
    TABLE1,
    TABLE1_HEADER,
    TABLE2,
    TABLE2_HEADER,
    TABLE3,
    TABLE3_HEADER,
    TRACE,
    World,
    bench_batch,
    emit_tables,
    measure_tee,
    read_trace,
    replay_store,
    replay_verify,
    run_scenario,
    sweep_rows,
    table3_rows,
)

FAULTS = (
    FaultSpec(FaultKind.REVERT_OP, 8, "user:3"),
    FaultSpec(FaultKind.BUNDLER_CRASH, 15, "bundler:1"),
    FaultSpec(FaultKind.FORGED_ROOT, 25, "bundler:2"),
    FaultSpec(FaultKind.STALE_SUBMIT, 35, "bundler:0"),
)


def quick(**kw):
    kw.setdefault("measure_tee", False)
    kw.setdefault("blocks", 40)
    return default_scenario(**kw)


@pytest.fixture(scope="module")
def faulted(tmp_path_factory):
    out = tmp_path_factory.mktemp("faulted")
    report = run_scenario(quick(seed=3, faults=FAULTS), store_dir=out / "store")
    emit_tables(report, out)
    return report, out


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    emit_tables(run_scenario(quick(seed=11, faults=FAULTS)), a)
    emit_tables(run_scenario(quick(seed=11, faults=FAULTS)), b)
    for name in (TABLE1, TABLE2, TABLE3, TRACE, SUMMARY):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    c = tmp_path / "c"
    emit_tables(run_scenario(quick(seed=12, faults=FAULTS)), c)
    assert (a / TRACE).read_bytes() != (c / TRACE).read_bytes()
    assert (a / TABLE1).read_bytes() == (c / TABLE1).read_bytes()


def test_faulted_run_is_clean(faulted):
    report, _ = faulted
    assert report.ok, report.violations
    assert report.replay.ok
    assert all(f["fired_at"] is not None for f in report.summary["faults"])
    assert report.summary["total_wei"]["genesis"] == report.summary["total_wei"]["final"]


def test_forged_root_slashes_once(faulted):
    report, _ = faulted
    world = report.world
    assert len(world.slashes) == 1
    s = world.slashes[0]
    assert s.bundler == world.nodes[2].account
    assert s.reporter_reward + s.burned == s.stake
    forged = [e for e in report.trace if e["type"] == "fault" and e.get("kind") == "ForgedRoot"]
    assert forged and "root_unchanged=True" in report.summary["faults"][2]["detail"]


def test_every_op_has_one_disposition(faulted):
    report, _ = faulted
    world = report.world
    assert set(world.op_final) == set(world.op_ids)
    done = [e["op"] for e in report.trace if e["type"] == "op_done"]
    assert len(done) == len(set(done)) == len(world.op_ids)


def test_table_headers_and_sweep(faulted):
    report, out = faulted
    lines = {name: (out / name).read_text().splitlines() for name in (TABLE1, TABLE2, TABLE3)}
    assert lines[TABLE1][0] == ",".join(TABLE1_HEADER)
    assert lines[TABLE2][0] == ",".join(TABLE2_HEADER)
    assert lines[TABLE3][0] == ",".join(TABLE3_HEADER)
    assert len(lines[TABLE1]) == 1 + 3 * 9
    lite = [r for r in report.rows if r.mode is GasMode.GASLITE]
    inf = [r for r in report.rows if r.mode is GasMode.INFINITISM]
    assert all(r.rule is RuleId.RULE4 for r in report.rows)
    assert [r.total_gas for r in lite] == sorted(r.total_gas for r in lite)
    assert [r.overhead_pct for r in inf] == sorted(r.overhead_pct for r in inf)
    assert all(r.overhead_pct == 0 for r in lite)
    assert lines[TABLE2][4] == "4,937.18,26132,5692"


def test_table3_gaslite_constant():
    rows = table3_rows(quick())
    assert len({r[1] for r in rows}) == 1
    assert [r[2] for r in rows] == sorted(r[2] for r in rows)


def test_emission_idempotent(faulted, tmp_path):
    report, out = faulted
    emit_tables(report, tmp_path)
    emit_tables(report, tmp_path)
    for name in (TABLE1, TABLE2, TABLE3, TRACE, SUMMARY):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_timing_only_in_summary(tmp_path):
    sc = quick(blocks=5, batch_sizes=(1, 10), tee_repeats=1)
    timed = run_scenario(sc, measure=True)
    untimed = run_scenario(sc, measure=False)
    emit_tables(timed, tmp_path / "t")
    emit_tables(untimed, tmp_path / "u")
    for name in (TABLE1, TABLE2, TABLE3, TRACE):
        assert (tmp_path / "t" / name).read_bytes() == (tmp_path / "u" / name).read_bytes()
    assert set(timed.summary["tee_time_measured_s"]) >= {"rule4/10", "rule1/1000", "rule4/1000"}
    assert untimed.summary["tee_time_measured_s"] == {}


def test_replay_on_disk(faulted):
    _, out = faulted
    assert replay_verify(out / TRACE, out / "store")
    params, roots = read_trace(out / TRACE)
    assert set(roots) == set(RuleId)


def test_replay_longer_run(tmp_path):
    report = run_scenario(quick(seed=5, blocks=200, bundlers=3), store_dir=tmp_path / "store")
    emit_tables(report, tmp_path)
    assert report.ok and replay_verify(tmp_path / TRACE, tmp_path / "store")


def test_replay_catches_tamper(faulted, tmp_path):
    report, out = faulted
    store = ContentStore(out / "store")
    tip = store.tip(RuleId.RULE1)
    assert tip["seq"] >= 3
    # corrupt a copy of the store so the module fixture stays clean
    copy = ContentStore(tmp_path)
    for cid in store.cids():
        copy.put(store.get(cid))
    for rule in RuleId:
        if store.tip(rule):
            copy.set_tip(rule, store.tip(rule))
    roots = {r: report.world.chain.current_root(r) for r in RuleId}
    assert replay_store(copy, roots, report.scenario.rule_params).ok
    victim = sorted(copy.cids())[0]
    blob = bytearray(copy.get(victim))
    blob[-1] ^= 0x40
    copy.overwrite(victim, bytes(blob))
    result = replay_store(copy, roots, report.scenario.rule_params)
    assert not result.ok
    assert all(seq is not None and seq >= 1 for _, seq, _ in result.failures)


def test_tamper_fault_reported_with_seq():
    report = run_scenario(quick(seed=4, faults=(FaultSpec(FaultKind.TAMPERED_LOG_BLOB, 20, "rule:2"),)))
    assert report.ok, report.violations
    (rule, seq), = report.world.tampered
    assert rule is RuleId.RULE2
    assert [(f[0], f[1]) for f in report.replay.failures] == [(2, seq)]


def test_stepwise_world():
    w = World(quick(blocks=6))
    h = w.chain.height
    w.step()
    assert w.chain.height == h + 1
    assert w.trace[0]["type"] == "genesis"


def test_sweep_rows_use_scenario_sizes():
    rows = sweep_rows(quick(batch_sizes=(3, 7)))
    assert [r.n_ops for r in rows] == [3, 3, 3, 7, 7, 7]
    assert all(r.tee_time_measured is None for r in rows)


def test_bench_batch_and_timer():
    ops = bench_batch(RuleId.RULE4, 5)
    assert len({op.sender for op in ops}) == 5 and all(op.has_valid_signature() for op in ops)
    assert measure_tee(RuleId.RULE1, 5, repeats=1) > 0


def test_summary_is_json(faulted):
    _, out = faulted
    s = json.loads((out / SUMMARY).read_text())
    assert s["replay"]["ok"] and s["slashes"] == 1 and len(s["table1_residuals"]) == 9
