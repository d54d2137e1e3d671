import json

from gaslite.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main
from gaslite.core_types import unhex
from gaslite.persistence import ContentStore
from gaslite.simulator import SUMMARY, TABLE1, TABLE2, TABLE3, TRACE

SMALL = """
seed = 2
blocks = 30
bundlers = 3
measure_tee = false

[[faults]]
kind = "ForgedRoot"
at_block = 12
target = "bundler:1"
"""


def scenario(tmp_path, text=SMALL):
    p = tmp_path / "s.toml"
    p.write_text(text)
    return p


def test_run_then_replay(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(scenario(tmp_path)), "--out", str(out), "--no-timing"]) == EXIT_OK
    for name in (TABLE1, TABLE2, TABLE3, TRACE, SUMMARY):
        assert (out / name).exists()
    assert "slashes=1" in capsys.readouterr().out
    assert main(["replay", "--trace", str(out / TRACE), "--store", str(out / "store")]) == EXIT_OK
    assert "replay ok" in capsys.readouterr().out
    # a rerun into the same directory replaces the old store
    assert main(["run", "--scenario", str(scenario(tmp_path)), "--out", str(out), "--no-timing"]) == EXIT_OK
    assert json.loads((out / SUMMARY).read_text())["replay"]["ok"]


def test_replay_reports_tamper(tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--scenario", str(scenario(tmp_path)), "--out", str(out), "--no-timing"])
    capsys.readouterr()
    store = ContentStore(out / "store")
    cid = unhex(store.tip(1)["cid"])
    blob = bytearray(store.get(cid))
    blob[10] ^= 1
    store.overwrite(cid, bytes(blob))
    assert main(["replay", "--trace", str(out / TRACE), "--store", str(out / "store")]) == EXIT_INVARIANT
    text = capsys.readouterr().out
    assert "rule 1: mismatch at seq" in text and "replay FAILED" in text


def test_config_errors_exit_2(tmp_path, capsys):
    bad = scenario(tmp_path, "blocks = 10\n[[faults]]\nkind = \"RevertOp\"\nat_block = 50\ntarget = \"user:1\"\n")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "faults[0].at_block" in capsys.readouterr().err
    assert main(["run", "--scenario", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["replay", "--trace", str(tmp_path / "none.jsonl"), "--store", str(tmp_path)]) == EXIT_CONFIG


def test_refuses_to_clear_foreign_directory(tmp_path):
    out = tmp_path / "out"
    (out / "store").mkdir(parents=True)
    (out / "store" / "notes.txt").write_text("keep me")
    assert main(["run", "--scenario", str(scenario(tmp_path)), "--out", str(out)]) == EXIT_CONFIG
    assert (out / "store" / "notes.txt").exists()


def test_invariant_exit_1(tmp_path, capsys):
    # routing evasion cannot be staged with two bundlers and grace 1
    text = "blocks = 10\nbundlers = 2\nmeasure_tee = false\n[[attacks]]\nkind = \"SkipRouting\"\nat_block = 3\n"
    assert main(["run", "--scenario", str(scenario(tmp_path, text)), "--out", str(tmp_path / "o")]) == EXIT_INVARIANT
    assert "invariant violated" in capsys.readouterr().err


def test_calibrate(tmp_path, capsys):
    anchors = tmp_path / "a.csv"
    anchors.write_text("mode,rule,n_ops,gas\ngaslite,4,1,501000\ngaslite,4,1000,82150000\n")
    assert main(["calibrate", "--anchors", str(anchors)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "per_op_exec_gas = 81731" in text
    assert "# gaslite,4,1000,82150000," in text
    anchors.write_text("mode,rule,n_ops,gas\ngaslite,4,1,501000\n")
    assert main(["calibrate", "--anchors", str(anchors)]) == EXIT_CONFIG
    assert main(["calibrate", "--anchors", str(tmp_path / "nope.csv")]) == EXIT_CONFIG
