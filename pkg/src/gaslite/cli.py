"""``gaslite-sim`` command line.

Exit codes: 0 ok, 1 an invariant checker fired (or replay failed), 2 bad
configuration or input.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .core_types import RuleId
from .errors import ConfigError, InconsistentAnchors, SchemaError, Underdetermined
from .gas_model import CostTable, GasMode, calibrate, load_anchors, price_bundle
from .scenario import load_scenario
from .simulator import emit_tables, replay_check, run_scenario

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("gaslite.cli")


def _looks_like_store(path: Path) -> bool:
    return all(p.name == "tips.json" or len(p.name) == 64 for p in path.iterdir())


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    store_dir = out / "store"
    if store_dir.exists():
        if not _looks_like_store(store_dir):
            print(f"refusing to clear {store_dir}: it holds files that are not store blobs", file=sys.stderr)
            return EXIT_CONFIG
        shutil.rmtree(store_dir)
    report = run_scenario(scenario, store_dir=store_dir, measure=False if args.no_timing else None)
    emit_tables(report, out)
    s = report.summary
    print(
        f"blocks={s['final_height'] - 1} ops={s['ops']['submitted']} bundles={s['bundles']} "
        f"slashes={s['slashes']} replay={'ok' if s['replay']['ok'] else 'FAILED'}"
    )
    for a in report.attacks:
        print(f"attack {a.kind.value} at block {a.block}: {'ok' if a.ok else 'UNEXPECTED'} ({a.observed})")
    if report.violations:
        for v in report.violations:
            print(f"invariant violated: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        result = replay_check(args.trace, args.store)
    except (OSError, SchemaError) as exc:
        print(f"cannot replay: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for rule, seq, msg in result.failures:
        print(f"rule {rule}: mismatch at seq {seq}: {msg}")
    print("replay ok" if result.ok else "replay FAILED")
    return EXIT_OK if result.ok else EXIT_INVARIANT


def cmd_calibrate(args) -> int:
    try:
        anchors = load_anchors(args.anchors)
        shape = RuleId.parse(args.shape_from) if args.shape_from else None
        table = calibrate(CostTable(), anchors, shape_from=shape)
    except (OSError, KeyError, ValueError, InconsistentAnchors, Underdetermined) as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("[cost_table]")
    for name in ("base_bundle_gas", "per_op_exec_gas", "attestation_verify_gas", "zk_verify_gas"):
        print(f"{name} = {getattr(table, name)}")
    for rule, c in sorted(table.infinitism_rule_gas.items()):
        print(f"\n[cost_table.infinitism.rule{int(rule)}]")
        print(f"fixed_gas = {c.fixed_gas}")
        print(f"per_op_check = {c.per_op_check}")
        print(f"per_op_storage = {c.per_op_storage}")
        print(f'congestion_coeff = "{c.congestion_coeff}"')
    print("\n# residuals: mode,rule,n_ops,anchor,model,rel_err")
    for a in anchors:
        got = price_bundle(table, a.mode, a.rule, a.n_ops)
        print(f"# {GasMode(a.mode).value},{int(a.rule)},{a.n_ops},{a.gas},{got},{(got - a.gas) / a.gas:+.5f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaslite-sim", description="enclave-offloaded paymaster validation simulator")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write tables, trace and summary")
    run.add_argument("--scenario", required=True, help="scenario TOML file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--no-timing", action="store_true", help="skip the enclave timing benchmark")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("replay", help="rebuild final roots from a store and check them against a trace")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--store", required=True)
    rep.set_defaults(func=cmd_replay)

    cal = sub.add_parser("calibrate", help="fit the cost table to anchor rows (mode,rule,n_ops,gas)")
    cal.add_argument("--anchors", required=True)
    cal.add_argument("--shape-from", default="rule4", help="rule whose curve single-anchor rules borrow ('' to disable)")
    cal.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
