"""Multi-bundler, multi-block simulation with fault injection and reporting.

A :class:`World` wires a chain, a shared mempool, bundler nodes and a
content-addressed archive together and advances them one block at a time.
Within a block every bundler prepares from the same committed roots and the
sequencer then applies submissions in bundler-index order, so a second
bundle on the same rule loses the race with a stale-root rejection.

Invariant checkers run inside the loop and collect violations instead of
raising, so a run always completes and reports everything it saw.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .adversary import AttackOutcome, execute_attack, harness_account, routed_to, signed_op
from .bundler import BundlerNode, Mempool, PreparedBundle
from .chain import ETH, BundlerStatus, ChainState, ExecutionReceipt, SlashOutcome
from .core_types import (
    OptimizedBundle,
    RuleId,
    UserOp,
    address_of,
    derive_private_key,
    keccak256,
    unhex,
)
from .enclave import EnclaveIdentity, tee_execute
from .errors import ChainBreak, MissingBlob, RootMismatch, SchemaError
from .gas_model import MB, GasMode, model_resources, price_bundle
from .merkle_state import StateTree
from .persistence import Archive, ContentStore, audit_log
from .routing import BundlerRegistry
from .rules import RuleParams
from .scenario import FaultKind, FaultSpec, Scenario, derive_rng

logger = logging.getLogger(__name__)

TABLE1 = "table1_gas_vs_batch.csv"
TABLE2 = "table2_zk_resources.csv"
TABLE3 = "table3_rule_complexity.csv"
TRACE = "trace.jsonl"
SUMMARY = "summary.json"
TABLE1_HEADER = ("batch", "mode", "rule", "total_gas", "overhead_pct")
TABLE2_HEADER = ("rule", "time_s", "mem_mb", "artifact_mb")
TABLE3_HEADER = ("rule", "gaslite_gas", "infinitism_gas", "overhead_pct")
TABLE_BATCH = 1000
SWEEP_RULE = RuleId.RULE4
POOL_PER_RULE = 1_000 * ETH

# reference GasLite / Infinitism totals per batch size for the Rule 4 sweep
REFERENCE_TABLE1 = {
    1: (501_000, 566_000),
    20: (2_040_000, 3_080_000),
    50: (4_480_000, 7_070_000),
    100: (8_550_000, 13_710_000),
    200: (16_720_000, 31_890_000),
    400: (33_230_000, 63_750_000),
    600: (49_340_000, 95_090_000),
    800: (65_720_000, 126_780_000),
    1000: (82_150_000, 158_480_000),
}


@dataclass(frozen=True)
class UserAccount:
    index: int
    key: bytes
    address: bytes


class World:
    """Live simulation state. ``step()`` runs exactly one block."""

    def __init__(self, scenario: Scenario, store: Optional[ContentStore] = None):
        sc = scenario.validate()
        self.scenario = sc
        self.workload_rng = derive_rng(sc.seed, "workload")
        self.fault_rng = derive_rng(sc.seed, "faults")
        balance_rng = derive_rng(sc.seed, "balances")

        self.users = []
        genesis: Dict[bytes, int] = {}
        for i in range(sc.users):
            key = derive_private_key(f"user/{sc.seed}/{i}".encode())
            acct = UserAccount(i, key, address_of(key))
            self.users.append(acct)
            eth = balance_rng.randint(sc.workload.balance_min_eth, sc.workload.balance_max_eth)
            genesis[acct.address] = eth * ETH + balance_rng.randrange(ETH)
        treasury = address_of(derive_private_key(f"treasury/{sc.seed}".encode()))
        genesis[treasury] = POOL_PER_RULE * len(RuleId)
        self.reporter = address_of(derive_private_key(f"reporter/{sc.seed}".encode()))
        genesis[self.reporter] = 0
        stake = max(sc.chain.min_stake, ETH)
        bundler_keys = [derive_private_key(f"bundler/{sc.seed}/{i}".encode()) for i in range(sc.bundlers)]
        for k in bundler_keys:
            genesis[address_of(k)] = stake

        self.chain = ChainState(sc.chain, sc.cost_table, genesis)
        for rule in RuleId:
            self.chain.fund_paymaster(rule, treasury, POOL_PER_RULE)
        self.store = store if store is not None else ContentStore()
        self.archive = Archive(self.store, sc.rule_params, sc.snapshot_every)
        self.mempool = Mempool()
        self.mempool.on_terminal = self._on_terminal
        self.nodes: List[BundlerNode] = []
        for i, k in enumerate(bundler_keys):
            account = address_of(k)
            enclave = EnclaveIdentity.create(f"{sc.seed}/{i}".encode())
            self.chain.allow_enclave(enclave.mrenclave, enclave.pubkey)
            self.chain.register_bundler(account, stake, immediate=True)
            self.nodes.append(BundlerNode(account, enclave, sc.rule_params, sc.max_batch, sc.gas_mode))
        self.chain.listeners.append(self._on_commit)

        self.trace: List[dict] = []
        self.violations: List[str] = []
        self.committed: List[Tuple[OptimizedBundle, ExecutionReceipt]] = []
        self.slashes: List[SlashOutcome] = []
        self.attacks: List[AttackOutcome] = []
        self.forged_rules: set = set()
        self._desynced: set = set()
        self.withholding: Dict[bytes, int] = {}
        self.op_ids: Dict[str, UserOp] = {}
        self.op_final: Dict[str, Tuple[str, int]] = {}
        self._consumed_roots: Dict[RuleId, set] = {r: set() for r in RuleId}
        self.receipt_counts = {"accepted": 0, "rejected": 0, "reverted": 0}

        self.faults = [dict(spec=f, fired_at=None, detail="") for f in sc.faults]
        self._revert_armed: List[dict] = []
        self._tamper_armed: List[dict] = []
        self.tampered: List[Tuple[RuleId, int]] = []

        self.wei_total = self.chain.total_wei()
        self.chain.advance_block()
        self.emit(
            "genesis",
            seed=sc.seed,
            bundlers=[n.account.hex() for n in self.nodes],
            users=len(self.users),
            total_wei=str(self.wei_total),
            rule_params=asdict(sc.rule_params),
            gas_mode=sc.gas_mode.value,
        )

    # -- plumbing
    def emit(self, event_type: str, /, **fields) -> dict:
        event = {"type": event_type, "block": fields.pop("block", self.chain.height), **fields}
        self.trace.append(event)
        return event

    def violation(self, name: str, detail: str) -> None:
        msg = f"[block {self.chain.height}] {name}: {detail}"
        logger.error("invariant violated: %s", msg)
        self.violations.append(msg)
        self.emit("invariant", name=name, detail=detail)

    def user_balances(self) -> Dict[bytes, int]:
        return {u.address: self.chain.balance_of(u.address) for u in self.users}

    def node(self, index: int) -> BundlerNode:
        return self.nodes[index]

    def submit_op(self, op: UserOp) -> bool:
        if not self.mempool.add(op, self.chain.height):
            return False
        oid = op.digest().hex()
        self.op_ids[oid] = op
        self.emit("op", op=oid, sender=op.sender.hex(), rule=int(op.rule), nonce=op.nonce, gas_cost=op.gas_cost)
        return True

    def _on_terminal(self, op: UserOp, disposition: str, block: int) -> None:
        oid = op.digest().hex()
        if oid in self.op_final:
            self.violation("single_disposition", f"op {oid} finished twice")
        self.op_final[oid] = (disposition, block)
        self.emit("op_done", block=block, op=oid, disposition=disposition)

    def _on_commit(self, bundle: OptimizedBundle, receipt: ExecutionReceipt) -> None:
        rule = bundle.rule
        if bundle.old_root in self._consumed_roots[rule]:
            self.violation("serialization", f"{rule.name} root {bundle.old_root.hex()} committed twice")
        self._consumed_roots[rule].add(bundle.old_root)
        self.committed.append((bundle, receipt))
        filed = self.archive.record(
            rule, receipt.block, bundle.bundle_id, bundle.ops, bundle.old_root, bundle.new_root
        )
        tip = self.store.tip(rule)
        self.emit(
            "commit",
            rule=int(rule),
            bundle=bundle.bundle_id.hex(),
            bundler=bundle.bundler.account.hex(),
            ops=len(bundle.ops),
            old_root=bundle.old_root.hex(),
            new_root=bundle.new_root.hex(),
            seq=tip["seq"] if filed and tip else None,
            filed=filed,
            gas=receipt.gas,
        )

    def report(self, bundle: OptimizedBundle) -> SlashOutcome:
        outcome = self.chain.report_misbehavior(bundle, self.reporter)
        self.slashes.append(outcome)
        if outcome.reporter_reward + outcome.burned != outcome.stake:
            self.violation("slash_accounting", f"reward {outcome.reporter_reward} + burn {outcome.burned} != stake")
        self.emit(
            "slash",
            bundler=outcome.bundler.hex(),
            stake=str(outcome.stake),
            reporter_reward=str(outcome.reporter_reward),
            burned=str(outcome.burned),
            forfeited=str(outcome.forfeited_rewards),
            clause=outcome.clause.value if outcome.clause else None,
        )
        return outcome

    # -- one block
    def step(self) -> None:
        h = self.chain.height
        for op in self.mempool.release_in_flight(h):
            self.emit("requeue", op=op.digest().hex(), reason="no receipt")
        due = [f for f in self.faults if f["spec"].at_block == h]
        crashed, stale, forging = self._arm_faults(due)
        self._workload(h)
        self._fire_armed(h)
        self._rounds(h, crashed, stale, forging)
        self._check_block()
        self.chain.advance_block()

    def _arm_faults(self, due):
        crashed, stale, forging = set(), set(), {}
        for f in due:
            spec: FaultSpec = f["spec"]
            idx = spec.target_index
            if spec.kind is FaultKind.BUNDLER_CRASH:
                crashed.add(self.nodes[idx].account)
            elif spec.kind is FaultKind.STALE_SUBMIT:
                stale.add(self.nodes[idx].account)
                f["detail"] = "no stale root available"
            elif spec.kind is FaultKind.FORGED_ROOT:
                forging[self.nodes[idx].account] = f
            elif spec.kind is FaultKind.REVERT_OP:
                self._revert_armed.append(f)
            elif spec.kind is FaultKind.TAMPERED_LOG_BLOB:
                self._tamper_armed.append(f)
            if spec.kind in (FaultKind.BUNDLER_CRASH, FaultKind.STALE_SUBMIT):
                f["fired_at"] = self.chain.height
        return crashed, stale, forging

    def _workload(self, h: int) -> None:
        sc = self.scenario
        rng = self.workload_rng
        rules = list(RuleId)
        weights = [sc.rule_mix.get(r, 0) for r in rules]
        busy = set(self.mempool.senders())
        for _ in range(sc.workload.ops_per_block):
            user = self.users[rng.randrange(len(self.users))]
            rule = rng.choices(rules, weights)[0]
            gas = rng.randint(sc.workload.gas_min, sc.workload.gas_max)
            if user.address in busy:
                continue  # one outstanding op per wallet keeps nonces gap-free
            op = UserOp(
                user.address, rule, gas, self.chain.next_nonce(user.address),
                self.chain.balance_of(user.address), h,
            ).signed(user.key)
            if self.submit_op(op):
                busy.add(user.address)

    def _fire_armed(self, h: int) -> None:
        for f in list(self._revert_armed):
            target = self.users[f["spec"].target_index].address
            op = next((o for o in self.mempool.ops() if o.sender == target), None)
            if op is not None:
                self.chain.inject_revert(op)
                f["fired_at"], f["detail"] = h, f"op {op.digest().hex()}"
                self._revert_armed.remove(f)
                self.emit("fault", kind=f["spec"].kind.value, target=f["spec"].target, detail=f["detail"])
        for f in list(self._tamper_armed):
            rule = RuleId(f["spec"].target_index)
            tip = self.store.tip(rule)
            if tip is None:
                continue
            cid = unhex(tip["cid"])
            blob = bytearray(self.store.get(cid))
            pos = self.fault_rng.randrange(len(blob))
            blob[pos] ^= 0x01
            self.store.overwrite(cid, bytes(blob))
            self.tampered.append((rule, tip["seq"]))
            f["fired_at"], f["detail"] = h, f"{rule.name} seq {tip['seq']} byte {pos}"
            self._tamper_armed.remove(f)
            self.emit("fault", kind=f["spec"].kind.value, target=f["spec"].target, detail=f["detail"])

    def _active_nodes(self) -> List[BundlerNode]:
        reg = self.chain.registry
        nodes = [
            n for n in self.nodes if n.account in reg and self.chain.status_of(n.account) is BundlerStatus.ACTIVE
        ]
        return sorted(nodes, key=lambda n: reg.active.index(n.account))

    def _rounds(self, h: int, crashed, stale, forging) -> None:
        chain, mempool, archive = self.chain, self.mempool, self.archive
        plans: List[Tuple[BundlerNode, PreparedBundle]] = []
        for node in self._active_nodes():
            if node.account in crashed or self.withholding.get(node.account, -1) >= h:
                pulled = mempool.pull(node.account, chain.registry, h, node.max_batch)
                n = sum(len(v) for v in pulled.values())
                what = "crash" if node.account in crashed else "withhold"
                self.emit(what, bundler=node.account.hex(), pulled=n)
                continue
            if node.account in stale and self._make_stale(node):
                for f in self.faults:
                    if f["spec"].kind is FaultKind.STALE_SUBMIT and f["fired_at"] == h:
                        f["detail"] = "submitted from a superseded root"
                self.emit("fault", kind=FaultKind.STALE_SUBMIT.value, target=node.account.hex(), detail="stale trees")
            else:
                node.refresh(chain, archive)
            pulled = mempool.pull(node.account, chain.registry, h, node.max_batch)
            for rule in sorted(pulled):
                if rule in node.unavailable:
                    mempool.requeue(pulled[rule])
                    continue
                plans.append((node, node.prepare(rule, pulled[rule], chain, mempool)))

        # a forger goes first so its bundle is judged on the signature, not lost to a race
        plans.sort(key=lambda p: p[0].account not in forging)
        for node, prep in plans:
            f = forging.pop(node.account, None)
            if f is not None:
                self._submit_forged(node, prep, f)
            else:
                self._submit(node, prep)
        for account, f in forging.items():
            node = next(n for n in self.nodes if n.account == account)
            if chain.status_of(account) is BundlerStatus.ACTIVE:
                self._submit_forged(node, None, f)
            else:
                f["detail"] = "target bundler not active"

    def _make_stale(self, node: BundlerNode) -> bool:
        node.unavailable = set()
        done = False
        for rule in RuleId:
            hist = self.chain.roots[rule].history
            if len(hist) < 2:
                continue
            tree = self.archive.tree_at(rule, hist[-2][1])
            if tree is not None:
                node.local_trees[rule] = tree
                done = True
        return done

    def _record(self, bundle: OptimizedBundle, receipt: ExecutionReceipt, before: bytes, after: bytes) -> None:
        self.receipt_counts[receipt.status.value] += 1
        if not receipt.accepted and before != after:
            self.violation("atomicity", f"{receipt.status.value} bundle moved {bundle.rule.name} root")
        self.emit(
            "bundle",
            rule=int(bundle.rule),
            bundle=bundle.bundle_id.hex(),
            bundler=bundle.bundler.account.hex(),
            ops=len(bundle.ops),
            status=receipt.status.value,
            clause=receipt.failure.value if receipt.failure else None,
            attributable=receipt.attributable,
            reason=receipt.reason,
            root_before=before.hex(),
            root_after=after.hex(),
        )

    def _submit(self, node: BundlerNode, prep: PreparedBundle) -> None:
        before = self.chain.current_root(prep.rule)
        receipt = node.submit(prep, self.chain, self.mempool, self.archive)
        if receipt is None:
            return
        self._record(prep.bundle, receipt, before, self.chain.current_root(prep.rule))
        if not receipt.accepted and receipt.attributable:
            self.violation("honest_fault", f"honest bundler {node.account.hex()} produced an attributable fault")
            self.report(prep.bundle)

    def _submit_forged(self, node: BundlerNode, prep: Optional[PreparedBundle], fault: dict) -> None:
        chain, h = self.chain, self.chain.height
        if prep is not None:
            self.mempool.requeue(prep.pulled)
        if prep is not None and prep.bundle is not None:
            honest = prep.bundle
        else:
            rule = prep.rule if prep is not None else RuleId.RULE1
            bid = chain.registry.id_of(node.account)
            key, user = harness_account(self, f"forged/{h}", routed_to(self, node.account, h))
            op = signed_op(self, key, user, rule, 30_000)
            node.refresh(chain, self.archive)
            out = tee_execute([op], node.local_trees[rule], node.params, node.enclave, h, bid)
            honest = OptimizedBundle(tuple(out.accepted_ops), rule, bid, out.old_root, out.new_root, out.attestation, h)
        # same attestation, different root: the signature no longer covers the payload
        forged = OptimizedBundle(
            honest.ops, honest.rule, honest.bundler, honest.old_root,
            keccak256(b"forged", honest.new_root), honest.attestation, honest.submit_block,
        )
        before = chain.current_root(forged.rule)
        receipt = chain.handle_ops(forged, node.mode, node.account)
        after = chain.current_root(forged.rule)
        self._record(forged, receipt, before, after)
        slashes_before = len(self.slashes)
        if receipt.attributable:
            self.report(forged)
        fault["fired_at"] = h
        fault["detail"] = (
            f"{receipt.status.value} clause={receipt.failure.value if receipt.failure else '-'} "
            f"root_unchanged={before == after} slashes={len(self.slashes) - slashes_before}"
        )
        self.emit("fault", kind=fault["spec"].kind.value, target=fault["spec"].target, detail=fault["detail"])
        if receipt.accepted or before != after or len(self.slashes) - slashes_before != 1:
            self.violation("forged_root", fault["detail"])

    def _check_block(self) -> None:
        total = self.chain.total_wei()
        if total != self.wei_total:
            self.violation("conservation", f"total wei {total} != {self.wei_total}")
        for rule in RuleId:
            if rule in self.forged_rules:
                continue
            if self.archive.live[rule].root != self.chain.current_root(rule):
                if rule not in self._desynced:
                    self.violation("archive_sync", f"{rule.name} archive root differs from chain root")
                self._desynced.add(rule)

    # -- end of run
    def finish(self) -> None:
        h = self.chain.height
        for oid, op in self.op_ids.items():
            if oid not in self.op_final:
                self.op_final[oid] = ("pending", h)
                self.emit("op_done", op=oid, disposition="pending")
        self._check_quotas()
        for rule in RuleId:
            tip = self.store.tip(rule)
            live = self.archive.live[rule]
            self.emit(
                "final_root",
                rule=int(rule),
                root=self.chain.current_root(rule).hex(),
                seq=tip["seq"] if tip else 0,
                leaves=len(live),
            )
        executed = {oid for oid, (d, _) in self.op_final.items() if d == "executed"}
        committed_ids = {op.digest().hex() for b, _ in self.committed for op in b.ops}
        missing = executed - committed_ids
        if missing:
            self.violation("trace_completeness", f"{len(missing)} ops marked executed but never committed")
        for f in self.faults:
            if f["fired_at"] is None:
                f["detail"] = f["detail"] or "never fired"

    def _check_quotas(self) -> None:
        p = self.scenario.rule_params
        for rule in RuleId:
            if rule in self.forged_rules:
                continue
            tree = self.archive.live[rule]
            for user, st in tree.leaves.items():
                if rule in (RuleId.RULE1, RuleId.RULE2) and st.day_usage > p.l_daily:
                    self.violation("quota", f"{rule.name} {user.hex()} daily usage {st.day_usage}")
                if rule is RuleId.RULE3 and st.window_usage > p.l_win:
                    self.violation("quota", f"{rule.name} {user.hex()} window usage {st.window_usage}")
            if rule is RuleId.RULE2 and tree.global_state.global_day_usage > p.l_total:
                self.violation("quota", f"RULE2 global usage {tree.global_state.global_day_usage}")


# --- replay -------------------------------------------------------------------


@dataclass
class ReplayResult:
    ok: bool
    failures: List[Tuple[int, Optional[int], str]] = field(default_factory=list)
    trees: Dict[RuleId, StateTree] = field(default_factory=dict)


def replay_store(store: ContentStore, final_roots: Dict[RuleId, bytes], params: RuleParams) -> ReplayResult:
    """Audit every rule's log and compare the rebuilt tip to ``final_roots``."""
    result = ReplayResult(True)
    for rule, root in sorted(final_roots.items()):
        try:
            tree = audit_log(store, rule, params)
        except (ChainBreak, RootMismatch, MissingBlob) as exc:
            result.ok = False
            result.failures.append((int(rule), getattr(exc, "seq", None), str(exc)))
            continue
        result.trees[rule] = tree
        if tree.root != root:
            result.ok = False
            tip = store.tip(rule)
            result.failures.append((int(rule), tip["seq"] if tip else 0, "rebuilt root differs from the recorded root"))
    return result


def read_trace(trace_path: Union[str, Path]) -> Tuple[RuleParams, Dict[RuleId, bytes]]:
    params, roots = None, {}
    with open(trace_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
                kind = event["type"]
                if kind == "genesis":
                    params = RuleParams(**event["rule_params"])
                elif kind == "final_root":
                    roots[RuleId(event["rule"])] = unhex(event["root"])
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(f"{trace_path}:{n}: {exc}") from None
    if params is None:
        raise SchemaError(f"{trace_path}: no genesis event")
    if set(roots) != set(RuleId):
        raise SchemaError(f"{trace_path}: final roots missing for some rules")
    return params, roots


def replay_check(trace_path: Union[str, Path], store_dir: Union[str, Path]) -> ReplayResult:
    params, roots = read_trace(trace_path)
    store_dir = Path(store_dir)
    if not (store_dir / "tips.json").exists():
        raise SchemaError(f"{store_dir}: not a content store (no tips.json)")
    return replay_store(ContentStore(store_dir), roots, params)


def replay_verify(trace_path: Union[str, Path], store_dir: Union[str, Path]) -> bool:
    """True iff every rule's final root in the trace is rebuilt from the store."""
    return replay_check(trace_path, store_dir).ok


# --- TEE timing ---------------------------------------------------------------


def bench_batch(rule: RuleId, n: int) -> List[UserOp]:
    """``n`` signed ops from distinct wallets that all pass ``rule`` on a fresh tree."""
    ops = []
    for i in range(n):
        key = derive_private_key(f"bench/{i}".encode())
        op = UserOp(address_of(key), rule, 30_000, 0, 50 * ETH, 1)
        ops.append(op.signed(key))
    return ops


def measure_tee(rule: RuleId, n: int, params: Optional[RuleParams] = None, repeats: int = 5) -> float:
    """Median wall time of ``tee_execute`` on an ``n``-op batch, in seconds."""
    params = params or RuleParams()
    ops = bench_batch(rule, n)
    identity = EnclaveIdentity.create(b"bench")
    bundler = BundlerRegistry((address_of(derive_private_key(b"bench-bundler")),)).ids()[0]
    times = []
    for _ in range(repeats):
        tree = StateTree(rule)
        t0 = time.perf_counter()
        tee_execute(ops, tree, params, identity, 1, bundler)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# --- reports ------------------------------------------------------------------


@dataclass
class BatchRow:
    mode: GasMode
    rule: RuleId
    n_ops: int
    total_gas: int
    overhead_pct: float
    tee_time_measured: Optional[float]
    zk_time_modeled: float
    mem_modeled: int


@dataclass
class RunReport:
    scenario: Scenario
    rows: List[BatchRow]
    trace: List[dict]
    summary: dict
    violations: List[str]
    attacks: List[AttackOutcome]
    replay: ReplayResult
    world: World

    @property
    def ok(self) -> bool:
        return not self.violations


def _pct(gas: int, base: int) -> float:
    return 100.0 * (gas - base) / base


def sweep_rows(scenario: Scenario, tee_times: Optional[Dict[Tuple[RuleId, int], float]] = None) -> List[BatchRow]:
    table, model = scenario.cost_table, scenario.resource_model
    tee_times = tee_times or {}
    rows = []
    for n in scenario.batch_sizes:
        lite = price_bundle(table, GasMode.GASLITE, SWEEP_RULE, n)
        zk_time = model_resources(model, GasMode.ZK, SWEEP_RULE, n).time_s
        for mode in (GasMode.GASLITE, GasMode.ZK, GasMode.INFINITISM):
            gas = price_bundle(table, mode, SWEEP_RULE, n)
            rows.append(
                BatchRow(
                    mode, SWEEP_RULE, n, gas, _pct(gas, lite),
                    tee_times.get((SWEEP_RULE, n)) if mode is GasMode.GASLITE else None,
                    zk_time,
                    model_resources(model, mode, SWEEP_RULE, n).mem_bytes,
                )
            )
    return rows


def _measure_all(scenario: Scenario) -> Dict[Tuple[RuleId, int], float]:
    out = {}
    for n in scenario.batch_sizes:
        out[(SWEEP_RULE, n)] = measure_tee(SWEEP_RULE, n, scenario.rule_params, scenario.tee_repeats)
    for rule in RuleId:
        if (rule, TABLE_BATCH) not in out:
            out[(rule, TABLE_BATCH)] = measure_tee(rule, TABLE_BATCH, scenario.rule_params, scenario.tee_repeats)
    return out


def _summary(world: World, rows: List[BatchRow], tee: Dict[Tuple[RuleId, int], float], replay: ReplayResult) -> dict:
    sc, chain = world.scenario, world.chain
    dispositions: Dict[str, int] = {}
    for d, _ in world.op_final.values():
        dispositions[d] = dispositions.get(d, 0) + 1
    gas_by_mode = {
        m.value: sum(price_bundle(sc.cost_table, m, b.rule, len(b.ops)) for b, _ in world.committed) for m in GasMode
    }
    residuals = []
    for n in sc.batch_sizes:
        ref = REFERENCE_TABLE1.get(n)
        if ref is None:
            continue
        lite = price_bundle(sc.cost_table, GasMode.GASLITE, SWEEP_RULE, n)
        inf = price_bundle(sc.cost_table, GasMode.INFINITISM, SWEEP_RULE, n)
        residuals.append(
            {
                "batch": n,
                "gaslite_rel_err": round((lite - ref[0]) / ref[0], 6),
                "infinitism_rel_err": round((inf - ref[1]) / ref[1], 6),
            }
        )
    timing = {f"rule{int(r)}/{n}": round(t, 6) for (r, n), t in sorted(tee.items())}
    slowdown = None
    if (RuleId.RULE1, TABLE_BATCH) in tee and (RuleId.RULE4, TABLE_BATCH) in tee:
        slowdown = round(tee[(RuleId.RULE4, TABLE_BATCH)] / tee[(RuleId.RULE1, TABLE_BATCH)] - 1.0, 4)
    return {
        "seed": sc.seed,
        "blocks": sc.blocks,
        "final_height": chain.height,
        "bundlers": sc.bundlers,
        "users": sc.users,
        "ops": {"submitted": len(world.op_ids), "dispositions": dict(sorted(dispositions.items()))},
        "bundles": world.receipt_counts,
        "slashes": len(world.slashes),
        "gas_by_mode": gas_by_mode,
        "total_wei": {"genesis": str(world.wei_total), "final": str(chain.total_wei())},
        "final_roots": {f"rule{int(r)}": chain.current_root(r).hex() for r in RuleId},
        "replay": {"ok": replay.ok, "failures": [list(f) for f in replay.failures]},
        "faults": [
            {"kind": f["spec"].kind.value, "at_block": f["spec"].at_block, "target": f["spec"].target,
             "fired_at": f["fired_at"], "detail": f["detail"]}
            for f in world.faults
        ],
        "attacks": [a.as_event() for a in world.attacks],
        "violations": world.violations,
        "tee_time_measured_s": timing,
        "tee_slowdown_rule1_to_rule4": slowdown,
        "table1_residuals": residuals,
        "archive": {"snapshots": world.archive.snapshot_count, "divergences": len(world.archive.divergences)},
    }


def run_scenario(
    scenario: Scenario, store_dir: Union[str, Path, None] = None, measure: Optional[bool] = None
) -> RunReport:
    """Run ``scenario`` to completion. ``measure`` overrides ``scenario.measure_tee``."""
    scenario = scenario.validate()
    world = World(scenario, ContentStore(store_dir) if store_dir is not None else None)
    pending = sorted(enumerate(scenario.attacks), key=lambda p: (p[1].at_block, p[0]))
    while world.chain.height <= scenario.blocks:
        while pending and pending[0][1].at_block <= world.chain.height:
            _, script = pending.pop(0)
            outcome = execute_attack(script, world)
            world.attacks.append(outcome)
            world.emit("attack", **{k: v for k, v in outcome.as_event().items() if k not in ("type", "block")})
            if not outcome.ok:
                world.violation("attack_outcome", f"{outcome.kind.value}: {outcome.observed}")
        if world.chain.height <= scenario.blocks:
            world.step()
    world.finish()

    expected_bad = set(world.forged_rules) | {rule for rule, _ in world.tampered}
    final_roots = {r: world.chain.current_root(r) for r in RuleId}
    replay = replay_store(world.store, final_roots, scenario.rule_params)
    failed_rules = {RuleId(f[0]) for f in replay.failures}
    for rule in RuleId:
        if rule in failed_rules and rule not in expected_bad:
            world.violation("replay", f"{rule.name} store does not rebuild the chain root")
        if rule in replay.trees and rule not in expected_bad:
            if replay.trees[rule].leaves != world.archive.live[rule].leaves:
                world.violation("replay", f"{rule.name} rebuilt leaf map differs from the live tree")
    for rule, seq in world.tampered:
        hits = [f for f in replay.failures if f[0] == int(rule)]
        if not hits:
            world.violation("tamper_detection", f"{rule.name} tampered seq {seq} went unnoticed")
        elif hits[0][1] != seq:
            world.violation("tamper_detection", f"{rule.name} tamper at seq {seq} reported at seq {hits[0][1]}")
    for oid in world.op_ids:
        if oid not in world.op_final:
            world.violation("trace_completeness", f"op {oid} has no disposition")

    do_measure = scenario.measure_tee if measure is None else measure
    tee = _measure_all(scenario) if do_measure else {}
    rows = sweep_rows(scenario, tee)
    summary = _summary(world, rows, tee, replay)
    return RunReport(scenario, rows, world.trace, summary, world.violations, world.attacks, replay, world)


# --- emission -----------------------------------------------------------------


def _num(x, places: int = 6) -> str:
    text = f"{x:.{places}f}".rstrip("0").rstrip(".")
    return text if text not in ("", "-0") else "0"


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def table1_rows(report: RunReport):
    return [(r.n_ops, r.mode.value, int(r.rule), r.total_gas, f"{r.overhead_pct:.2f}") for r in report.rows]


def table2_rows(scenario: Scenario):
    out = []
    for rule in RuleId:
        est = model_resources(scenario.resource_model, GasMode.ZK, rule, TABLE_BATCH)
        out.append((int(rule), _num(est.time_s, 4), _num(est.mem_bytes / MB, 4), _num(est.artifact_bytes / MB, 4)))
    return out


def table3_rows(scenario: Scenario):
    out = []
    for rule in RuleId:
        lite = price_bundle(scenario.cost_table, GasMode.GASLITE, rule, TABLE_BATCH)
        inf = price_bundle(scenario.cost_table, GasMode.INFINITISM, rule, TABLE_BATCH)
        out.append((int(rule), lite, inf, f"{_pct(inf, lite):.2f}"))
    return out


def trace_bytes(trace: List[dict]) -> bytes:
    return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in trace).encode()


def emit_tables(report: RunReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the three tables, the trace and the summary into ``out_dir``."""
    if not report.rows:
        raise ValueError("report has no rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        TABLE1: _csv(TABLE1_HEADER, table1_rows(report)),
        TABLE2: _csv(TABLE2_HEADER, table2_rows(report.scenario)),
        TABLE3: _csv(TABLE3_HEADER, table3_rows(report.scenario)),
        TRACE: trace_bytes(report.trace),
        SUMMARY: (json.dumps(report.summary, sort_keys=True, indent=2) + "\n").encode(),
    }
    written = {}
    for name, data in files.items():
        path = out / name
        path.write_bytes(data)
        written[name] = path
    return written

