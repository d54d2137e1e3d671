"""Scenario configuration: dataclasses, TOML loading and seeded randomness.

Every loader error is a :class:`ConfigError` carrying the dotted path of the
offending field, e.g. ``faults[1].at_block``.
"""

from __future__ import annotations

import random
import sys
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

from .adversary import AttackKind, AttackScript
from .chain import ChainConfig
from .core_types import RuleId, keccak256
from .errors import ConfigError, GasLiteError
from .gas_model import (
    CostTable,
    GasMode,
    InfinitismCoeffs,
    ResourceModel,
    ResourceProfile,
    calibrate,
    load_anchors,
    reference_anchors,
)
from .rules import RuleParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_BATCH_SIZES = (1, 20, 50, 100, 200, 400, 600, 800, 1000)


class FaultKind(str, Enum):
    REVERT_OP = "RevertOp"
    BUNDLER_CRASH = "BundlerCrash"
    FORGED_ROOT = "ForgedRoot"
    STALE_SUBMIT = "StaleSubmit"
    TAMPERED_LOG_BLOB = "TamperedLogBlob"


# which kind of identifier each fault targets
FAULT_TARGETS = {
    FaultKind.REVERT_OP: "user",
    FaultKind.BUNDLER_CRASH: "bundler",
    FaultKind.FORGED_ROOT: "bundler",
    FaultKind.STALE_SUBMIT: "bundler",
    FaultKind.TAMPERED_LOG_BLOB: "rule",
}


def parse_target(target: str) -> Tuple[str, int]:
    """Split ``"bundler:2"`` into ``("bundler", 2)``; rules accept ``"rule:4"`` or ``"rule4"``."""
    text = str(target).strip().lower()
    if ":" in text:
        kind, _, idx = text.partition(":")
    elif text.startswith("rule"):
        kind, idx = "rule", text[4:]
    else:
        raise ValueError(f"target {target!r} is not of the form kind:index")
    return kind, int(idx)


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    at_block: int
    target: str

    @property
    def target_index(self) -> int:
        return parse_target(self.target)[1]


@dataclass(frozen=True)
class Workload:
    ops_per_block: int = 8
    gas_min: int = 21_000
    gas_max: int = 250_000
    balance_min_eth: int = 0
    balance_max_eth: int = 100

    def __post_init__(self):
        if self.ops_per_block < 0:
            raise ValueError("ops_per_block must be non-negative")
        if not 1 <= self.gas_min <= self.gas_max:
            raise ValueError("need 1 <= gas_min <= gas_max")
        if not 0 <= self.balance_min_eth <= self.balance_max_eth:
            raise ValueError("need 0 <= balance_min_eth <= balance_max_eth")


def _default_mix() -> Dict[RuleId, int]:
    return {r: 1 for r in RuleId}


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    blocks: int = 100
    bundlers: int = 3
    users: int = 50
    rule_mix: Mapping[RuleId, int] = field(default_factory=_default_mix)
    batch_sizes: Tuple[int, ...] = DEFAULT_BATCH_SIZES
    rule_params: RuleParams = field(default_factory=RuleParams)
    cost_table: CostTable = field(default_factory=CostTable)
    resource_model: ResourceModel = field(default_factory=ResourceModel)
    faults: Tuple[FaultSpec, ...] = ()
    attacks: Tuple[AttackScript, ...] = ()
    workload: Workload = field(default_factory=Workload)
    chain: ChainConfig = field(default_factory=ChainConfig)
    gas_mode: GasMode = GasMode.GASLITE
    max_batch: int = 1000
    snapshot_every: int = 50
    tee_repeats: int = 5
    measure_tee: bool = True

    def validate(self) -> "Scenario":
        for name in ("blocks", "bundlers", "users", "max_batch", "snapshot_every", "tee_repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        if any(w < 0 for w in self.rule_mix.values()) or sum(self.rule_mix.values()) <= 0:
            raise ConfigError("rule_mix", "weights must be non-negative with a positive total")
        if not self.batch_sizes:
            raise ConfigError("batch_sizes", "must not be empty")
        for i, n in enumerate(self.batch_sizes):
            if n < 1:
                raise ConfigError(f"batch_sizes[{i}]", "must be at least 1")
        limits = {"bundler": self.bundlers, "user": self.users, "rule": 5}
        for i, f in enumerate(self.faults):
            if not 1 <= f.at_block <= self.blocks:
                raise ConfigError(f"faults[{i}].at_block", f"{f.at_block} outside the run (1..{self.blocks})")
            try:
                kind, idx = parse_target(f.target)
            except ValueError as exc:
                raise ConfigError(f"faults[{i}].target", str(exc)) from None
            want = FAULT_TARGETS[f.kind]
            lo = 1 if want == "rule" else 0
            if kind != want or not lo <= idx < limits[want]:
                raise ConfigError(f"faults[{i}].target", f"{f.kind.value} needs a valid {want} target, got {f.target!r}")
        for i, a in enumerate(self.attacks):
            if not 1 <= a.at_block <= self.blocks:
                raise ConfigError(f"attacks[{i}].at_block", f"{a.at_block} outside the run (1..{self.blocks})")
        return self


# --- randomness ---------------------------------------------------------------


def derive_rng(seed: int, label: str) -> random.Random:
    """Independent generator for one concern, derived from the master seed."""
    material = keccak256(seed.to_bytes(32, "big"), b"/", label.encode())
    return random.Random(int.from_bytes(material, "big"))


# --- loading ------------------------------------------------------------------

_SCALARS = {
    "seed": int,
    "blocks": int,
    "bundlers": int,
    "users": int,
    "max_batch": int,
    "snapshot_every": int,
    "tee_repeats": int,
    "measure_tee": bool,
}


def _check_keys(table: Mapping, allowed, path: str) -> None:
    for key in table:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown field")


def _typed(value: Any, kind: type, path: str):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
    return value


def _table(value: Any, path: str) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError(path, "expected a table")
    return value


def _fraction(value: Any, path: str) -> Fraction:
    if isinstance(value, bool):
        raise ConfigError(path, f"expected a number, got {value!r}")
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(path, f"expected a number or 'p/q' string, got {value!r}") from None


def _int_dataclass(cls, table: Mapping, path: str):
    names = {f.name for f in fields(cls)}
    _check_keys(table, names, path)
    kwargs = {k: _typed(v, int, f"{path}.{k}") for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _rule_key(key: str, path: str) -> RuleId:
    try:
        return RuleId.parse(key)
    except ValueError:
        raise ConfigError(f"{path}.{key}", "not a rule id (rule1..rule4)") from None


def _mode_key(key: str, path: str) -> GasMode:
    try:
        return GasMode.parse(key)
    except ValueError:
        raise ConfigError(f"{path}.{key}", "not a gas mode (infinitism, zk, gaslite)") from None


def _load_cost_table(raw: Mapping, base_dir: Path) -> CostTable:
    path = "cost_table"
    scalars = ("base_bundle_gas", "per_op_exec_gas", "attestation_verify_gas", "zk_verify_gas")
    _check_keys(raw, scalars + ("infinitism", "anchors", "shape_from"), path)
    table = CostTable()
    over = {k: _typed(raw[k], int, f"{path}.{k}") for k in scalars if k in raw}
    for k, v in over.items():
        if v < 0:
            raise ConfigError(f"{path}.{k}", "must be non-negative")
    table = replace(table, **over)
    if "infinitism" in raw:
        coeffs = dict(table.infinitism_rule_gas)
        inf = _table(raw["infinitism"], f"{path}.infinitism")
        for key, entry in inf.items():
            rule = _rule_key(key, f"{path}.infinitism")
            where = f"{path}.infinitism.{key}"
            entry = _table(entry, where)
            _check_keys(entry, ("fixed_gas", "per_op_check", "per_op_storage", "congestion_coeff"), where)
            cur = coeffs[rule]
            coeffs[rule] = InfinitismCoeffs(
                _typed(entry.get("fixed_gas", cur.fixed_gas), int, f"{where}.fixed_gas"),
                _typed(entry.get("per_op_check", cur.per_op_check), int, f"{where}.per_op_check"),
                _typed(entry.get("per_op_storage", cur.per_op_storage), int, f"{where}.per_op_storage"),
                _fraction(entry.get("congestion_coeff", cur.congestion_coeff), f"{where}.congestion_coeff"),
            )
        table = replace(table, infinitism_rule_gas=coeffs)
    if "anchors" in raw:
        src = raw["anchors"]
        if not isinstance(src, str):
            raise ConfigError(f"{path}.anchors", "expected 'reference' or a CSV path")
        shape = None
        if "shape_from" in raw:
            shape = _rule_key(str(raw["shape_from"]), path)
        try:
            anchors = reference_anchors() if src == "reference" else load_anchors(base_dir / src)
            table = calibrate(table, anchors, shape_from=shape)
        except (OSError, KeyError, ValueError, GasLiteError) as exc:
            raise ConfigError(f"{path}.anchors", str(exc)) from None
    return table


_PROFILE_FIELDS = tuple(f.name for f in fields(ResourceProfile))


def _load_resource_model(raw: Mapping) -> ResourceModel:
    path = "resource_model"
    profiles = dict(ResourceModel().profiles)
    for mkey, per_rule in raw.items():
        mode = _mode_key(mkey, path)
        for rkey, entry in _table(per_rule, f"{path}.{mkey}").items():
            rule = _rule_key(rkey, f"{path}.{mkey}")
            where = f"{path}.{mkey}.{rkey}"
            entry = _table(entry, where)
            _check_keys(entry, _PROFILE_FIELDS, where)
            cur = profiles[(mode, rule)]
            values = {k: _fraction(entry[k], f"{where}.{k}") for k in entry}
            try:
                profiles[(mode, rule)] = replace(cur, **values)
            except ValueError as exc:
                raise ConfigError(where, str(exc)) from None
    return ResourceModel(profiles)


def _load_faults(raw: Any):
    if not isinstance(raw, list):
        raise ConfigError("faults", "expected an array of tables")
    out = []
    for i, entry in enumerate(raw):
        where = f"faults[{i}]"
        entry = _table(entry, where)
        _check_keys(entry, ("kind", "at_block", "target"), where)
        for k in ("kind", "at_block", "target"):
            if k not in entry:
                raise ConfigError(f"{where}.{k}", "missing")
        try:
            kind = FaultKind(entry["kind"])
        except ValueError:
            raise ConfigError(f"{where}.kind", f"unknown fault kind {entry['kind']!r}") from None
        out.append(FaultSpec(kind, _typed(entry["at_block"], int, f"{where}.at_block"), str(entry["target"])))
    return tuple(out)


def _load_attacks(raw: Any):
    if not isinstance(raw, list):
        raise ConfigError("attacks", "expected an array of tables")
    out = []
    for i, entry in enumerate(raw):
        where = f"attacks[{i}]"
        entry = dict(_table(entry, where))
        if "kind" not in entry:
            raise ConfigError(f"{where}.kind", "missing")
        try:
            kind = AttackKind(entry.pop("kind"))
        except ValueError:
            raise ConfigError(f"{where}.kind", "unknown attack kind") from None
        at_block = _typed(entry.pop("at_block", 1), int, f"{where}.at_block")
        params = _table(entry.pop("params", {}), f"{where}.params")
        _check_keys(entry, (), where)
        out.append(AttackScript(kind, at_block, dict(params)))
    return tuple(out)


def scenario_from_dict(raw: Mapping, base_dir: Union[str, Path] = ".") -> Scenario:
    base_dir = Path(base_dir)
    known = set(_SCALARS) | {
        "rule_mix", "batch_sizes", "rule_params", "cost_table", "resource_model", "faults", "attacks",
        "workload", "chain", "gas_mode",
    }
    _check_keys(raw, known, "")
    kwargs: Dict[str, Any] = {k: _typed(raw[k], t, k) for k, t in _SCALARS.items() if k in raw}
    if "rule_mix" in raw:
        mix = {r: 0 for r in RuleId}
        for key, w in _table(raw["rule_mix"], "rule_mix").items():
            mix[_rule_key(key, "rule_mix")] = _typed(w, int, f"rule_mix.{key}")
        kwargs["rule_mix"] = mix
    if "batch_sizes" in raw:
        sizes = raw["batch_sizes"]
        if not isinstance(sizes, list):
            raise ConfigError("batch_sizes", "expected an array of integers")
        kwargs["batch_sizes"] = tuple(_typed(n, int, f"batch_sizes[{i}]") for i, n in enumerate(sizes))
    if "gas_mode" in raw:
        kwargs["gas_mode"] = _mode_key(str(raw["gas_mode"]), "")
    if "rule_params" in raw:
        kwargs["rule_params"] = _int_dataclass(RuleParams, _table(raw["rule_params"], "rule_params"), "rule_params")
    if "workload" in raw:
        kwargs["workload"] = _int_dataclass(Workload, _table(raw["workload"], "workload"), "workload")
    if "chain" in raw:
        kwargs["chain"] = _int_dataclass(ChainConfig, _table(raw["chain"], "chain"), "chain")
    if "cost_table" in raw:
        kwargs["cost_table"] = _load_cost_table(_table(raw["cost_table"], "cost_table"), base_dir)
    if "resource_model" in raw:
        kwargs["resource_model"] = _load_resource_model(_table(raw["resource_model"], "resource_model"))
    if "faults" in raw:
        kwargs["faults"] = _load_faults(raw["faults"])
    if "attacks" in raw:
        kwargs["attacks"] = _load_attacks(raw["attacks"])
    return Scenario(**kwargs).validate()


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return scenario_from_dict(raw, path.parent)


def example_scenario_path() -> Path:
    return Path(__file__).with_name("data") / "scenario.example.toml"


def default_scenario(**overrides) -> Scenario:
    return replace(Scenario(), **overrides).validate()
