"""
Shared vocabulary: hashing, keys and signatures, user operations, attestations
and optimized bundles.

All multi-byte integers are big-endian and fixed width. The canonical op
serialization (the signing preimage) is

    sender(20) | rule(1) | gas_cost(8) | nonce(8) | wallet_balance(32) | submit_block(8)

and the signature is carried after it in ``UserOp.encode`` but never hashed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, Optional, Tuple

import coincurve
from Crypto.Hash import keccak

from .errors import EncodingError

ADDRESS_LEN = 20
HASH_LEN = 32
SIG_LEN = 65
PUBKEY_LEN = 33

ZERO_ADDRESS = bytes(ADDRESS_LEN)
EMPTY_SIGNATURE = bytes(SIG_LEN)

U64_MAX = 2**64 - 1
U256_MAX = 2**256 - 1

_SECP256K1_N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141


def keccak256(*parts: bytes) -> bytes:
    h = keccak.new(digest_bits=256)
    for p in parts:
        h.update(p)
    return h.digest()


EMPTY_HASH = keccak256(b"")


def u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise EncodingError(f"value {value} does not fit in u64")
    return value.to_bytes(8, "big")


def u256(value: int) -> bytes:
    if not 0 <= value <= U256_MAX:
        raise EncodingError(f"value {value} does not fit in u256")
    return value.to_bytes(32, "big")


def check_address(addr: bytes, what: str = "address") -> bytes:
    if not isinstance(addr, (bytes, bytearray)) or len(addr) != ADDRESS_LEN:
        raise EncodingError(f"{what} must be {ADDRESS_LEN} bytes")
    return bytes(addr)


def check_hash(h: bytes, what: str = "hash") -> bytes:
    if not isinstance(h, (bytes, bytearray)) or len(h) != HASH_LEN:
        raise EncodingError(f"{what} must be {HASH_LEN} bytes")
    return bytes(h)


# --- keys and signatures -------------------------------------------------


def derive_private_key(label: bytes) -> bytes:
    """Deterministic secp256k1 scalar from an arbitrary label."""
    counter = 0
    while True:
        k = keccak256(b"gaslite/key", label, counter.to_bytes(4, "big"))
        if 0 < int.from_bytes(k, "big") < _SECP256K1_N:
            return k
        counter += 1


@lru_cache(maxsize=65536)
def public_key(private_key: bytes) -> bytes:
    """33-byte compressed public key."""
    return coincurve.PrivateKey(private_key).public_key.format(compressed=True)


@lru_cache(maxsize=65536)
def pubkey_to_address(pubkey: bytes) -> bytes:
    """Ethereum-style address: last 20 bytes of keccak256 of the raw point."""
    raw = coincurve.PublicKey(pubkey).format(compressed=False)[1:]
    return keccak256(raw)[-ADDRESS_LEN:]


def address_of(private_key: bytes) -> bytes:
    return pubkey_to_address(public_key(private_key))


def sign_digest(private_key: bytes, digest: bytes) -> bytes:
    """Recoverable 65-byte signature (r | s | recid), RFC 6979 deterministic."""
    return coincurve.PrivateKey(private_key).sign_recoverable(digest, hasher=None)


def recover_pubkey(digest: bytes, signature: bytes) -> Optional[bytes]:
    if len(signature) != SIG_LEN or len(digest) != HASH_LEN:
        return None
    try:
        pub = coincurve.PublicKey.from_signature_and_message(signature, digest, hasher=None)
    except Exception:
        return None
    return pub.format(compressed=True)


def verify_signature(pubkey: bytes, digest: bytes, signature: bytes) -> bool:
    return recover_pubkey(digest, signature) == pubkey


# --- identifiers -----------------------------------------------------------


class RuleId(IntEnum):
    RULE1 = 1
    RULE2 = 2
    RULE3 = 3
    RULE4 = 4

    @classmethod
    def parse(cls, value) -> "RuleId":
        if isinstance(value, RuleId):
            return value
        if isinstance(value, str):
            text = value.strip().lower().replace("_", "").replace(" ", "")
            if text.startswith("rule"):
                text = text[4:]
            value = int(text)
        return cls(int(value))


@dataclass(frozen=True, order=True)
class BundlerId:
    """A bundler's account plus its current slot in the circular registry.

    Identity is the account; the index is only meaningful for the registry
    snapshot it came from.
    """

    index: int
    account: bytes

    def __post_init__(self):
        check_address(self.account, "bundler account")
        if self.index < 0:
            raise EncodingError("bundler index must be non-negative")


# --- user operations -------------------------------------------------------

_OP_PREIMAGE_LEN = ADDRESS_LEN + 1 + 8 + 8 + 32 + 8
OP_ENCODED_LEN = _OP_PREIMAGE_LEN + SIG_LEN


@dataclass(frozen=True)
class UserOp:
    sender: bytes
    rule: RuleId
    gas_cost: int
    nonce: int
    wallet_balance: int
    submit_block: int
    signature: bytes = EMPTY_SIGNATURE

    def __post_init__(self):
        check_address(self.sender, "sender")
        if self.sender == ZERO_ADDRESS:
            raise EncodingError("the zero address is reserved and cannot send ops")
        if self.gas_cost <= 0:
            raise EncodingError("gas_cost must be positive")
        if len(self.signature) != SIG_LEN:
            raise EncodingError(f"signature must be {SIG_LEN} bytes")
        object.__setattr__(self, "rule", RuleId(self.rule))

    def preimage(self) -> bytes:
        return (
            self.sender
            + bytes([int(self.rule)])
            + u64(self.gas_cost)
            + u64(self.nonce)
            + u256(self.wallet_balance)
            + u64(self.submit_block)
        )

    def digest(self) -> bytes:
        return op_digest(self)

    @property
    def key(self) -> Tuple[bytes, int]:
        """(sender, nonce): the replay-protection identity of an op."""
        return (self.sender, self.nonce)

    def signed(self, private_key: bytes) -> "UserOp":
        return replace(self, signature=sign_digest(private_key, op_digest(self)))

    def signer(self) -> Optional[bytes]:
        pub = recover_pubkey(op_digest(self), self.signature)
        return None if pub is None else pubkey_to_address(pub)

    def has_valid_signature(self) -> bool:
        return self.signer() == self.sender

    def encode(self) -> bytes:
        return self.preimage() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "UserOp":
        if len(data) != OP_ENCODED_LEN:
            raise EncodingError(f"encoded op must be {OP_ENCODED_LEN} bytes, got {len(data)}")
        sender = data[0:20]
        rule = data[20]
        gas_cost, nonce = struct.unpack(">QQ", data[21:37])
        balance = int.from_bytes(data[37:69], "big")
        (submit_block,) = struct.unpack(">Q", data[69:77])
        try:
            rule_id = RuleId(rule)
        except ValueError as exc:
            raise EncodingError(f"unknown rule byte {rule}") from exc
        return cls(sender, rule_id, gas_cost, nonce, balance, submit_block, data[77:])


def op_digest(op: UserOp) -> bytes:
    return keccak256(op.preimage())


def batch_digest(ops: Iterable[UserOp]) -> bytes:
    return keccak256(b"".join(op_digest(op) for op in ops))


# --- attestation and bundles ------------------------------------------------

ATTESTATION_LEN = HASH_LEN + PUBKEY_LEN + 8 + SIG_LEN


@dataclass(frozen=True)
class Attestation:
    mrenclave: bytes
    enclave_pubkey: bytes
    report_block: int
    signature: bytes

    def encode(self) -> bytes:
        return self.mrenclave + self.enclave_pubkey + u64(self.report_block) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "Attestation":
        if len(data) != ATTESTATION_LEN:
            raise EncodingError("bad attestation length")
        (block,) = struct.unpack(">Q", data[65:73])
        return cls(data[:32], data[32:65], block, data[73:])


def attested_payload(
    old_root: bytes, new_root: bytes, rule: RuleId, bundler_account: bytes, block: int, ops_digest: bytes
) -> bytes:
    """The 32-byte message an enclave signs for one batch.

    Binding the old root, bundler, block and batch contents keeps an
    attestation from being replayed on any other bundle.
    """
    return keccak256(
        check_hash(old_root),
        check_hash(new_root),
        bytes([int(rule)]),
        check_address(bundler_account),
        u64(block),
        check_hash(ops_digest),
    )


@dataclass(frozen=True)
class OptimizedBundle:
    ops: Tuple[UserOp, ...]
    rule: RuleId
    bundler: BundlerId
    old_root: bytes
    new_root: bytes
    attestation: Attestation
    submit_block: int

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "rule", RuleId(self.rule))
        if not self.ops:
            raise EncodingError("a bundle needs at least one op")
        if any(op.rule != self.rule for op in self.ops):
            raise EncodingError("all ops in a bundle must share the bundle's rule")
        if self.new_root == self.old_root:
            raise EncodingError("a non-empty bundle must change the root")
        check_hash(self.old_root, "old_root")
        check_hash(self.new_root, "new_root")

    def payload(self) -> bytes:
        return attested_payload(
            self.old_root,
            self.new_root,
            self.rule,
            self.bundler.account,
            self.attestation.report_block,
            batch_digest(self.ops),
        )

    def encode(self) -> bytes:
        return b"".join(
            [
                bytes([int(self.rule)]),
                u64(self.bundler.index),
                self.bundler.account,
                self.old_root,
                self.new_root,
                self.attestation.encode(),
                u64(self.submit_block),
                len(self.ops).to_bytes(4, "big"),
                *(op.encode() for op in self.ops),
            ]
        )

    @classmethod
    def decode(cls, data: bytes) -> "OptimizedBundle":
        try:
            rule = RuleId(data[0])
            (index,) = struct.unpack(">Q", data[1:9])
            account = data[9:29]
            old_root, new_root = data[29:61], data[61:93]
            pos = 93
            att = Attestation.decode(data[pos : pos + ATTESTATION_LEN])
            pos += ATTESTATION_LEN
            (submit_block,) = struct.unpack(">Q", data[pos : pos + 8])
            count = int.from_bytes(data[pos + 8 : pos + 12], "big")
            pos += 12
        except (IndexError, struct.error, ValueError) as exc:
            raise EncodingError("truncated bundle") from exc
        if len(data) != pos + count * OP_ENCODED_LEN:
            raise EncodingError("bundle length does not match op count")
        ops = tuple(
            UserOp.decode(data[pos + i * OP_ENCODED_LEN : pos + (i + 1) * OP_ENCODED_LEN]) for i in range(count)
        )
        return cls(ops, rule, BundlerId(index, account), old_root, new_root, att, submit_block)

    @property
    def bundle_id(self) -> bytes:
        return keccak256(self.encode())


def hexify(b: bytes) -> str:
    return "0x" + b.hex()


def unhex(s: str) -> bytes:
    return bytes.fromhex(s[2:] if s.startswith("0x") else s)
