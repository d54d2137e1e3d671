"""Deterministic op-to-bundler assignment over a circular bundler registry.

A user is served at block ``t`` by the bundler in slot
``(uint256(keccak256(user)) + t) mod |B|``, so within a block every op from a
user lands on one bundler and across blocks the user walks the whole ring.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Tuple

from .core_types import BundlerId, UserOp, check_address, keccak256
from .errors import DuplicateBundler, EmptyRegistry, UnknownBundler

DEFAULT_GRACE = 1


@lru_cache(maxsize=1 << 16)
def user_offset(user: bytes) -> int:
    return int.from_bytes(keccak256(user), "big")


@dataclass(frozen=True)
class BundlerRegistry:
    active: Tuple[bytes, ...] = ()
    epoch: int = 0

    def __post_init__(self):
        active = tuple(check_address(a, "bundler account") for a in self.active)
        if len(set(active)) != len(active):
            raise DuplicateBundler("bundler listed twice in the registry")
        object.__setattr__(self, "active", active)

    def __len__(self) -> int:
        return len(self.active)

    def __contains__(self, account: bytes) -> bool:
        return account in self.active

    def ids(self) -> Tuple[BundlerId, ...]:
        return tuple(BundlerId(i, a) for i, a in enumerate(self.active))

    def id_of(self, account: bytes) -> BundlerId:
        try:
            return BundlerId(self.active.index(account), account)
        except ValueError:
            raise UnknownBundler(account.hex()) from None


def assign_index(user: bytes, block: int, registry: BundlerRegistry) -> int:
    if not registry.active:
        raise EmptyRegistry("no active bundlers")
    return (user_offset(user) + block) % len(registry.active)


def assign(user: bytes, block: int, registry: BundlerRegistry) -> BundlerId:
    i = assign_index(user, block, registry)
    return BundlerId(i, registry.active[i])


def verify_assignment(
    op: UserOp, bundler: BundlerId, block: int, registry: BundlerRegistry, grace: int = DEFAULT_GRACE
) -> bool:
    """True if ``bundler`` owned ``op.sender`` at any block in ``[block - grace, block]``.

    Only the account is compared; indices shift under churn.
    """
    if not registry.active:
        return False
    for b in range(max(0, block - grace), block + 1):
        if registry.active[assign_index(op.sender, b, registry)] == bundler.account:
            return True
    return False


def rotate_membership(
    registry: BundlerRegistry, joins: Iterable[bytes], leaves: Iterable[bytes], block: int
) -> BundlerRegistry:
    """Remove ``leaves``, keep survivors in order, append ``joins`` at the tail."""
    joins = [check_address(a, "bundler account") for a in joins]
    leaves = set(leaves)
    for a in leaves:
        if a not in registry.active:
            raise UnknownBundler(a.hex())
    seen = set()
    for a in joins:
        if a in registry.active or a in seen:
            raise DuplicateBundler(a.hex())
        seen.add(a)
    if not joins and not leaves:
        return registry
    survivors = [a for a in registry.active if a not in leaves]
    return BundlerRegistry(tuple(survivors + joins), block)
