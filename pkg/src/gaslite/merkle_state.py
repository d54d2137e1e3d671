"""Per-rule user-state maps committed as sorted-leaf binary Merkle roots.

Leaf 0 is always the rule's global counters, keyed by the zero address.
User leaves follow in ascending address order. Internal nodes hash the
concatenation of their two children; an unpaired node is promoted to the
next level unchanged.
"""

from __future__ import annotations

import struct
from bisect import bisect_left, insort
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

from .core_types import (
    EMPTY_HASH,
    ZERO_ADDRESS,
    EncodingError,
    RuleId,
    check_address,
    keccak256,
    u64,
)
from .errors import UnknownUser

_STATE_FMT = ">7Q"
_GLOBAL_FMT = ">2Q"


@dataclass(frozen=True)
class UserState:
    day_usage: int = 0
    day_index: int = 0
    window_usage: int = 0
    window_index: int = 0
    last_op_block: int = 0
    hist_count: int = 0
    hist_sum: int = 0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise EncodingError(f"{name} must be non-negative")
        if (self.hist_count == 0) != (self.hist_sum == 0):
            raise EncodingError("hist_count and hist_sum must be zero together")

    @property
    def hist_mean(self) -> int:
        return self.hist_sum // self.hist_count if self.hist_count else 0

    def encode(self) -> bytes:
        return b"".join(u64(getattr(self, f)) for f in self.__dataclass_fields__)

    @classmethod
    def decode(cls, data: bytes) -> "UserState":
        if len(data) != 56:
            raise EncodingError("encoded UserState must be 56 bytes")
        return cls(*struct.unpack(_STATE_FMT, data))


@dataclass(frozen=True)
class RuleGlobalState:
    global_day_usage: int = 0
    day_index: int = 0

    def encode(self) -> bytes:
        return u64(self.global_day_usage) + u64(self.day_index)

    @classmethod
    def decode(cls, data: bytes) -> "RuleGlobalState":
        if len(data) != 16:
            raise EncodingError("encoded RuleGlobalState must be 16 bytes")
        return cls(*struct.unpack(_GLOBAL_FMT, data))


@dataclass(frozen=True)
class MerkleProof:
    """Sibling path for one leaf.

    ``leaf_count`` is carried so the verifier can tell which levels promoted
    the node without a sibling.
    """

    leaf_index: int
    siblings: Tuple[bytes, ...]
    leaf_count: int


def leaf_hash(user: bytes, state: UserState) -> bytes:
    return keccak256(user, state.encode())


def global_leaf_hash(state: RuleGlobalState) -> bytes:
    return keccak256(ZERO_ADDRESS, state.encode())


def _next_level(level: List[bytes]) -> List[bytes]:
    out = [keccak256(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
    if len(level) % 2:
        out.append(level[-1])
    return out


def merkle_root(hashes: List[bytes]) -> bytes:
    if not hashes:
        return EMPTY_HASH
    level = list(hashes)
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


def recompute_root(leaves: Mapping[bytes, UserState], global_state: RuleGlobalState) -> bytes:
    """Root from scratch over the sentinel plus every user leaf."""
    hashes = [global_leaf_hash(global_state)]
    hashes.extend(leaf_hash(u, leaves[u]) for u in sorted(leaves))
    return merkle_root(hashes)


def verify_proof(proof: MerkleProof, leaf: bytes, root: bytes) -> bool:
    index, count = proof.leaf_index, proof.leaf_count
    if not 0 <= index < count:
        return False
    node = leaf
    siblings = iter(proof.siblings)
    while count > 1:
        if index % 2 == 0 and index == count - 1:
            pass  # promoted
        else:
            sib = next(siblings, None)
            if sib is None:
                return False
            node = keccak256(sib, node) if index % 2 else keccak256(node, sib)
        index //= 2
        count = (count + 1) // 2
    if next(siblings, None) is not None:
        return False
    return node == root


class StateTree:
    """Mutable state map for one rule with a lazily maintained Merkle root.

    Updating an existing leaf rehashes only its path. Inserting or removing a
    user shifts leaf positions, so the level cache is dropped and rebuilt the
    next time the root or a proof is requested.
    """

    def __init__(
        self,
        rule: RuleId,
        leaves: Optional[Mapping[bytes, UserState]] = None,
        global_state: Optional[RuleGlobalState] = None,
    ):
        self.rule = RuleId(rule)
        self._leaves: Dict[bytes, UserState] = dict(leaves or {})
        for user in self._leaves:
            check_address(user, "user")
            if user == ZERO_ADDRESS:
                raise EncodingError("the zero address is the sentinel slot")
        self._global = global_state or RuleGlobalState()
        self._order: List[bytes] = sorted(self._leaves)
        self._levels: Optional[List[List[bytes]]] = None
        self._position: Dict[bytes, int] = {}

    # -- read side
    @property
    def leaves(self) -> Dict[bytes, UserState]:
        return dict(self._leaves)

    @property
    def global_state(self) -> RuleGlobalState:
        return self._global

    def __contains__(self, user: bytes) -> bool:
        return user in self._leaves

    def __len__(self) -> int:
        return len(self._leaves)

    def state_of(self, user: bytes) -> UserState:
        """Current state, or the zero state for a user never seen."""
        return self._leaves.get(user) or UserState()

    @property
    def root(self) -> bytes:
        return self._ensure_levels()[-1][0]

    def copy(self) -> "StateTree":
        other = StateTree.__new__(StateTree)
        other.rule = self.rule
        other._leaves = dict(self._leaves)
        other._global = self._global
        other._order = list(self._order)
        if self._levels is not None:
            other._levels = [list(level) for level in self._levels]
            other._position = dict(self._position)
        else:
            other._levels = None
            other._position = {}
        return other

    # -- write side
    def set_state(self, user: bytes, state: UserState) -> None:
        if user == ZERO_ADDRESS:
            raise EncodingError("the zero address is the sentinel slot")
        existed = user in self._leaves
        self._leaves[user] = state
        if not existed:
            insort(self._order, check_address(user, "user"))
            self._levels = None
        elif self._levels is not None:
            self._update_path(self._position[user], leaf_hash(user, state))

    def set_global(self, state: RuleGlobalState) -> None:
        self._global = state
        if self._levels is not None:
            self._update_path(0, global_leaf_hash(state))

    def remove(self, user: bytes) -> None:
        if user not in self._leaves:
            raise UnknownUser(user.hex())
        del self._leaves[user]
        i = bisect_left(self._order, user)
        del self._order[i]
        self._levels = None

    def prove(self, user: bytes) -> MerkleProof:
        if user not in self._leaves:
            raise UnknownUser(user.hex())
        levels = self._ensure_levels()
        return self._proof_for(self._position[user], levels)

    def prove_global(self) -> MerkleProof:
        return self._proof_for(0, self._ensure_levels())

    # -- internals
    def _ensure_levels(self) -> List[List[bytes]]:
        if self._levels is None:
            level = [global_leaf_hash(self._global)]
            level.extend(leaf_hash(u, self._leaves[u]) for u in self._order)
            levels = [level]
            while len(level) > 1:
                level = _next_level(level)
                levels.append(level)
            self._levels = levels
            self._position = {u: i + 1 for i, u in enumerate(self._order)}
        return self._levels

    def _update_path(self, index: int, node: bytes) -> None:
        levels = self._levels
        levels[0][index] = node
        for depth in range(len(levels) - 1):
            level = levels[depth]
            if index % 2 == 0 and index == len(level) - 1:
                parent = level[index]
            elif index % 2:
                parent = keccak256(level[index - 1], level[index])
            else:
                parent = keccak256(level[index], level[index + 1])
            index //= 2
            levels[depth + 1][index] = parent

    @staticmethod
    def _proof_for(index: int, levels: List[List[bytes]]) -> MerkleProof:
        siblings = []
        i = index
        for level in levels[:-1]:
            if i % 2 == 0 and i == len(level) - 1:
                pass
            else:
                siblings.append(level[i ^ 1])
            i //= 2
        return MerkleProof(index, tuple(siblings), len(levels[0]))


def prove(tree: StateTree, user: bytes) -> MerkleProof:
    return tree.prove(user)


def apply_leaf_update(tree: StateTree, user: bytes, new_state: UserState) -> bytes:
    tree.set_state(user, new_state)
    return tree.root


def genesis_root() -> bytes:
    return recompute_root({}, RuleGlobalState())
