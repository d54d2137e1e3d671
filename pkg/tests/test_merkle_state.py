import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gaslite.core_types import RuleId, keccak256
from gaslite.errors import EncodingError, UnknownUser
from gaslite.merkle_state import (
    MerkleProof,
    RuleGlobalState,
    StateTree,
    UserState,
    apply_leaf_update,
    genesis_root,
    global_leaf_hash,
    leaf_hash,
    prove,
    recompute_root,
    verify_proof,
)

small = st.integers(0, 10**6)
states = st.builds(lambda a, b, c, d, e, n, s: UserState(a, b, c, d, e, n, s if n else 0), small, small, small, small, small, small, st.integers(1, 10**9))
users = st.binary(min_size=20, max_size=20).filter(lambda b: b != bytes(20))
leaf_maps = st.dictionaries(users, states, max_size=40)


def _t(state: UserState):
    return (state.day_usage, state.day_index, state.window_usage, state.window_index, state.last_op_block, state.hist_count, state.hist_sum)


def test_golden_leaf(golden):
    g = golden["leaf"]
    assert leaf_hash(bytes.fromhex(g["user"]), UserState(*g["state"])).hex() == g["hash"]
    gg = golden["global_leaf"]
    assert global_leaf_hash(RuleGlobalState(*gg["state"])).hex() == gg["hash"]


def test_leaf_is_deterministic_and_binds_user():
    s = UserState(1, 2, 3, 4, 5, 6, 7)
    assert leaf_hash(b"\x01" * 20, s) == leaf_hash(b"\x01" * 20, s)
    assert leaf_hash(b"\x01" * 20, s) != leaf_hash(b"\x02" * 20, s)


def test_empty_tree_root_is_sentinel_leaf(golden):
    root = recompute_root({}, RuleGlobalState())
    assert root == global_leaf_hash(RuleGlobalState()) == genesis_root()
    assert root.hex() == golden["empty_root"]
    assert StateTree(RuleId.RULE1).root == root


def test_three_user_hand_built_root(golden):
    g = golden["three_user_tree"]
    leaves = {bytes.fromhex(u): UserState(*s) for u, s in g["users"].items()}
    l0, l1, l2, l3 = (bytes.fromhex(h) for h in g["leaves"])
    assert recompute_root(leaves, RuleGlobalState()) == keccak256(keccak256(l0, l1), keccak256(l2, l3))
    assert recompute_root(leaves, RuleGlobalState()).hex() == g["root"]
    assert StateTree(RuleId.RULE1, leaves).root.hex() == g["root"]


def test_insert_then_remove_restores_root():
    t = StateTree(RuleId.RULE2, {b"\x05" * 20: UserState(1, 0, 0, 0, 0, 1, 1)})
    before = t.root
    t.set_state(b"\x09" * 20, UserState(9, 0, 0, 0, 0, 1, 9))
    assert t.root != before
    t.remove(b"\x09" * 20)
    assert t.root == before
    with pytest.raises(UnknownUser):
        t.remove(b"\x09" * 20)


@given(leaf_maps)
def test_root_matches_oracle(leaves):
    t = StateTree(RuleId.RULE1, leaves)
    want = oracles.state_root({u: _t(s) for u, s in leaves.items()}, hasher=keccak256)
    assert t.root == want == recompute_root(leaves, RuleGlobalState())


@given(leaf_maps.filter(bool), st.data())
def test_every_leaf_proves(leaves, data):
    t = StateTree(RuleId.RULE3, leaves)
    for u, s in leaves.items():
        p = prove(t, u)
        assert verify_proof(p, leaf_hash(u, s), t.root)
    g = t.prove_global()
    assert g.leaf_index == 0
    assert verify_proof(g, global_leaf_hash(t.global_state), t.root)


def test_proof_tamper_and_wrong_root():
    rng = random.Random(3)
    leaves = {rng.randbytes(20): UserState(hist_count=1, hist_sum=i + 1) for i in range(9)}
    t = StateTree(RuleId.RULE1, leaves)
    u = sorted(leaves)[4]
    p = t.prove(u)
    leaf = leaf_hash(u, leaves[u])
    assert verify_proof(p, leaf, t.root)
    assert not verify_proof(p, leaf, keccak256(b"elsewhere"))
    for i in range(len(p.siblings)):
        sib = list(p.siblings)
        sib[i] = bytes([sib[i][0] ^ 1]) + sib[i][1:]
        assert not verify_proof(MerkleProof(p.leaf_index, tuple(sib), p.leaf_count), leaf, t.root)
    assert not verify_proof(MerkleProof(p.leaf_index, p.siblings[:-1], p.leaf_count), leaf, t.root)
    assert not verify_proof(MerkleProof(p.leaf_index, p.siblings + (leaf,), p.leaf_count), leaf, t.root)
    assert not verify_proof(MerkleProof(p.leaf_index ^ 1, p.siblings, p.leaf_count), leaf, t.root)
    with pytest.raises(UnknownUser):
        t.prove(b"\x77" * 20)


def test_sentinel_proof_in_four_leaf_tree(golden):
    g = golden["three_user_tree"]
    leaves = {bytes.fromhex(u): UserState(*s) for u, s in g["users"].items()}
    l0, l1, l2, l3 = (bytes.fromhex(h) for h in g["leaves"])
    proof = MerkleProof(0, (l1, keccak256(l2, l3)), 4)
    assert verify_proof(proof, l0, bytes.fromhex(g["root"]))
    assert StateTree(RuleId.RULE1, leaves).prove_global() == proof
    # an odd index would put the sentinel on the right
    assert not verify_proof(MerkleProof(1, proof.siblings, 4), l0, bytes.fromhex(g["root"]))


def test_thousand_user_tree_sampled_proofs():
    rng = random.Random(1000)
    leaves = {rng.randbytes(20): UserState(rng.randrange(10**6), 0, 0, 0, rng.randrange(99), 1, 1 + rng.randrange(10**6)) for _ in range(1000)}
    t = StateTree(RuleId.RULE4, leaves)
    for u in rng.sample(sorted(leaves), 50):
        assert verify_proof(t.prove(u), leaf_hash(u, leaves[u]), t.root)


def test_update_to_current_value_is_noop():
    t = StateTree(RuleId.RULE1, {b"\x01" * 20: UserState(5, 0, 0, 0, 0, 1, 5)})
    r = t.root
    assert apply_leaf_update(t, b"\x01" * 20, UserState(5, 0, 0, 0, 0, 1, 5)) == r


def test_incremental_matches_rebuild_200_updates():
    rng = random.Random(200)
    pool = [rng.randbytes(20) for _ in range(30)]
    t = StateTree(RuleId.RULE2)
    ref = {}
    t.root  # build the cache so later updates take the incremental path
    for i in range(200):
        u = rng.choice(pool)
        s = UserState(rng.randrange(10**6), 0, 0, 0, i, 1, 1 + rng.randrange(10**5))
        ref[u] = s
        assert apply_leaf_update(t, u, s) == recompute_root(ref, RuleGlobalState())
        if i % 17 == 0:
            g = RuleGlobalState(rng.randrange(10**7), i)
            t.set_global(g)
            assert t.root == recompute_root(ref, g)
            t.set_global(RuleGlobalState())


def test_update_is_local():
    rng = random.Random(9)
    leaves = {rng.randbytes(20): UserState(hist_count=1, hist_sum=i + 1) for i in range(6)}
    t = StateTree(RuleId.RULE1, leaves)
    a, b = sorted(leaves)[:2]
    t.set_state(a, UserState(99, 0, 0, 0, 0, 2, 7))
    assert leaf_hash(b, t.state_of(b)) == leaf_hash(b, leaves[b])


@given(leaf_maps.filter(bool), states, st.data())
def test_any_single_leaf_change_changes_root(leaves, new, data):
    t = StateTree(RuleId.RULE1, leaves)
    u = data.draw(st.sampled_from(sorted(leaves)))
    if new == leaves[u]:
        new = replace(new, day_usage=new.day_usage + 1)
    r = t.root
    t.set_state(u, new)
    assert t.root != r


@given(leaf_maps)
def test_copy_is_independent(leaves):
    t = StateTree(RuleId.RULE1, leaves)
    c = t.copy()
    c.set_state(b"\x42" * 20, UserState(1, 0, 0, 0, 0, 1, 1))
    assert t.root == recompute_root(leaves, RuleGlobalState())


@given(states)
def test_state_roundtrip(s):
    assert UserState.decode(s.encode()) == s
    assert len(s.encode()) == 56


def test_state_invariants():
    with pytest.raises(EncodingError):
        UserState(day_usage=-1)
    with pytest.raises(EncodingError):
        UserState(hist_count=1, hist_sum=0)
    assert UserState().hist_mean == 0
    assert UserState(hist_count=3, hist_sum=10).hist_mean == 3
    assert RuleGlobalState.decode(RuleGlobalState(5, 6).encode()) == RuleGlobalState(5, 6)
    with pytest.raises(EncodingError):
        StateTree(RuleId.RULE1, {bytes(20): UserState()})
