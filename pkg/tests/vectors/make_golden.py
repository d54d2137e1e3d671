"""Regenerate golden.json from the pure-Python oracle (never from gaslite).

    python3 tests/vectors/make_golden.py
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402

SENDER = bytes.fromhex("5a0b54d5dc17e0aadc383d2db43b0a0d3e029c4c")
USERS = [bytes([i]) * 20 for i in (0x11, 0x22, 0x33)]


def build() -> dict:
    op = dict(sender=SENDER.hex(), rule=4, gas_cost=123_456, nonce=7, wallet_balance=25 * 10**18, submit_block=42)
    pre = oracles.op_preimage(SENDER, 4, 123_456, 7, 25 * 10**18, 42)
    state = (1_000, 3, 500, 31, 310, 4, 2_000)
    glob = (77_000, 3)
    three = {u: (i + 1, 0, 0, 0, i, 1, i + 1) for i, u in enumerate(USERS)}
    l0 = oracles.keccak256(bytes(20) + oracles.global_bytes(0, 0))
    ls = [oracles.keccak256(u + oracles.state_bytes(*three[u])) for u in sorted(three)]
    root3 = oracles.keccak256(oracles.keccak256(l0 + ls[0]) + oracles.keccak256(ls[1] + ls[2]))
    old, new = oracles.keccak256(b"old"), oracles.keccak256(b"new")
    batch = oracles.keccak256(oracles.keccak256(pre))
    payload = oracles.keccak256(old + new + bytes([4]) + SENDER + oracles.be(42, 8) + batch)
    return {
        "keccak_empty": oracles.keccak256(b"").hex(),
        "keccak_abc": oracles.keccak256(b"abc").hex(),
        "op": op,
        "op_preimage": pre.hex(),
        "op_digest": oracles.keccak256(pre).hex(),
        "leaf": {"user": SENDER.hex(), "state": list(state), "hash": oracles.keccak256(SENDER + oracles.state_bytes(*state)).hex()},
        "global_leaf": {"state": list(glob), "hash": oracles.keccak256(bytes(20) + oracles.global_bytes(*glob)).hex()},
        "empty_root": l0.hex(),
        "three_user_tree": {
            "users": {u.hex(): list(s) for u, s in three.items()},
            "leaves": [l0.hex()] + [h.hex() for h in ls],
            "root": root3.hex(),
        },
        "attested_payload": {
            "old_root": old.hex(), "new_root": new.hex(), "rule": 4, "bundler": SENDER.hex(), "block": 42,
            "batch_digest": batch.hex(), "payload": payload.hex(),
        },
        "routing": [
            {"user": u.hex(), "block": b, "bundlers": n, "slot": oracles.route_slot(u, b, n)}
            for u in USERS + [SENDER] for b, n in ((0, 1), (5, 3), (1000, 8), (2**40, 7))
        ],
    }


if __name__ == "__main__":
    (HERE / "golden.json").write_text(json.dumps(build(), indent=1, sort_keys=True) + "\n")
