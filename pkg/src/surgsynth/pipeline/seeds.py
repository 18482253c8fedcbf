"""Seed derivation: every stochastic operation gets hash(experiment seed, stage, item)."""

from __future__ import annotations

import hashlib


def derive_seed(experiment_seed: int, stage: str, item: int = 0) -> int:
    """A 63-bit seed from a keyed hash of its three inputs; pure and re-derivable."""
    key = f"{int(experiment_seed)}\x1f{stage}\x1f{int(item)}".encode()
    digest = hashlib.blake2b(key, digest_size=8, person=b"surgsynth-seed").digest()
    return int.from_bytes(digest, "little") >> 1
