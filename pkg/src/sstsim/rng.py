"""Seed handling: one master seed fans out to independent per-subsystem streams
so toggling one feature never perturbs another subsystem's random sequence."""

from __future__ import annotations

import hashlib
import random


def as_rng(seed: int | random.Random | None) -> random.Random:
    """Coerce an int seed (or None) into a Random instance; pass streams through."""
    if isinstance(seed, random.Random):
        return seed
    return random.Random(seed)


def derive_seed(master: int, label: str) -> int:
    """Stable 64-bit subsystem seed derived from the master seed and a label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def subsystem_rng(master: int, label: str) -> random.Random:
    return random.Random(derive_seed(master, label))
