"""Deterministic derivation of named random streams from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(root_seed: int, *parts) -> np.random.SeedSequence:
    """SeedSequence for the stream named by `parts` under `root_seed`."""
    entropy = [int(root_seed) & _MASK64] + [_as_entropy(p) for p in parts]
    return np.random.SeedSequence(entropy)


def stream_rng(root_seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, *parts))


def stream_seed(root_seed: int, *parts) -> int:
    """Collapse a named stream to a single integer seed (for sub-configs)."""
    return int(seed_sequence(root_seed, *parts).generate_state(1, np.uint64)[0])
