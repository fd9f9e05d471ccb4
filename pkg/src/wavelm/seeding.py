"""Deterministic RNG streams derived from one global seed plus a stage label."""

import hashlib

import numpy as np


def stage_offset(label: str) -> int:
    """Stable 64-bit offset for a stage label (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stage_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for one named stage of a run; same (seed, label) -> same stream."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.default_rng(np.random.SeedSequence([seed, stage_offset(label)]))
