"""Deterministic RNG derivation for independent subsystems.

Every random draw in the package flows through :func:`derive_rng` with a
base seed plus string tags naming the consumer, so adding a new consumer
never perturbs existing streams.
"""

from __future__ import annotations

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        t = int(tag)
        return 2 * t if t >= 0 else 2 * (-t) + 1  # injective, non-negative
    return int.from_bytes(str(tag).encode("utf-8"), "little")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """A generator keyed by (seed, tags); same inputs give the same stream."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
