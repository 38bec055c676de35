"""Deterministic RNG stream derivation.

All randomness in the package flows through named streams derived from
user-facing integer seeds, so that any component can be re-run in isolation
and reproduce exactly what a full run produced.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def seed_sequence(*keys: int) -> np.random.SeedSequence:
    """Build a SeedSequence from integer keys (negative keys are masked to uint64)."""
    return np.random.SeedSequence([int(k) & _MASK64 for k in keys])


def rng(*keys: int) -> np.random.Generator:
    """Return a Generator for the stream identified by `keys`."""
    return np.random.default_rng(seed_sequence(*keys))


def derive_int_seed(*keys: int) -> int:
    """Collapse a stream identity to a single uint64, e.g. for torch.manual_seed."""
    state = seed_sequence(*keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])
