"""Seeded random streams.

All randomness flows through ``derive_rng``: a stream is identified by the
base seed plus a tuple of integer keys (replicate index, chain index, θ-grid
index, ...). Identical keys reproduce identical draws; distinct keys give
statistically independent streams via ``numpy.random.SeedSequence``.
"""

import numpy as np

from app.core.config import get_settings


def base_seed() -> int:
    """Current base seed (config value, overridden by SELEKTOR_SEED)."""
    return get_settings().seed


def derive_seed_sequence(*keys: int, seed: int | None = None) -> np.random.SeedSequence:
    root = base_seed() if seed is None else seed
    return np.random.SeedSequence([int(root), *(int(k) for k in keys)])


def derive_rng(*keys: int, seed: int | None = None) -> np.random.Generator:
    """Generator for the stream (seed, *keys)."""
    return np.random.default_rng(derive_seed_sequence(*keys, seed=seed))


def spawn_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit child seed from an existing generator."""
    return int(rng.integers(0, 2**63 - 1))
