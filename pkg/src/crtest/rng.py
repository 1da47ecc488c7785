"""Seeded, counter-based random number streams.

Every stochastic operation in the package takes either an integer seed or a
``numpy.random.Generator``. Streams are derived from ``(seed, *path)`` with
Philox, a counter-based generator, so that replicate r of a batch can use the
stream keyed by (seed, r) independently of execution order.
"""

from __future__ import annotations

import numpy as np

RngLike = "np.random.Generator | int | None"


def spawn_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream keyed by (seed, *path)."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def as_rng(rng) -> np.random.Generator:
    """Coerce an int seed (or None) to a Generator; pass Generators through."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return spawn_rng(np.random.SeedSequence().entropy % (2**63))
    return spawn_rng(int(rng))


def seed_of(rng) -> int | None:
    """The integer seed if one was supplied, else None (for report provenance)."""
    if isinstance(rng, np.random.Generator) or rng is None:
        return None
    return int(rng)
