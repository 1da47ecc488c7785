"""Shared builders for small synthetic instances."""

import numpy as np
import pytest

from crtest import DesignSpec, Population


def make_population(sizes, adjacency=None):
    """Population with the given household sizes, units in household order."""
    sizes = list(sizes)
    household_of = np.repeat(np.arange(len(sizes)), sizes)
    return Population(
        unit_ids=tuple(f"u{i}" for i in range(int(sum(sizes)))),
        household_ids=tuple(f"h{j}" for j in range(len(sizes))),
        household_of=household_of,
        adjacency=adjacency,
    )


def random_two_stage_instance(rng, max_households=4, min_size=2, max_size=3):
    """Random small household instance plus a valid two-stage design."""
    k = int(rng.integers(2, max_households + 1))
    sizes = rng.integers(min_size, max_size + 1, size=k)
    k1 = int(rng.integers(1, k))
    return make_population(sizes), DesignSpec(kind="two_stage", k1=k1)


def line_population(n):
    """Path graph 0-1-...-(n-1), one household per unit."""
    adj = np.zeros((n, n), dtype=np.uint8)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1
    return make_population([1] * n, adjacency=adj)


@pytest.fixture
def pairs_pop():
    return make_population([2, 2])


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
