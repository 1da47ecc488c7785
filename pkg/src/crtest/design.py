"""Assignment distributions: sampling, exhaustive enumeration, mass queries.

Three designs are supported. ``two_stage`` treats K1 households completely at
random and then exactly one unit, uniformly, inside each treated household.
``complete`` treats N1 of N units completely at random. ``bernoulli`` treats
each unit independently with a fixed probability.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceededError, ConfigError
from .population import Population
from .rng import as_rng

DESIGN_KINDS = ("two_stage", "complete", "bernoulli")

ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class Assignment:
    """A unit-level 0/1 vector z plus the derived household treated counts w."""

    z: np.ndarray
    w: np.ndarray

    @classmethod
    def from_z(cls, pop: Population, z) -> "Assignment":
        z = np.asarray(z, dtype=np.int8)
        if z.shape != (pop.n_units,) or np.any((z != 0) & (z != 1)):
            raise ConfigError("assignment must be a 0/1 vector of length N")
        w = np.bincount(pop.household_of, weights=z, minlength=pop.n_households)
        return cls(z=z, w=w.astype(np.int64))

    def key(self) -> tuple:
        """Hashable identity of the assignment (for set comparisons)."""
        return tuple(int(v) for v in self.z)


@dataclass(frozen=True)
class DesignSpec:
    """Which assignment distribution to use, with its single parameter."""

    kind: str
    k1: int | None = None
    n1: int | None = None
    prob: float | None = None

    def validate(self, pop: Population) -> None:
        if self.kind not in DESIGN_KINDS:
            raise ConfigError(f"unknown design kind {self.kind!r}; choose from {DESIGN_KINDS}")
        if self.kind == "two_stage":
            if self.k1 is None or not 0 <= self.k1 <= pop.n_households:
                raise ConfigError(
                    f"two_stage requires 0 <= k1 <= K={pop.n_households}, got {self.k1}"
                )
        elif self.kind == "complete":
            if self.n1 is None or not 0 <= self.n1 <= pop.n_units:
                raise ConfigError(f"complete requires 0 <= n1 <= N={pop.n_units}, got {self.n1}")
        else:
            if self.prob is None or not 0.0 <= self.prob <= 1.0:
                raise ConfigError(f"bernoulli requires prob in [0,1], got {self.prob}")


def sample(design: DesignSpec, pop: Population, rng) -> Assignment:
    """Draw one assignment from the design."""
    design.validate(pop)
    rng = as_rng(rng)
    n = pop.n_units
    z = np.zeros(n, dtype=np.int8)
    if design.kind == "two_stage":
        treated_hh = rng.choice(pop.n_households, size=design.k1, replace=False)
        for j in treated_hh:
            members = pop.households[j]
            z[members[rng.integers(members.size)]] = 1
    elif design.kind == "complete":
        z[rng.choice(n, size=design.n1, replace=False)] = 1
    else:
        z[rng.random(n) < design.prob] = 1
    return Assignment.from_z(pop, z)


def support_size(design: DesignSpec, pop: Population) -> int:
    """Number of assignments with positive mass."""
    design.validate(pop)
    if design.kind == "two_stage":
        # sum over household subsets S of size k1 of prod_{j in S} n_j,
        # i.e. the k1-th elementary symmetric polynomial of the sizes
        e = [0] * (design.k1 + 1)
        e[0] = 1
        for nk in pop.household_sizes:
            for i in range(design.k1, 0, -1):
                e[i] += int(nk) * e[i - 1]
        return e[design.k1]
    if design.kind == "complete":
        return math.comb(pop.n_units, design.n1)
    if design.prob in (0.0, 1.0):
        return 1
    return 2**pop.n_units


def enumerate_assignments(design: DesignSpec, pop: Population,
                          cap: int = ENUMERATION_CAP):
    """Yield every assignment with positive mass exactly once.

    Order is deterministic: lexicographic over the treated household subset
    and then over within-household treated unit indices (two_stage), over
    treated unit subsets (complete), or over binary vectors (bernoulli).
    """
    size = support_size(design, pop)
    if size > cap:
        raise CapExceededError("assignment support enumeration", size, cap)
    n = pop.n_units
    if design.kind == "two_stage":
        for hh_subset in itertools.combinations(range(pop.n_households), design.k1):
            member_lists = [pop.households[j] for j in hh_subset]
            for choice in itertools.product(*member_lists):
                z = np.zeros(n, dtype=np.int8)
                z[list(choice)] = 1
                yield Assignment.from_z(pop, z)
    elif design.kind == "complete":
        for subset in itertools.combinations(range(n), design.n1):
            z = np.zeros(n, dtype=np.int8)
            z[list(subset)] = 1
            yield Assignment.from_z(pop, z)
    else:
        if design.prob in (0.0, 1.0):
            z = np.full(n, int(design.prob), dtype=np.int8)
            yield Assignment.from_z(pop, z)
            return
        for bits in itertools.product((0, 1), repeat=n):
            yield Assignment.from_z(pop, np.array(bits, dtype=np.int8))


def log_mass(design: DesignSpec, pop: Population, assignment) -> float:
    """Exact log probability of an assignment; -inf when out of support."""
    design.validate(pop)
    a = assignment if isinstance(assignment, Assignment) else Assignment.from_z(pop, assignment)
    z, w = a.z, a.w
    if design.kind == "two_stage":
        if np.any(w > 1) or int(w.sum()) != design.k1:
            return -np.inf
        treated_hh = np.flatnonzero(w == 1)
        return -math.log(math.comb(pop.n_households, design.k1)) - float(
            np.log(pop.household_sizes[treated_hh]).sum()
        )
    if design.kind == "complete":
        if int(z.sum()) != design.n1:
            return -np.inf
        return -math.log(math.comb(pop.n_units, design.n1))
    n1 = int(z.sum())
    p = design.prob
    if p == 0.0:
        return 0.0 if n1 == 0 else -np.inf
    if p == 1.0:
        return 0.0 if n1 == pop.n_units else -np.inf
    return n1 * math.log(p) + (pop.n_units - n1) * math.log1p(-p)
