"""Exposure mappings: reduce an assignment vector to one discrete label per unit.

Built-in mappings:

``unit_level``
    own assignment, labels {0, 1}.
``two_stage``
    the pair (own assignment, household treated indicator), labels
    {(0,0), (0,1), (1,1)}. (1,0) cannot occur: a treated unit makes its
    household treated. Requires at most one treated unit per household.
``neighbor_count``
    number of treated network neighbors, labels {0, ..., max degree}.
``network_threshold`` (parameter d)
    'a' if treated; for untreated units, 'b' when at least d neighbors are
    treated and 'c' otherwise. The d-th treated neighbor is counted as
    exposed ('b'), which makes the three cases exhaustive; with d=1 this is
    exactly the first-order spillover split (exposed vs untouched).
``network_order2_any``
    'a' if treated; 'b' when any first- or second-order neighbor is treated;
    'c' otherwise.
``network_order2_only``
    'a' if treated; 'b' on first-order exposure; 'c' on second-order-only
    exposure; 'd' untouched. Contrasting 'c' vs 'd' isolates second-order
    spillovers without constraining first-order ones.
``custom``
    first-match-wins rule table over own assignment, household treated count
    and first/second-order treated neighbor counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import Assignment
from .errors import ConfigError, DataError
from .population import Population

EXPOSURE_KINDS = (
    "unit_level",
    "two_stage",
    "neighbor_count",
    "network_threshold",
    "network_order2_any",
    "network_order2_only",
    "custom",
)

TWO_STAGE_ALPHABET = ((0, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class ExposureRule:
    """One row of a custom mapping: bounds are inclusive, None means unbounded."""

    label: object
    z: int | None = None
    household_treated: tuple | None = None
    neighbors_treated: tuple | None = None
    second_order_treated: tuple | None = None


@dataclass(frozen=True)
class ExposureMapSpec:
    kind: str
    d: int | None = None
    rules: tuple[ExposureRule, ...] = ()

    def validate(self) -> None:
        if self.kind not in EXPOSURE_KINDS:
            raise ConfigError(f"unknown exposure kind {self.kind!r}; choose from {EXPOSURE_KINDS}")
        if self.kind == "network_threshold" and (self.d is None or self.d < 1):
            raise ConfigError("network_threshold requires an integer threshold d >= 1")
        if self.kind == "custom" and not self.rules:
            raise ConfigError("custom exposure mapping requires at least one rule")


def _require_network(map_spec: ExposureMapSpec, pop: Population) -> None:
    if pop.adjacency is None:
        raise DataError(f"exposure mapping {map_spec.kind!r} requires an adjacency matrix")
    if map_spec.kind in ("network_order2_any", "network_order2_only") and pop.second_order is None:
        raise DataError(
            f"exposure mapping {map_spec.kind!r} requires the second-order relation "
            "(call second_order_relation first)"
        )


def _in_bounds(value: np.ndarray, bounds) -> np.ndarray:
    ok = np.ones(value.shape, dtype=bool)
    lo, hi = bounds
    if lo is not None:
        ok &= value >= lo
    if hi is not None:
        ok &= value <= hi
    return ok


def exposure_codes(map_spec: ExposureMapSpec, pop: Population, assignment):
    """Integer exposure codes plus the label tuple they index.

    ``codes[i]`` is the position of unit i's label in the returned tuple.
    This is the fast-path representation used by the test engines; the
    label-valued view is :func:`exposures`.
    """
    map_spec.validate()
    a = assignment if isinstance(assignment, Assignment) else Assignment.from_z(pop, assignment)
    z = a.z.astype(np.int64)
    n = pop.n_units

    if map_spec.kind == "unit_level":
        return z.copy(), (0, 1)

    if map_spec.kind == "two_stage":
        if np.any(a.w > 1):
            raise DataError(
                "two_stage exposure undefined: a household has more than one treated unit"
            )
        w_of_unit = a.w[pop.household_of].astype(np.int64)
        # (0,0) -> 0, (0,1) -> 1, (1,1) -> 2
        return z + w_of_unit, TWO_STAGE_ALPHABET

    if map_spec.kind in ("neighbor_count", "network_threshold",
                         "network_order2_any", "network_order2_only"):
        _require_network(map_spec, pop)
        g_treated = pop.adjacency.astype(np.int64) @ z
        if map_spec.kind == "neighbor_count":
            return g_treated, alphabet(map_spec, pop)
        codes = np.empty(n, dtype=np.int64)
        if map_spec.kind == "network_threshold":
            codes[:] = 2  # c
            codes[g_treated >= map_spec.d] = 1  # b
            labels = ("a", "b", "c")
        elif map_spec.kind == "network_order2_any":
            h_treated = pop.second_order.astype(np.int64) @ z
            codes[:] = 2  # c
            codes[(g_treated + h_treated) > 0] = 1  # b
            labels = ("a", "b", "c")
        else:
            h_treated = pop.second_order.astype(np.int64) @ z
            codes[:] = 3  # d
            codes[h_treated > 0] = 2  # c
            codes[g_treated > 0] = 1  # b
            labels = ("a", "b", "c", "d")
        codes[z == 1] = 0  # a
        return codes, labels

    # custom rule table, first match wins
    labels = alphabet(map_spec)
    label_pos = {label: c for c, label in enumerate(labels)}
    w_of_unit = a.w[pop.household_of].astype(np.int64)
    g_treated = pop.adjacency.astype(np.int64) @ z if pop.adjacency is not None else None
    h_treated = pop.second_order.astype(np.int64) @ z if pop.second_order is not None else None
    codes = np.full(n, -1, dtype=np.int64)
    unmatched = np.ones(n, dtype=bool)
    for rule in map_spec.rules:
        ok = unmatched.copy()
        if rule.z is not None:
            ok &= z == rule.z
        if rule.household_treated is not None:
            ok &= _in_bounds(w_of_unit, rule.household_treated)
        if rule.neighbors_treated is not None:
            if g_treated is None:
                raise DataError("rule uses neighbor counts but no adjacency is present")
            ok &= _in_bounds(g_treated, rule.neighbors_treated)
        if rule.second_order_treated is not None:
            if h_treated is None:
                raise DataError("rule uses second-order counts but the relation is missing")
            ok &= _in_bounds(h_treated, rule.second_order_treated)
        codes[ok] = label_pos[rule.label]
        unmatched &= ~ok
    if unmatched.any():
        i = int(np.flatnonzero(unmatched)[0])
        raise DataError(f"custom exposure rules do not cover unit {pop.unit_ids[i]!r}")
    return codes, labels


def exposures(map_spec: ExposureMapSpec, pop: Population, assignment) -> np.ndarray:
    """Per-unit exposure labels under one assignment (object array, length N).

    A pure function of its arguments: no randomness, no hidden state.
    """
    codes, labels = exposure_codes(map_spec, pop, assignment)
    lookup = np.empty(len(labels), dtype=object)
    for c, label in enumerate(labels):
        lookup[c] = label
    return lookup[codes]


def alphabet(map_spec: ExposureMapSpec, pop: Population | None = None) -> tuple:
    """The declared finite label set of a mapping.

    ``neighbor_count`` needs the population, since its alphabet is bounded by
    the maximum degree.
    """
    map_spec.validate()
    if map_spec.kind == "unit_level":
        return (0, 1)
    if map_spec.kind == "two_stage":
        return TWO_STAGE_ALPHABET
    if map_spec.kind == "neighbor_count":
        if pop is None or pop.adjacency is None:
            raise ConfigError("neighbor_count alphabet requires a population with a network")
        max_deg = int(pop.adjacency.sum(axis=1).max())
        return tuple(range(max_deg + 1))
    if map_spec.kind == "network_threshold":
        return ("a", "b", "c")
    if map_spec.kind == "network_order2_any":
        return ("a", "b", "c")
    if map_spec.kind == "network_order2_only":
        return ("a", "b", "c", "d")
    return tuple(dict.fromkeys(rule.label for rule in map_spec.rules))
