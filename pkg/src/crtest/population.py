"""Study population: units, households, optional network, outcomes.

A :class:`Population` is immutable after construction and safe to share
read-only across parallel workers. Unit order is the file order of the
ingested CSV, so seeded downstream runs are reproducible byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ColumnSchema:
    """Column names expected in a population CSV."""

    unit_id: str = "unit_id"
    household_id: str = "household_id"
    outcome: str = "y"
    assignment: str = "z"
    covariates: tuple[str, ...] = ()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Population:
    """Units partitioned into households, with an optional unit network.

    ``household_of[i]`` is the index (into ``household_ids``) of the single
    household containing unit i. ``adjacency`` is a symmetric 0/1 matrix with
    empty diagonal; ``second_order`` marks pairs that are two hops apart but
    not adjacent (see :func:`second_order_relation`).
    """

    unit_ids: tuple
    household_ids: tuple
    household_of: np.ndarray
    adjacency: np.ndarray | None = None
    second_order: np.ndarray | None = None

    def __post_init__(self):
        hh = _frozen(np.asarray(self.household_of, dtype=np.intp))
        object.__setattr__(self, "household_of", hh)
        if len(self.unit_ids) == 0:
            raise DataError("population has no units")
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise DataError("duplicate unit id")
        if hh.shape != (len(self.unit_ids),):
            raise DataError("household_of must have one entry per unit")
        if hh.min() < 0 or hh.max() >= len(self.household_ids):
            raise DataError("unit referencing no household")
        if np.bincount(hh, minlength=len(self.household_ids)).min() < 1:
            raise DataError("household with no units")
        for name in ("adjacency", "second_order"):
            mat = getattr(self, name)
            if mat is None:
                continue
            mat = _frozen(np.asarray(mat, dtype=np.uint8))
            object.__setattr__(self, name, mat)
            n = self.n_units
            if mat.shape != (n, n):
                raise DataError(f"{name} must be {n}x{n}")
            if np.any(mat != mat.T):
                raise DataError(f"{name} must be symmetric")
            if np.any(np.diag(mat) != 0):
                raise DataError(f"{name} must have an empty diagonal")
        if self.adjacency is not None and self.second_order is not None:
            if np.any((self.adjacency == 1) & (self.second_order == 1)):
                raise DataError("a pair cannot be both adjacent and second-order")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_households(self) -> int:
        return len(self.household_ids)

    @cached_property
    def household_sizes(self) -> np.ndarray:
        return _frozen(np.bincount(self.household_of, minlength=self.n_households))

    @cached_property
    def households(self) -> tuple:
        """Unit indices of each household, in unit order."""
        members = [[] for _ in range(self.n_households)]
        for i, j in enumerate(self.household_of):
            members[j].append(i)
        return tuple(_frozen(np.array(m, dtype=np.intp)) for m in members)

    @cached_property
    def unit_index(self) -> dict:
        return {u: i for i, u in enumerate(self.unit_ids)}

    @cached_property
    def members_flat(self) -> np.ndarray:
        """All unit indices grouped by household; see ``household_offsets``."""
        return _frozen(np.concatenate(self.households))

    @cached_property
    def household_offsets(self) -> np.ndarray:
        """Start of each household's slice in ``members_flat``."""
        return _frozen(np.concatenate(([0], np.cumsum(self.household_sizes)[:-1])))

    @cached_property
    def position_in_household(self) -> np.ndarray:
        """Rank of each unit within its own household (unit order)."""
        pos = np.empty(self.n_units, dtype=np.intp)
        for members in self.households:
            pos[members] = np.arange(members.size)
        return _frozen(pos)

    def require_multi_unit_households(self, context: str) -> None:
        """Reject single-unit households for operations on within-household spillovers.

        A lone unit has no untreated housemate, so the spillover exposure is
        undefined for it; failing loudly beats silently dropping rows.
        """
        if self.household_sizes.min() < 2:
            bad = self.household_ids[int(np.argmin(self.household_sizes))]
            raise DataError(
                f"{context} requires every household to have at least 2 units; "
                f"household {bad!r} has 1 (consider --drop-singletons)"
            )

    def subset(self, unit_idx) -> "Population":
        """Population restricted to the given unit indices (original order).

        Households are renumbered to the surviving ones. The network matrices
        are sliced; the second-order relation is recomputed from the sliced
        adjacency since two-hop paths through dropped units disappear.
        """
        idx = np.asarray(sorted(set(int(i) for i in unit_idx)), dtype=np.intp)
        if idx.size == 0:
            raise DataError("subset would be empty")
        old_hh = self.household_of[idx]
        kept = sorted(set(old_hh.tolist()))
        renum = {j: r for r, j in enumerate(kept)}
        pop = Population(
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            household_ids=tuple(self.household_ids[j] for j in kept),
            household_of=np.array([renum[j] for j in old_hh], dtype=np.intp),
            adjacency=None if self.adjacency is None else self.adjacency[np.ix_(idx, idx)],
        )
        if self.second_order is not None and pop.adjacency is not None:
            pop = second_order_relation(pop)
        return pop


@dataclass(frozen=True)
class OutcomeData:
    """Observed outcomes and optional covariates, aligned with unit order."""

    y: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if np.any(~np.isfinite(y)):
            raise DataError("non-numeric or missing outcome")
        object.__setattr__(self, "y", _frozen(y))
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 2 or x.shape[0] != y.shape[0]:
                raise DataError("covariate matrix must be N x p")
            if np.any(~np.isfinite(x)):
                raise DataError("non-numeric or missing covariate")
            object.__setattr__(self, "covariates", _frozen(x))

    def subset(self, unit_idx) -> "OutcomeData":
        idx = np.asarray(sorted(set(int(i) for i in unit_idx)), dtype=np.intp)
        return OutcomeData(
            y=self.y[idx],
            covariates=None if self.covariates is None else self.covariates[idx],
            covariate_names=self.covariate_names,
        )


def _read_rows(path, schema: ColumnSchema, required: tuple[str, ...]):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"empty file: {path}")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"missing column(s) {missing} in {path}")
        rows = list(reader)
    if not rows:
        raise DataError(f"no data rows in {path}")
    return rows


def load_population(path, schema: ColumnSchema | None = None,
                    drop_singletons: bool = False):
    """Read a population CSV into (Population, OutcomeData).

    The file needs a header row with unit id, household id and outcome
    columns (names configurable via ``schema``). Rows keep file order.
    ``drop_singletons`` removes single-unit households before validation of
    downstream spillover operations.
    """
    schema = schema or ColumnSchema()
    rows = _read_rows(path, schema, (schema.unit_id, schema.household_id, schema.outcome))
    for name in schema.covariates:
        if name not in rows[0]:
            raise DataError(f"missing covariate column {name!r}")

    unit_ids, hh_labels, y = [], [], []
    seen = set()
    for r, row in enumerate(rows):
        u = row[schema.unit_id]
        if u in seen:
            raise DataError(f"duplicate unit id {u!r} (row {r + 2})")
        seen.add(u)
        h = row[schema.household_id]
        if h is None or h == "":
            raise DataError(f"unit {u!r} referencing no household (row {r + 2})")
        try:
            y.append(float(row[schema.outcome]))
        except (TypeError, ValueError):
            raise DataError(f"non-numeric outcome for unit {u!r} (row {r + 2})")
        unit_ids.append(u)
        hh_labels.append(h)

    household_ids = tuple(dict.fromkeys(hh_labels))  # first-appearance order
    hh_index = {h: j for j, h in enumerate(household_ids)}
    household_of = np.array([hh_index[h] for h in hh_labels], dtype=np.intp)

    covariates = None
    if schema.covariates:
        try:
            covariates = np.array(
                [[float(row[c]) for c in schema.covariates] for row in rows], dtype=float
            )
        except (TypeError, ValueError):
            raise DataError("non-numeric covariate value")

    pop = Population(tuple(unit_ids), household_ids, household_of)
    out = OutcomeData(np.array(y), covariates, tuple(schema.covariates))
    if drop_singletons:
        keep = np.flatnonzero(pop.household_sizes[pop.household_of] >= 2)
        if keep.size < pop.n_units:
            pop, out = pop.subset(keep), out.subset(keep)
    return pop, out


def load_assignment(path, pop: Population, schema: ColumnSchema | None = None) -> np.ndarray:
    """Read the observed 0/1 assignment column, aligned with ``pop`` unit order."""
    schema = schema or ColumnSchema()
    rows = _read_rows(path, schema, (schema.unit_id, schema.assignment))
    z = np.zeros(pop.n_units, dtype=np.int8)
    seen = 0
    for r, row in enumerate(rows):
        u = row[schema.unit_id]
        if u not in pop.unit_index:
            continue  # e.g. singleton dropped at load time
        val = row[schema.assignment]
        if val not in ("0", "1"):
            raise DataError(f"assignment for unit {u!r} must be 0 or 1, got {val!r}")
        z[pop.unit_index[u]] = int(val)
        seen += 1
    if seen != pop.n_units:
        raise DataError("assignment file does not cover every unit")
    return z


def load_edges(path) -> list[tuple[str, str]]:
    """Read a network edge list CSV with header ``u,v``."""
    rows = _read_rows(path, ColumnSchema(), ())
    if not {"u", "v"} <= set(rows[0].keys()):
        raise DataError(f"edge list {path} must have columns u,v")
    return [(row["u"], row["v"]) for row in rows]


def with_adjacency(pop: Population, edges) -> Population:
    """Attach a symmetric adjacency matrix built from an edge list."""
    n = pop.n_units
    adj = np.zeros((n, n), dtype=np.uint8)
    for u, v in edges:
        for w in (u, v):
            if w not in pop.unit_index:
                raise DataError(f"edge references unknown unit {w!r}")
        if u == v:
            raise DataError(f"self-loop on unit {u!r}")
        i, j = pop.unit_index[u], pop.unit_index[v]
        adj[i, j] = adj[j, i] = 1
    return replace(pop, adjacency=adj, second_order=None)


def second_order_relation(pop: Population) -> Population:
    """Fill in the pairs that are two hops apart but not adjacent.

    Idempotent: recomputing from the same adjacency gives the same relation.
    """
    if pop.adjacency is None:
        raise DataError("second-order relation requires an adjacency matrix")
    a = pop.adjacency.astype(np.int64)
    two_hop = (a @ a) > 0
    h = two_hop & (a == 0)
    np.fill_diagonal(h, False)
    return replace(pop, second_order=h.astype(np.uint8))


def save_population(pop: Population, out: OutcomeData, path,
                    z: np.ndarray | None = None,
                    schema: ColumnSchema | None = None,
                    extra_columns: dict | None = None) -> None:
    """Write a population back to CSV (used by the simulate subcommand)."""
    schema = schema or ColumnSchema()
    header = [schema.unit_id, schema.household_id, schema.outcome]
    if z is not None:
        header.append(schema.assignment)
    header += list(schema.covariates)
    extra = extra_columns or {}
    header += list(extra.keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(pop.n_units):
            row = [pop.unit_ids[i], pop.household_ids[pop.household_of[i]], repr(float(out.y[i]))]
            if z is not None:
                row.append(int(z[i]))
            for c in range(len(schema.covariates)):
                row.append(repr(float(out.covariates[i, c])))
            for col in extra.values():
                row.append(repr(float(col[i])))
            writer.writerow(row)
