"""Conditioning mechanisms: focal-unit samplers and compatible assignment sets.

A conditioning event is a pair (focal units U, assignment set Zset). A
mechanism is the conditional distribution of that event given the realized
assignment, factored as a focal sampler times a (here always degenerate)
assignment-set rule. The test statistic then uses only focal outcomes, and
its reference distribution is the design restricted to Zset and reweighted
by the focal sampler.

Mechanism kinds
---------------
``spillover_conditional``
    one untreated unit per household, uniformly; pairs with the
    within-household spillover contrast (0,0) vs (0,1).
``primary_conditional``
    the treated unit in treated households, a uniform unit in control
    households; pairs with the primary contrast (0,0) vs (1,1).
``per_household_unconditional``
    one uniform unit per household, ignoring the assignment (what picking
    focals by a per-household covering rule amounts to in this design).
``focal_restriction``
    focals as in ``per_household_unconditional``; the assignment set is the
    design restricted to assignments agreeing with the observed one on the
    focal units. For the spillover contrast this set coincides with the
    compatible set (see tests), so the two unconditional variants define the
    same test.
``network_untreated_focals``
    m uniform focals among untreated units under a completely randomized
    design on a network; the conditional law fixes focals untreated and
    redraws the rest (see :func:`sample_network_conditional`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import Assignment, DesignSpec, enumerate_assignments
from .errors import ConfigError, EngineError
from .exposure import ExposureMapSpec, alphabet, exposures
from .population import Population
from .rng import as_rng

MECHANISM_KINDS = (
    "spillover_conditional",
    "primary_conditional",
    "per_household_unconditional",
    "focal_restriction",
    "network_untreated_focals",
)


@dataclass(frozen=True)
class ContrastHypothesis:
    """Null of equal potential outcomes across the two exposures a and b."""

    a: object
    b: object
    map: ExposureMapSpec

    def validate(self, pop: Population | None = None) -> None:
        self.map.validate()
        if self.a == self.b:
            raise ConfigError("contrast requires two distinct exposures")
        try:
            letters = alphabet(self.map, pop)
        except ConfigError:
            return  # alphabet needs a population we don't have yet
        for label in (self.a, self.b):
            if label not in letters:
                raise ConfigError(f"exposure {label!r} not in the mapping alphabet {letters}")


def spillover_hypothesis() -> ContrastHypothesis:
    """No within-household spillover: (0,0) vs (0,1) under the two-stage mapping."""
    return ContrastHypothesis(a=(0, 0), b=(0, 1), map=ExposureMapSpec(kind="two_stage"))


def primary_hypothesis() -> ContrastHypothesis:
    """No primary effect: (0,0) vs (1,1) under the two-stage mapping."""
    return ContrastHypothesis(a=(0, 0), b=(1, 1), map=ExposureMapSpec(kind="two_stage"))


@dataclass(frozen=True)
class MechanismSpec:
    kind: str
    m: int | None = None  # focal count for network_untreated_focals

    def validate(self, hyp: ContrastHypothesis, design: DesignSpec) -> None:
        """Cross-check mechanism, hypothesis and design at config load time."""
        if self.kind not in MECHANISM_KINDS:
            raise ConfigError(f"unknown mechanism {self.kind!r}; choose from {MECHANISM_KINDS}")
        two_stage_map = hyp.map.kind == "two_stage"
        if self.kind == "spillover_conditional":
            if not (two_stage_map and {hyp.a, hyp.b} == {(0, 0), (0, 1)}):
                raise ConfigError(
                    "spillover_conditional pairs with the (0,0) vs (0,1) two-stage contrast"
                )
        elif self.kind == "primary_conditional":
            if not (two_stage_map and {hyp.a, hyp.b} == {(0, 0), (1, 1)}):
                raise ConfigError(
                    "primary_conditional pairs with the (0,0) vs (1,1) two-stage contrast"
                )
        elif self.kind == "per_household_unconditional":
            if not two_stage_map:
                raise ConfigError(f"{self.kind} requires the two-stage exposure mapping")
        elif self.kind == "focal_restriction":
            # fixing the focals' own assignments is equivalent to compatible-set
            # conditioning for the spillover contrast only; for other contrasts
            # it would let focal exposures leave the pair
            if not (two_stage_map and {hyp.a, hyp.b} == {(0, 0), (0, 1)}):
                raise ConfigError(
                    "focal_restriction pairs with the (0,0) vs (0,1) two-stage contrast"
                )
        else:
            if two_stage_map or hyp.map.kind == "unit_level":
                raise ConfigError("network_untreated_focals requires a network exposure mapping")
            if self.m is None or self.m < 1:
                raise ConfigError("network_untreated_focals requires a focal count m >= 1")
            if design.kind != "complete":
                raise ConfigError("network_untreated_focals requires a complete design")


@dataclass
class ConditioningEvent:
    """Focal units plus the compatible assignment set.

    ``zset`` is materialized only in exact mode; permutation and Monte Carlo
    engines sample from it implicitly, since it is exponentially large in
    general.
    """

    focals: np.ndarray
    zset: list | None = None


def draw_focals(mech: MechanismSpec, hyp: ContrastHypothesis, pop: Population,
                z_obs, rng) -> np.ndarray:
    """Draw a focal set from the mechanism; returns sorted unit indices."""
    rng = as_rng(rng)
    a = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    z, w = a.z, a.w
    sizes = pop.household_sizes

    if mech.kind == "network_untreated_focals":
        untreated = np.flatnonzero(z == 0)
        if mech.m > untreated.size:
            raise EngineError(
                f"cannot draw {mech.m} untreated focals: only {untreated.size} untreated units"
            )
        return np.sort(rng.choice(untreated, size=mech.m, replace=False))

    if mech.kind == "spillover_conditional":
        if np.any(w >= sizes):
            j = int(np.flatnonzero(w >= sizes)[0])
            raise EngineError(
                f"household {pop.household_ids[j]!r} has no untreated unit to choose as focal"
            )
        # rank among untreated members; skip past the treated member's slot
        r = rng.integers(0, sizes - w)
        treated_pos = np.full(pop.n_households, np.iinfo(np.intp).max, dtype=np.intp)
        treated_units = np.flatnonzero(z == 1)
        treated_pos[pop.household_of[treated_units]] = pop.position_in_household[treated_units]
        r = r + (r >= treated_pos)
        return np.sort(pop.members_flat[pop.household_offsets + r])

    if mech.kind == "primary_conditional":
        if np.any(w > 1):
            raise EngineError("primary_conditional requires at most one treated unit per household")
        r = rng.integers(0, sizes)
        focal = pop.members_flat[pop.household_offsets + r]
        treated_units = np.flatnonzero(z == 1)
        focal_of_hh = np.array(focal)
        focal_of_hh[pop.household_of[treated_units]] = treated_units
        return np.sort(focal_of_hh)

    # per_household_unconditional and focal_restriction share the focal law
    r = rng.integers(0, sizes)
    return np.sort(pop.members_flat[pop.household_offsets + r])


def labels_compatible(hyp: ContrastHypothesis, h_obs_focals, h_new_focals) -> bool:
    """Do focal labels under a candidate assignment satisfy the conditioning rules?

    A focal observed in the contrasted pair must stay inside the pair; any
    other focal must keep its exact observed exposure.
    """
    for h0, h1 in zip(h_obs_focals, h_new_focals):
        if h0 == hyp.a or h0 == hyp.b:
            if not (h1 == hyp.a or h1 == hyp.b):
                return False
        elif h1 != h0:
            return False
    return True


def compatible_set(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                   focals, z_obs, cap: int = 10**6) -> list:
    """Materialize the compatible assignment set for (focals, observed z).

    Exact/oracle mode only: every assignment in the design support that keeps
    each focal's exposure inside the contrasted pair (if observed there) or
    exactly unchanged (otherwise). Always contains the observed assignment.
    """
    focals = np.asarray(focals, dtype=np.intp)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    h_obs = exposures(hyp.map, pop, a_obs)[focals]
    out = []
    for cand in enumerate_assignments(design, pop, cap=cap):
        h_new = exposures(hyp.map, pop, cand)[focals]
        if labels_compatible(hyp, h_obs, h_new):
            out.append(cand)
    return out


def focal_restriction_set(pop: Population, design: DesignSpec, focals, z_obs,
                          cap: int = 10**6) -> list:
    """Assignments agreeing with the observed one on the focal units."""
    focals = np.asarray(focals, dtype=np.intp)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    want = a_obs.z[focals]
    return [
        cand for cand in enumerate_assignments(design, pop, cap=cap)
        if np.array_equal(cand.z[focals], want)
    ]


def effective_focals(hyp: ContrastHypothesis, pop: Population, focals, z_obs) -> np.ndarray:
    """Focals whose observed exposure is one of the two contrasted ones."""
    focals = np.asarray(focals, dtype=np.intp)
    h = exposures(hyp.map, pop, z_obs)[focals]
    keep = np.array([hi == hyp.a or hi == hyp.b for hi in h], dtype=bool)
    return focals[keep]


def effective_focal_distribution(n_households: int, n_treated_households: int,
                                 household_size: int):
    """Effective-focal-count law for per-household uniform focal choice.

    With K households of equal size n and K1 treated, the count is
    K - K1 + Binomial(K1, 1/n): control-household focals always count, and a
    treated household contributes when its focal is the treated unit, which
    identifies this law with the primary contrast. For the spillover contrast
    the count is K - Binomial(K1, 1/n) instead (a treated household
    contributes when the focal is *not* the treated unit); the two laws
    coincide at n = 2 by the symmetry of Binomial(K1, 1/2).
    """
    k, k1, n = int(n_households), int(n_treated_households), int(household_size)
    if not 0 <= k1 <= k:
        raise ConfigError(f"need 0 <= K1 <= K, got K1={k1}, K={k}")
    if n < 1:
        raise ConfigError("household size must be >= 1")
    support = np.arange(k - k1, k + 1)
    pmf = stats.binom.pmf(np.arange(k1 + 1), k1, 1.0 / n)
    return stats.rv_discrete(values=(support, pmf))


def sample_network_conditional(pop: Population, design: DesignSpec, focals, rng) -> Assignment:
    """Draw from the complete design conditional on all focals being untreated.

    Fix the focals at control, pick the remaining controls uniformly among
    non-focal units, treat the rest. This is the uniform distribution over
    assignments with the design's treated count that leave every focal
    untreated (checked empirically in the test suite).
    """
    if design.kind != "complete":
        raise ConfigError("the network conditional sampler requires a complete design")
    rng = as_rng(rng)
    focals = np.asarray(focals, dtype=np.intp)
    n, n1 = pop.n_units, design.n1
    n0 = n - n1
    if focals.size > n0:
        raise EngineError(f"infeasible: {focals.size} focals but only {n0} control slots")
    non_focal = np.setdiff1d(np.arange(n), focals, assume_unique=False)
    extra_controls = rng.choice(non_focal, size=n0 - focals.size, replace=False)
    z = np.ones(n, dtype=np.int8)
    z[focals] = 0
    z[extra_controls] = 0
    return Assignment.from_z(pop, z)


def mechanism_log_weight(mech: MechanismSpec, pop: Population, focals, assignment) -> float:
    """log probability that the mechanism picks exactly these focals, given z.

    This is the focal-sampler factor of the conditional reference
    distribution. It matters for exact p-values: for the conditional
    mechanisms it varies over the compatible set when household sizes differ,
    so the design mass alone would give the wrong conditional law.
    """
    a = assignment if isinstance(assignment, Assignment) else Assignment.from_z(pop, assignment)
    z, w = a.z, a.w
    focals = np.asarray(focals, dtype=np.intp)

    if mech.kind == "network_untreated_focals":
        if np.any(z[focals] == 1):
            return -np.inf
        n0 = int((z == 0).sum())
        if focals.size > n0:
            return -np.inf
        return -math.log(math.comb(n0, focals.size))

    if focals.size != pop.n_households or np.unique(pop.household_of[focals]).size != focals.size:
        return -np.inf  # all household mechanisms pick exactly one focal per household

    if mech.kind == "spillover_conditional":
        if np.any(z[focals] == 1):
            return -np.inf
        eligible = pop.household_sizes - w
        if np.any(eligible < 1):
            return -np.inf
        return -float(np.log(eligible).sum())

    if mech.kind == "primary_conditional":
        if np.any(w > 1):
            return -np.inf
        treated_hh = np.flatnonzero(w == 1)
        focal_of_hh = np.empty(pop.n_households, dtype=np.intp)
        focal_of_hh[pop.household_of[focals]] = focals
        if np.any(z[focal_of_hh[treated_hh]] != 1):
            return -np.inf
        control_hh = np.flatnonzero(w == 0)
        return -float(np.log(pop.household_sizes[control_hh]).sum())

    # per_household_unconditional / focal_restriction: no z dependence
    return -float(np.log(pop.household_sizes).sum())


def enumerate_focal_sets(mech: MechanismSpec, pop: Population, z_obs, cap: int = 10**6):
    """All focal sets the mechanism can draw given z (oracle support, small N).

    Used by the imputability checker; the count is capped because it grows as
    a product over households.
    """
    a = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    z, w = a.z, a.w

    if mech.kind == "network_untreated_focals":
        untreated = np.flatnonzero(z == 0)
        total = math.comb(untreated.size, mech.m) if untreated.size >= mech.m else 0
        if total > cap:
            raise EngineError(f"focal-set enumeration of size {total} exceeds cap {cap}")
        for combo in itertools.combinations(untreated.tolist(), mech.m):
            yield np.array(combo, dtype=np.intp)
        return

    per_household = []
    for j, members in enumerate(pop.households):
        if mech.kind == "spillover_conditional":
            options = members[z[members] == 0]
        elif mech.kind == "primary_conditional" and w[j] == 1:
            options = members[z[members] == 1]
        else:
            options = members
        if options.size == 0:
            raise EngineError(f"household {pop.household_ids[j]!r} has no eligible focal")
        per_household.append(options.tolist())
    total = math.prod(len(o) for o in per_household)
    if total > cap:
        raise EngineError(f"focal-set enumeration of size {total} exceeds cap {cap}")
    for combo in itertools.product(*per_household):
        yield np.sort(np.array(combo, dtype=np.intp))
