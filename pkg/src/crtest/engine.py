"""Test statistics and p-value engines (exact, permutation, Monte Carlo).

All engines share the same statistic, the difference in mean focal outcomes
between the two contrasted exposures, and the same tie rule: draws with a
statistic greater than or equal to the observed one count toward the p-value.
Monte Carlo p-values use the add-one estimator (1 + hits) / (R + 1), which
keeps them valid at any replicate count.

When both arms cannot be formed (every focal shares one exposure) the
statistic is undefined; engines then report p-value 1 with a ``degenerate``
flag instead of failing, so long batch runs keep going. Internally the
undefined statistic is ordered below every real value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .conditioning import (
    ConditioningEvent,
    ContrastHypothesis,
    MechanismSpec,
    compatible_set,
    draw_focals,
    enumerate_focal_sets,
    mechanism_log_weight,
    sample_network_conditional,
    spillover_hypothesis,
)
from .design import Assignment, DesignSpec, enumerate_assignments, log_mass
from .errors import EngineError
from .exposure import ExposureMapSpec, exposure_codes
from .population import Population
from .rng import as_rng, seed_of


@dataclass
class TestReport:
    """Everything needed to re-read one test: value, p-value, provenance."""

    t_obs: float
    pvalue: float
    method: str
    replicates: int
    seed: int | None
    focals: list
    n_effective: int
    arm_counts: dict
    degenerate: bool = False
    zset_size: int | None = None

    def to_dict(self) -> dict:
        return {
            "t_obs": None if math.isnan(self.t_obs) else self.t_obs,
            "pvalue": self.pvalue,
            "method": self.method,
            "replicates": self.replicates,
            "seed": self.seed,
            "focals": list(self.focals),
            "n_effective": self.n_effective,
            "arm_counts": {str(k): int(v) for k, v in self.arm_counts.items()},
            "degenerate": self.degenerate,
            "zset_size": self.zset_size,
        }


def _pair_codes(hyp: ContrastHypothesis, pop: Population, assignment):
    """(codes, index of a, index of b) for the hypothesis's exposure mapping."""
    codes, labels = exposure_codes(hyp.map, pop, assignment)
    try:
        return codes, labels.index(hyp.a), labels.index(hyp.b)
    except ValueError:
        raise EngineError(f"contrast {hyp.a!r} vs {hyp.b!r} not in mapping alphabet {labels}")


def _stat_from_codes(y, focals, codes, ia, ib) -> float:
    """Contrast statistic; -inf when an arm is empty (total ordering for ties).

    Computed as (pair total - b sum)/n_a - b sum/n_b, summing in focal index
    order, so that every engine produces bit-identical values for the same
    label arrangement and ties resolve consistently across engines.
    """
    cf = codes[focals]
    a_mask, b_mask = cf == ia, cf == ib
    na, nb = int(a_mask.sum()), int(b_mask.sum())
    if na == 0 or nb == 0:
        return -np.inf
    yf = y[focals]
    s_b = float(yf[b_mask].sum())
    s_pair = float(yf[a_mask | b_mask].sum())
    return (s_pair - s_b) / na - s_b / nb


def diff_in_means(hyp: ContrastHypothesis, pop: Population, focals, assignment, y) -> float:
    """Mean focal outcome at exposure a minus at exposure b; NaN if an arm is empty.

    Uses focal outcomes only; swapping the two labels negates the value.
    """
    a = assignment if isinstance(assignment, Assignment) else Assignment.from_z(pop, assignment)
    codes, ia, ib = _pair_codes(hyp, pop, a)
    t = _stat_from_codes(np.asarray(y, dtype=float), np.asarray(focals, dtype=np.intp),
                         codes, ia, ib)
    return float("nan") if t == -np.inf else t


def _arm_counts(hyp, codes_focals, ia, ib) -> dict:
    return {hyp.a: int((codes_focals == ia).sum()), hyp.b: int((codes_focals == ib).sum())}


def _report(hyp, pop, focals, codes_obs, ia, ib, t_obs, pvalue, method,
            replicates, seed, zset_size=None) -> TestReport:
    cf = codes_obs[focals]
    counts = _arm_counts(hyp, cf, ia, ib)
    degenerate = t_obs == -np.inf
    return TestReport(
        t_obs=float("nan") if degenerate else float(t_obs),
        pvalue=float(pvalue),
        method=method,
        replicates=int(replicates),
        seed=seed,
        focals=[pop.unit_ids[i] for i in focals],
        n_effective=int(counts[hyp.a] + counts[hyp.b]),
        arm_counts=counts,
        degenerate=bool(degenerate),
        zset_size=zset_size,
    )


def pvalue_exact(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                 event: ConditioningEvent, y, z_obs,
                 mech: MechanismSpec | None = None) -> TestReport:
    """Exact conditional p-value over an explicit compatible assignment set.

    The reference distribution is the design mass renormalized over the set;
    passing ``mech`` additionally weighs each assignment by the probability
    that the mechanism selects these focals under it. That factor is constant
    for the unconditional mechanisms but not for the conditional ones when
    household sizes differ, in which case it is required for exactness.
    """
    if event.zset is None:
        raise EngineError("exact p-value requires an explicit assignment set on the event")
    if len(event.zset) == 0:
        raise EngineError("empty assignment set (the observed assignment must belong to it)")
    focals = np.asarray(event.focals, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes_obs, ia, ib = _pair_codes(hyp, pop, a_obs)
    t_obs = _stat_from_codes(y, focals, codes_obs, ia, ib)

    logw = np.empty(len(event.zset))
    stats = np.empty(len(event.zset))
    for r, cand in enumerate(event.zset):
        lw = log_mass(design, pop, cand)
        if mech is not None:
            lw += mechanism_log_weight(mech, pop, focals, cand)
        logw[r] = lw
        codes_r, _ = exposure_codes(hyp.map, pop, cand)
        stats[r] = _stat_from_codes(y, focals, codes_r, ia, ib)
    if np.all(np.isneginf(logw)):
        raise EngineError("no assignment in the set has positive conditional mass")
    w = np.exp(logw - logw.max())
    w /= w.sum()
    if t_obs == -np.inf:
        pvalue = 1.0
    else:
        pvalue = float(w[stats >= t_obs].sum())
    return _report(hyp, pop, focals, codes_obs, ia, ib, t_obs, pvalue,
                   "exact", len(event.zset), None, zset_size=len(event.zset))


def draw_b_arm_indices(n_focals: int, n_b: int, rng, replicates: int,
                       exact_cap: int) -> tuple[np.ndarray, bool]:
    """Index matrix of b-arm positions, one row per label arrangement.

    Enumerates all C(n, n_b) arrangements when that count fits under
    ``exact_cap``; otherwise draws ``replicates`` uniform arrangements.
    Rows are sorted so downstream sums are reproducible bit for bit.
    """
    total = math.comb(n_focals, n_b)
    if total <= exact_cap:
        flat = np.fromiter(
            itertools.chain.from_iterable(itertools.combinations(range(n_focals), n_b)),
            dtype=np.intp, count=total * n_b,
        )
        return flat.reshape(total, n_b), True
    u = as_rng(rng).random((replicates, n_focals))
    idx = np.argpartition(u, n_b - 1, axis=1)[:, :n_b]
    return np.sort(idx, axis=1), False


def _equal_sizes(pop: Population) -> bool:
    sizes = pop.household_sizes
    return bool(sizes.min() == sizes.max())


def pvalue_permutation(hyp: ContrastHypothesis, pop: Population, z_obs, y, focals,
                       rng=None, replicates: int = 10_000, exact_cap: int = 10**6,
                       restrict_to_effective: bool = False) -> TestReport:
    """Permutation test on the focal exposure labels, preserving arm counts.

    Valid whenever the conditional law of the focal labels is uniform over
    arrangements with the observed counts. That holds by construction for the
    one-focal-per-household conditional mechanisms; for per-household
    unconditional focals it holds on the effective focals only, and only with
    equal household sizes (pass ``restrict_to_effective=True``, which also
    enforces the size condition).

    Every focal exposure must be one of the two contrasted labels unless
    ``restrict_to_effective`` drops the others.
    """
    focals = np.asarray(focals, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes_obs, ia, ib = _pair_codes(hyp, pop, a_obs)
    cf = codes_obs[focals]
    in_pair = (cf == ia) | (cf == ib)
    if restrict_to_effective:
        if not _equal_sizes(pop):
            raise EngineError(
                "the unconditional mechanism is a permutation test only with equal "
                "household sizes; use the exact engine instead"
            )
        focals = focals[in_pair]
        cf = cf[in_pair]
    elif not in_pair.all():
        bad = focals[~in_pair][0]
        raise EngineError(
            f"focal unit {pop.unit_ids[bad]!r} has exposure outside the contrasted pair; "
            "was the focal set drawn by the matching conditional mechanism?"
        )

    t_obs = _stat_from_codes(y, focals, codes_obs, ia, ib)
    n_b = int((cf == ib).sum())
    n_a = focals.size - n_b
    if n_a == 0 or n_b == 0:
        return _report(hyp, pop, focals, codes_obs, ia, ib, -np.inf, 1.0,
                       "permutation", 0, seed_of(rng))

    yf = y[focals]
    idx, exact = draw_b_arm_indices(focals.size, n_b, rng, replicates, exact_cap)
    s_b = yf[idx].sum(axis=1)
    t_null = (yf.sum() - s_b) / n_a - s_b / n_b
    if exact:
        pvalue = float((t_null >= t_obs).mean())
    else:
        pvalue = (1.0 + int((t_null >= t_obs).sum())) / (idx.shape[0] + 1.0)
    return _report(hyp, pop, focals, codes_obs, ia, ib, t_obs, pvalue,
                   "permutation", idx.shape[0], seed_of(rng))


def pvalue_permutation_spillover(pop: Population, z_obs, y, focals, rng=None,
                                 replicates: int = 10_000,
                                 exact_cap: int = 10**6) -> TestReport:
    """Permutation test of the no-spillover null on one untreated focal per household."""
    focals = np.asarray(focals, dtype=np.intp)
    hh = pop.household_of[focals]
    if focals.size != pop.n_households or np.unique(hh).size != focals.size:
        raise EngineError("spillover permutation test needs exactly one focal per household")
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    if np.any(a_obs.z[focals] == 1):
        raise EngineError("spillover permutation test requires untreated focals")
    return pvalue_permutation(spillover_hypothesis(), pop, a_obs, y, focals,
                              rng=rng, replicates=replicates, exact_cap=exact_cap)


# --- Monte Carlo over the conditional assignment distribution ---------------


def _uniform_treated_subset(rng, candidates: np.ndarray, k: int) -> np.ndarray:
    if k > candidates.size:
        raise EngineError("infeasible conditional draw: not enough candidate households")
    return rng.choice(candidates, size=k, replace=False)


def _treat_non_focal_member(rng, pop: Population, hh: np.ndarray,
                            focal_of_hh: np.ndarray) -> np.ndarray:
    """One uniform non-focal member per given household (vectorized)."""
    sizes = pop.household_sizes[hh]
    if np.any(sizes < 2):
        raise EngineError("cannot treat a non-focal member in a single-unit household")
    r = rng.integers(0, sizes - 1)
    focal_pos = pop.position_in_household[focal_of_hh[hh]]
    r = r + (r >= focal_pos)
    return pop.members_flat[pop.household_offsets[hh] + r]


def conditional_assignment_sampler(mech: MechanismSpec, hyp: ContrastHypothesis,
                                   pop: Population, design: DesignSpec, focals,
                                   z_obs):
    """A draw function for the conditional distribution of assignments given the event.

    Derivations behind each branch are exercised by the tests: the sampled
    pushforward matches the exact conditional law on every enumerable
    instance. Raises when no exact sampler exists (the unconditional
    mechanisms with unequal household sizes need the exact engine instead).
    """
    focals = np.asarray(focals, dtype=np.intp)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)

    if mech.kind == "network_untreated_focals":
        codes, labels = exposure_codes(hyp.map, pop, a_obs)
        untreated_labels = {labels[c] for c in np.unique(codes[a_obs.z == 0])}
        if not untreated_labels <= {hyp.a, hyp.b}:
            raise EngineError(
                "Monte Carlo sampler unavailable: untreated units can take exposures "
                "outside the contrasted pair; use the exact engine"
            )
        return lambda rng: sample_network_conditional(pop, design, focals, rng)

    if design.kind != "two_stage":
        raise EngineError(f"no conditional sampler for mechanism {mech.kind!r} "
                          f"under design {design.kind!r}")
    k1 = design.k1
    focal_of_hh = np.empty(pop.n_households, dtype=np.intp)
    focal_of_hh[pop.household_of[focals]] = focals

    def assemble(treated_via_focal: np.ndarray, treated_via_other: np.ndarray, rng):
        z = np.zeros(pop.n_units, dtype=np.int8)
        z[focal_of_hh[treated_via_focal]] = 1
        if treated_via_other.size:
            z[_treat_non_focal_member(rng, pop, treated_via_other, focal_of_hh)] = 1
        return Assignment.from_z(pop, z)

    all_hh = np.arange(pop.n_households)
    if mech.kind == "spillover_conditional":
        def draw(rng):
            rng = as_rng(rng)
            s = _uniform_treated_subset(rng, all_hh, k1)
            return assemble(np.empty(0, dtype=np.intp), s, rng)
        return draw

    if mech.kind == "primary_conditional":
        def draw(rng):
            rng = as_rng(rng)
            s = _uniform_treated_subset(rng, all_hh, k1)
            return assemble(s, np.empty(0, dtype=np.intp), rng)
        return draw

    # per-household unconditional focals (and the focal-restriction variant)
    if not _equal_sizes(pop):
        raise EngineError(
            "the unconditional mechanism has no direct conditional sampler with "
            "unequal household sizes; use the exact engine"
        )
    focal_treated = a_obs.z[focals] == 1
    hh_focal_treated = pop.household_of[focals[focal_treated]]
    hh_focal_untreated = pop.household_of[focals[~focal_treated]]
    if {hyp.a, hyp.b} == {(0, 0), (0, 1)}:
        # treated-focal households stay treated through their focal; the other
        # treated households come from the untreated-focal ones
        def draw(rng):
            rng = as_rng(rng)
            s = _uniform_treated_subset(rng, hh_focal_untreated, k1 - hh_focal_treated.size)
            return assemble(hh_focal_treated, s, rng)
        return draw
    if {hyp.a, hyp.b} == {(0, 0), (1, 1)}:
        # untreated focals in treated households pin those households as
        # treated through a non-focal; the rest are treated through their focal
        w_of_focal_hh = a_obs.w[pop.household_of[focals]]
        pinned = pop.household_of[focals[(~focal_treated) & (w_of_focal_hh == 1)]]
        candidates = np.setdiff1d(all_hh, pinned)
        def draw(rng):
            rng = as_rng(rng)
            s = _uniform_treated_subset(rng, candidates, k1 - pinned.size)
            return assemble(s, pinned, rng)
        return draw
    raise EngineError(
        "no conditional sampler for this contrast under the unconditional mechanism; "
        "use the exact engine"
    )


def pvalue_monte_carlo(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                       mech: MechanismSpec, z_obs, y, rng=None,
                       replicates: int = 10_000) -> TestReport:
    """Draw the conditioning event once, then Monte Carlo over assignments.

    Each draw is checked against the conditioning rules (contrasted focals
    stay in the pair, others keep their exposure), so a sampler that does not
    match the hypothesis fails fast rather than producing an invalid test.
    """
    rng = as_rng(rng)
    y = np.asarray(y, dtype=float)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    focals = draw_focals(mech, hyp, pop, a_obs, rng)
    codes_obs, ia, ib = _pair_codes(hyp, pop, a_obs)
    t_obs = _stat_from_codes(y, focals, codes_obs, ia, ib)
    sampler = conditional_assignment_sampler(mech, hyp, pop, design, focals, a_obs)

    cf_obs = codes_obs[focals]
    obs_in_pair = (cf_obs == ia) | (cf_obs == ib)
    hits = 0
    for _ in range(replicates):
        cand = sampler(rng)
        codes_r, _ = exposure_codes(hyp.map, pop, cand)
        cr = codes_r[focals]
        in_pair = (cr == ia) | (cr == ib)
        if np.any(obs_in_pair & ~in_pair) or np.any(~obs_in_pair & (cr != cf_obs)):
            raise EngineError(
                "conditional draw violates the conditioning rules; mechanism and "
                "hypothesis are incompatible"
            )
        if _stat_from_codes(y, focals, codes_r, ia, ib) >= t_obs:
            hits += 1
    if t_obs == -np.inf:
        pvalue, replicates_used = 1.0, replicates
    else:
        pvalue = (1.0 + hits) / (replicates + 1.0)
        replicates_used = replicates
    return _report(hyp, pop, focals, codes_obs, ia, ib, t_obs, pvalue,
                   "monte_carlo", replicates_used, seed_of(rng))


# --- imputability ------------------------------------------------------------


@dataclass(frozen=True)
class PotentialOutcomes:
    """Full potential-outcome table under an exposure mapping (simulation only).

    ``table[label][i]`` is unit i's outcome whenever its exposure is
    ``label``, which encodes the assumption that outcomes depend on the
    assignment only through the exposure.
    """

    map: ExposureMapSpec
    table: dict

    def realize(self, pop: Population, assignment) -> np.ndarray:
        codes, labels = exposure_codes(self.map, pop, assignment)
        y = np.empty(pop.n_units, dtype=float)
        for c, label in enumerate(labels):
            mask = codes == c
            if mask.any():
                y[mask] = np.asarray(self.table[label], dtype=float)[mask]
        return y


@dataclass
class ImputabilityResult:
    imputable: bool
    counterexample: dict | None = None
    events_checked: int = 0

    def __bool__(self) -> bool:
        return self.imputable


def check_imputable(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                    mech: MechanismSpec, potential: PotentialOutcomes,
                    support_cap: int = 10**4, focal_cap: int = 10**4) -> ImputabilityResult:
    """Verify the statistic is imputable: oracle triple loop over (Z, Z', event).

    For every conditioning event and every pair of assignments with positive
    joint mass, the statistic at one assignment must be unchanged when
    computed from outcomes observed under the other. Returns the first
    violation found, which under a false null demonstrates where the test
    gets its power.
    """
    support = list(enumerate_assignments(design, pop, cap=support_cap))
    groups: dict = {}
    for a_z in support:
        for focals in enumerate_focal_sets(mech, pop, a_z, cap=focal_cap):
            if mechanism_log_weight(mech, pop, focals, a_z) == -np.inf:
                continue
            zset = compatible_set(hyp, pop, design, focals, a_z, cap=support_cap)
            key = (tuple(focals), frozenset(c.key() for c in zset))
            groups.setdefault(key, {"focals": focals, "members": []})
            groups[key]["members"].append(a_z)

    codes_cache = {}

    def codes_for(a_z):
        k = a_z.key()
        if k not in codes_cache:
            codes_cache[k] = exposure_codes(hyp.map, pop, a_z)[0]
        return codes_cache[k]

    _, labels = exposure_codes(hyp.map, pop, support[0])
    ia, ib = labels.index(hyp.a), labels.index(hyp.b)

    for group in groups.values():
        focals = group["focals"]
        members = group["members"]
        realized = [potential.realize(pop, a_z) for a_z in members]
        for zi, a_prime in enumerate(members):
            codes_p = codes_for(a_prime)
            t_own = _stat_from_codes(realized[zi], focals, codes_p, ia, ib)
            for zj, a_src in enumerate(members):
                if zj == zi:
                    continue
                t_imputed = _stat_from_codes(realized[zj], focals, codes_p, ia, ib)
                same = (t_own == t_imputed) or (
                    np.isfinite(t_own) and np.isfinite(t_imputed)
                    and abs(t_own - t_imputed) <= 1e-12
                )
                if not same:
                    return ImputabilityResult(
                        imputable=False,
                        counterexample={
                            "focals": [pop.unit_ids[i] for i in focals],
                            "z_evaluated": list(map(int, a_prime.z)),
                            "z_observed": list(map(int, a_src.z)),
                            "t_own_outcomes": t_own,
                            "t_imputed_outcomes": t_imputed,
                        },
                        events_checked=len(groups),
                    )
    return ImputabilityResult(imputable=True, events_checked=len(groups))
