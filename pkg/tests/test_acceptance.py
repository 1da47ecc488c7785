"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see every line. All
randomness is seeded, so results are reproducible; statistical checks use the
stated tolerances. The full suite takes a few minutes, dominated by the power
comparison.
"""

import itertools
import json

import numpy as np
import pytest
from scipy import stats

from crtest import (
    AdditiveEffectModel,
    AnalyticPowerParams,
    ConditioningEvent,
    DesignSpec,
    MechanismSpec,
    PowerScenario,
    analytic_power,
    check_imputable,
    compatible_set,
    draw_focals,
    effective_focal_distribution,
    effective_focals,
    focal_restriction_set,
    permutation_inversion,
    primary_hypothesis,
    pvalue_exact,
    pvalue_permutation,
    sample,
    simulate_power,
    spawn_rng,
    spillover_hypothesis,
    support_size,
)
from crtest.cli import main as cli_main
from crtest.power import equal_household_population, two_stage_potential_outcomes
from conftest import make_population
from test_power import fisher_mc_power

COND_SPILL = MechanismSpec(kind="spillover_conditional")
COND_PRIMARY = MechanismSpec(kind="primary_conditional")
UNCOND = MechanismSpec(kind="per_household_unconditional")


def report(number, name, ok, detail):
    print(f"\nacceptance criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def test_criterion_1_validity():
    """Rejection rate of the spillover test under its null, 2000 seeded runs."""
    pop = equal_household_population(100, 2)
    design = DesignSpec(kind="two_stage", k1=50)
    hyp = spillover_hypothesis()
    pvals = np.empty(2000)
    for r in range(2000):
        potential = two_stage_potential_outcomes(pop, 0.0, -1.0, 5.0, 1.0, spawn_rng(55, r, 0))
        z = sample(design, pop, spawn_rng(55, r, 1))
        y = potential.realize(pop, z)
        rng = spawn_rng(55, r, 2)
        focals = draw_focals(COND_SPILL, hyp, pop, z, rng)
        pvals[r] = pvalue_permutation(hyp, pop, z, y, focals, rng=rng, replicates=999).pvalue
    rate_05 = float(np.mean(pvals <= 0.05))
    in_band = 0.03 <= rate_05 <= 0.07
    bounded = all(np.mean(pvals <= a) <= a + 0.02 for a in (0.01, 0.05, 0.10))
    ok = in_band and bounded
    assert report(1, "validity", ok,
                  f"rejection at alpha=0.05: {rate_05:.4f} (band [0.03, 0.07]); "
                  f"all of alpha in (0.01, 0.05, 0.10) within +0.02")


def test_criterion_2_permutation_equals_exact():
    """Permutation p-value equals the exact conditional p-value to 1e-12."""
    rng = spawn_rng(202)
    worst = 0.0
    for i in range(50):
        k = int(rng.integers(2, 7))
        sizes = rng.integers(2, 5, size=k)
        k1 = int(rng.integers(1, k))
        pop = make_population(sizes)
        design = DesignSpec(kind="two_stage", k1=k1)
        hyp = spillover_hypothesis()
        y = rng.normal(size=pop.n_units)
        z = sample(design, pop, rng)
        focals = draw_focals(COND_SPILL, hyp, pop, z, rng)
        exact = pvalue_exact(
            hyp, pop, design,
            ConditioningEvent(focals=focals,
                              zset=compatible_set(hyp, pop, design, focals, z)),
            y, z, mech=COND_SPILL,
        )
        perm = pvalue_permutation(hyp, pop, z, y, focals, rng=rng)
        worst = max(worst, abs(perm.pvalue - exact.pvalue))
    ok = worst <= 1e-12
    assert report(2, "permutation equals exact", ok,
                  f"max |permutation - exact| over 50 instances: {worst:.2e}")


def test_criterion_3_restriction_set_equivalence():
    """Fixing focal assignments defines the same set as the compatibility rules."""
    hyp = spillover_hypothesis()
    rng = spawn_rng(303)
    checked = 0
    for k in (2, 3):
        for sizes in itertools.product((2, 3), repeat=k):
            for k1 in range(1, k):
                pop = make_population(sizes)
                design = DesignSpec(kind="two_stage", k1=k1)
                assert support_size(design, pop) <= 10**4
                for _ in range(2):
                    z = sample(design, pop, rng)
                    for mech in (UNCOND, COND_SPILL):
                        focals = draw_focals(mech, hyp, pop, z, rng)
                        left = {a.key() for a in compatible_set(hyp, pop, design, focals, z)}
                        right = {a.key() for a in focal_restriction_set(pop, design, focals, z)}
                        assert left == right
                        checked += 1
    pop = make_population([2] * 4)
    design = DesignSpec(kind="two_stage", k1=2)
    for _ in range(4):
        z = sample(design, pop, rng)
        focals = draw_focals(UNCOND, hyp, pop, z, rng)
        left = {a.key() for a in compatible_set(hyp, pop, design, focals, z)}
        right = {a.key() for a in focal_restriction_set(pop, design, focals, z)}
        assert left == right
        checked += 1
    assert report(3, "focal-restriction equivalence", True,
                  f"exact set equality on {checked} instance draws")


def _chi2_against(dist, counts):
    support = np.arange(counts.size)
    expected = counts.sum() * dist.pmf(support)
    mask = expected >= 5  # merge sparse tail cells
    obs = np.concatenate([counts[mask], [counts[~mask].sum()]])
    exp = np.concatenate([expected[mask], [expected[~mask].sum()]])
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    return stats.chisquare(obs, exp, ddof=0).pvalue


def test_criterion_4_effective_focal_law():
    """Effective-focal counts: distribution for uniform focals, constant K for conditional.

    The stated law K - K1 + Binomial(K1, 1/n) is the effective count for the
    primary contrast (a treated household contributes when its focal is the
    treated unit); at n = 2 it also matches the spillover contrast by the
    symmetry of Binomial(K1, 1/2).
    """
    k, k1, draws = 20, 10, 100_000
    details = []
    for n in (2, 3, 5):
        pop = equal_household_population(k, n)
        design = DesignSpec(kind="two_stage", k1=k1)
        hyp = primary_hypothesis()
        rng = spawn_rng(404, n)
        counts = np.zeros(k + 1, dtype=np.int64)
        z = sample(design, pop, rng)
        for _ in range(draws):
            focals = draw_focals(UNCOND, hyp, pop, z, rng)
            counts[effective_focals(hyp, pop, focals, z).size] += 1
        pv = _chi2_against(effective_focal_distribution(k, k1, n), counts)
        details.append(f"n={n}: chi2 p={pv:.3f}")
        assert pv > 0.01
    # spillover contrast at n=2, where the same law applies
    pop = equal_household_population(k, 2)
    design = DesignSpec(kind="two_stage", k1=k1)
    hyp = spillover_hypothesis()
    rng = spawn_rng(405)
    z = sample(design, pop, rng)
    counts = np.zeros(k + 1, dtype=np.int64)
    for _ in range(draws):
        focals = draw_focals(UNCOND, hyp, pop, z, rng)
        counts[effective_focals(hyp, pop, focals, z).size] += 1
    pv = _chi2_against(effective_focal_distribution(k, k1, 2), counts)
    details.append(f"spillover n=2: chi2 p={pv:.3f}")
    assert pv > 0.01
    # conditional mechanisms: every draw has all K focals effective
    for mech, h in ((COND_SPILL, spillover_hypothesis()), (COND_PRIMARY, primary_hypothesis())):
        pop = equal_household_population(k, 3)
        rng = spawn_rng(406)
        z = sample(design, pop, rng)
        all_k = all(
            effective_focals(h, pop, draw_focals(mech, h, pop, z, rng), z).size == k
            for _ in range(draws // 10)
        )
        assert all_k
    details.append("conditional mechanisms: |effective| = K in 100% of draws")
    assert report(4, "effective-focal law", True, "; ".join(details))


def test_criterion_5_power_ordering():
    """Conditional focal choice dominates at the extreme design; gap trends in n."""
    details = []
    taus = np.linspace(0.0, 2.0, 9)
    dominance = True
    for tau in taus:
        scen = PowerScenario(n_households=500, n_treated_households=250, household_size=50,
                             tau_primary=float(tau), replications=500)
        res = simulate_power(scen, COND_PRIMARY, UNCOND, "primary", seed=301,
                             engine_replicates=399)
        c, u = res.per_mechanism
        if tau == 0.0:
            # both tests are exactly level alpha at zero effect; check the band
            dominance &= abs(c.power - 0.05) <= 0.02 and abs(u.power - 0.05) <= 0.02
        else:
            dominance &= c.power >= u.power
    details.append(f"K=500, n=50 primary: conditional >= unconditional at all tau > 0, "
                   f"both within 0.05 +/- 0.02 at tau=0: {dominance}")
    assert dominance

    gaps_s = []
    for n in (2, 5, 10, 25):
        scen = PowerScenario(n_households=100, n_treated_households=50, household_size=n,
                             tau_spillover=0.35, replications=10_000)
        res = simulate_power(scen, COND_SPILL, UNCOND, "spillover", seed=311,
                             engine_replicates=399)
        c, u = res.per_mechanism
        gaps_s.append(c.power - u.power)
    shrinks = all(a > b for a, b in zip(gaps_s, gaps_s[1:]))
    details.append("spillover gap by n " + str([round(g, 4) for g in gaps_s])
                   + f" shrinks: {shrinks}")
    assert shrinks

    gaps_p = []
    for n in (2, 5, 10, 25):
        scen = PowerScenario(n_households=100, n_treated_households=50, household_size=n,
                             tau_primary=0.35, replications=4000)
        res = simulate_power(scen, COND_PRIMARY, UNCOND, "primary", seed=313,
                             engine_replicates=399)
        c, u = res.per_mechanism
        gaps_p.append(c.power - u.power)
    grows = all(a < b for a, b in zip(gaps_p, gaps_p[1:]))
    details.append("primary gap by n " + str([round(g, 4) for g in gaps_p])
                   + f" grows: {grows}")
    assert grows
    assert report(5, "power ordering", dominance and shrinks and grows, "; ".join(details))


def test_criterion_6_analytic_power():
    """Closed-form power: exact at zero effect, near Monte Carlo elsewhere."""
    for alpha in np.linspace(0.005, 0.995, 34):
        params = AnalyticPowerParams(n_units=200, treated_fraction=0.5, tau=0.0,
                                     sigma=1.0, alpha=float(alpha))
        assert analytic_power(params) == pytest.approx(alpha, abs=1e-12)
    worst = 0.0
    for tau in (0.25, 0.5, 1.0):
        approx = analytic_power(
            AnalyticPowerParams(n_units=200, treated_fraction=0.5, tau=tau, sigma=1.0)
        )
        mc = fisher_mc_power(200, 100, tau, 1.0, 0.05, sims=2500, perms=499, seed=101)
        worst = max(worst, abs(approx - mc))
    ok = worst <= 0.03
    assert report(6, "analytic power", ok,
                  f"alpha recovered to 1e-12 at tau=0; max |formula - MC| = {worst:.4f}")


def test_criterion_7_estimation():
    """Point estimates and interval coverage under a constant spillover of -1."""
    pop = equal_household_population(200, 2)
    design = DesignSpec(kind="two_stage", k1=100)
    hyp = spillover_hypothesis()
    model = AdditiveEffectModel(target="spillover")
    # fine grid so the grid snap is negligible next to the statistic's spread
    grid = np.linspace(-2.2, 0.4, 209)
    tau_hats, covered, width_c, width_u = [], [], [], []
    for r in range(400):
        potential = two_stage_potential_outcomes(pop, -1.0, 0.5, 3.0, 1.0, spawn_rng(71, r, 0))
        z = sample(design, pop, spawn_rng(71, r, 1))
        y = potential.realize(pop, z)
        rng_c = spawn_rng(71, r, 2)
        focals = draw_focals(COND_SPILL, hyp, pop, z, rng_c)
        res_c = permutation_inversion(hyp, pop, z, y, focals, model, alpha=0.05,
                                      grid=grid, rng=rng_c, replicates=2000)
        rng_u = spawn_rng(71, r, 3)
        focals_u = draw_focals(UNCOND, hyp, pop, z, rng_u)
        res_u = permutation_inversion(hyp, pop, z, y, focals_u, model, alpha=0.05,
                                      grid=grid, rng=rng_u, replicates=2000,
                                      restrict_to_effective=True)
        tau_hats.append(res_c.tau_hat)
        covered.append(res_c.ci_low <= -1.0 <= res_c.ci_high)
        width_c.append(res_c.ci_high - res_c.ci_low)
        width_u.append(res_u.ci_high - res_u.ci_low)
    median_50 = float(np.median(tau_hats[:50]))
    coverage = float(np.mean(covered))
    mw_c, mw_u = float(np.mean(width_c)), float(np.mean(width_u))
    ok = abs(median_50 + 1.0) <= 0.15 and 0.92 <= coverage <= 0.98 and mw_c <= mw_u
    assert report(7, "estimation", ok,
                  f"median estimate over 50 reps: {median_50:.3f} (target -1 +/- 0.15); "
                  f"coverage over 400 reps: {coverage:.3f} (band [0.92, 0.98]); "
                  f"mean interval width {mw_c:.3f} (conditional) <= {mw_u:.3f} (unconditional)")


def test_criterion_8_imputability():
    """The oracle confirms imputability under the null and finds violations off it."""
    rng = spawn_rng(808)
    confirmed = violations = 0
    for i in range(20):
        k = int(rng.integers(2, 4))
        sizes = rng.integers(2, 4, size=k)
        k1 = int(rng.integers(1, k))
        pop = make_population(sizes)
        design = DesignSpec(kind="two_stage", k1=k1)
        base = rng.normal(size=pop.n_units)
        from crtest import PotentialOutcomes
        from crtest.exposure import ExposureMapSpec

        def table(spill, prim):
            return PotentialOutcomes(
                map=ExposureMapSpec(kind="two_stage"),
                table={(0, 0): base, (0, 1): base + spill, (1, 1): base + prim},
            )

        if i % 2 == 0:
            hyp, mech = spillover_hypothesis(), COND_SPILL
            good, bad = table(0.0, 1.0), table(0.8, 1.0)
        else:
            hyp, mech = primary_hypothesis(), COND_PRIMARY
            good, bad = table(1.0, 0.0), table(1.0, 0.8)
        res_good = check_imputable(hyp, pop, design, mech, good)
        res_bad = check_imputable(hyp, pop, design, mech, bad)
        confirmed += bool(res_good)
        violations += (not res_bad.imputable) and res_bad.counterexample is not None
    ok = confirmed == 20 and violations == 20
    assert report(8, "imputability oracle", ok,
                  f"{confirmed}/20 null instances imputable, "
                  f"{violations}/20 violations produced a counterexample")


def test_criterion_9_determinism(tmp_path):
    """Each subcommand run twice with one seed emits byte-identical outputs."""
    data = tmp_path / "data.csv"
    assert cli_main(["simulate", "--out", str(data), "--households", "30",
                     "--treated-households", "15", "--tau-spillover", "-1.0",
                     "--seed", "5"]) == 0
    data2 = tmp_path / "data2.csv"
    assert cli_main(["simulate", "--out", str(data2), "--households", "30",
                     "--treated-households", "15", "--tau-spillover", "-1.0",
                     "--seed", "5"]) == 0
    identical = {"simulate": data.read_bytes() == data2.read_bytes()}

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "data": {"path": str(data)},
        "design": {"kind": "two_stage", "k1": 15},
        "engine": {"method": "permutation", "replicates": 300},
        "batch": {"draws": 6},
        "seed": 11,
    }))
    pcfg = tmp_path / "pcfg.json"
    pcfg.write_text(json.dumps({
        "power": {"n_households": 10, "n_treated_households": 5, "household_size": 2,
                  "replications": 30, "engine_replicates": 59, "target": "spillover",
                  "taus": [0.0, 0.8]},
        "seed": 13,
    }))
    for command, config in (("test", cfg), ("invert", cfg), ("power", pcfg)):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{command}_{run}"
            assert cli_main([command, "--config", str(config), "--out-dir", str(out)]) == 0
            outs.append(b"".join(sorted(p.read_bytes() for p in out.iterdir())))
        identical[command] = outs[0] == outs[1]
    ok = all(identical.values())
    assert report(9, "determinism", ok,
                  "; ".join(f"{k}: {'identical' if v else 'DIFFERS'}" for k, v in identical.items()))
