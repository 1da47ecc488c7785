"""Covariate adjustment, point estimates, interval inversion."""


import numpy as np
import pytest

from crtest import (
    AdditiveEffectModel,
    ConfigError,
    DataError,
    DesignSpec,
    EngineError,
    MechanismSpec,
    draw_focals,
    exposures,
    hodges_lehmann,
    invert_ci,
    permutation_inversion,
    residualize,
    sample,
    shift_under_null,
    spawn_rng,
    spillover_hypothesis,
)
from crtest.estimate import default_tau_grid, permutation_profile
from crtest.power import equal_household_population, two_stage_potential_outcomes

SPILL = MechanismSpec(kind="spillover_conditional")
MODEL = AdditiveEffectModel(target="spillover")


# --- residualize -----------------------------------------------------------------


def test_residualize_perfect_fit(rng):
    x = rng.normal(size=(60, 2))
    y = 1.0 + x @ np.array([2.0, -1.0])
    rr = residualize(y, x, 0.5, rng)
    assert np.max(np.abs(rr.residuals)) < 1e-8


def test_residualize_intercept_only(rng):
    y = rng.normal(size=40)
    rr = residualize(y, np.zeros((40, 0)), 0.4, rng)
    expected = y - y[rr.holdout_idx].mean()
    assert np.allclose(rr.residuals, expected, atol=1e-12)


def test_residualize_recovers_noise_variance(rng):
    n = 4000
    x = rng.normal(size=(n, 1))
    noise = rng.normal(scale=0.5, size=n)
    y = 2.0 * x[:, 0] + noise
    rr = residualize(y, x, 0.5, rng)
    resid_var = rr.residuals[rr.analysis_idx].var()
    assert resid_var == pytest.approx(0.25, rel=0.1)


def test_residualize_singular_matrix(rng):
    x = rng.normal(size=(30, 1))
    dup = np.column_stack([x, x])  # exactly collinear
    with pytest.raises(DataError, match="singular"):
        residualize(rng.normal(size=30), dup, 0.5, rng)


def test_residualize_split_hygiene(rng):
    x = spawn_rng(1).normal(size=(50, 2))
    y = spawn_rng(2).normal(size=50)
    rr = residualize(y, x, 0.4, spawn_rng(3))
    y2 = y.copy()
    y2[rr.analysis_idx] += 100.0  # analysis outcomes must not matter for the fit
    rr2 = residualize(y2, x, 0.4, spawn_rng(3))
    assert np.array_equal(rr.holdout_idx, rr2.holdout_idx)
    assert np.allclose(rr.coef, rr2.coef, atol=1e-12)


def test_residualize_group_split_keeps_households(rng):
    groups = np.repeat(np.arange(25), 2)
    x = rng.normal(size=(50, 1))
    rr = residualize(rng.normal(size=50), x, 0.3, rng, groups=groups)
    held = set(groups[rr.holdout_idx].tolist())
    kept = set(groups[rr.analysis_idx].tolist())
    assert held.isdisjoint(kept)


def test_residualize_bad_fraction(rng):
    with pytest.raises(ConfigError):
        residualize(np.ones(10), np.ones((10, 1)), 1.5, rng)


# --- shift_under_null ---------------------------------------------------------------


def _spillover_setup(k=6, seed=5, tau=0.0):
    pop = equal_household_population(k, 2)
    design = DesignSpec(kind="two_stage", k1=k // 2)
    potential = two_stage_potential_outcomes(pop, tau, 0.0, 0.0, 1.0, spawn_rng(seed, 0))
    z = sample(design, pop, spawn_rng(seed, 1))
    y = potential.realize(pop, z)
    h = exposures(spillover_hypothesis().map, pop, z)
    return pop, design, z, y, h


def test_shift_identity_at_zero():
    _, _, _, y, h = _spillover_setup()
    assert np.array_equal(shift_under_null(y, h, MODEL, 0.0), y)


def test_shift_round_trip():
    _, _, _, y, h = _spillover_setup()
    shifted = shift_under_null(y, h, MODEL, 0.8)
    assert np.allclose(shift_under_null(shifted, h, MODEL, -0.8), y, atol=1e-12)


def test_shift_equalizes_arms_under_true_effect():
    diffs = []
    for seed in range(40):
        pop, _, z, y, h = _spillover_setup(k=40, seed=seed, tau=-1.0)
        shifted = shift_under_null(y, h, MODEL, -1.0)
        a_arm = shifted[np.fromiter((hi == (0, 0) for hi in h), bool, len(h))]
        b_arm = shifted[np.fromiter((hi == (0, 1) for hi in h), bool, len(h))]
        diffs.append(a_arm.mean() - b_arm.mean())
    assert abs(np.mean(diffs)) < 0.1


# --- point estimate and interval -----------------------------------------------------


def _inversion(k, tau, seed, alpha=0.05, grid=None, replicates=4000):
    pop, design, z, y, h = _spillover_setup(k=k, seed=seed, tau=tau)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(seed, 2))
    return permutation_inversion(hyp, pop, z, y, focals, MODEL, alpha=alpha,
                                 grid=grid, rng=spawn_rng(seed, 3), replicates=replicates)


def test_point_estimate_recovers_true_effect():
    result = _inversion(k=500, tau=-1.0, seed=11)
    assert result.tau_hat == pytest.approx(-1.0, abs=0.15)
    assert result.ci_low <= -1.0 <= result.ci_high


def test_point_estimate_zero_effect():
    result = _inversion(k=500, tau=0.0, seed=12)
    assert result.tau_hat == pytest.approx(0.0, abs=0.15)


def test_hl_shift_equivariance():
    delta = 0.7
    seed = 21
    pop, design, z, y, h = _spillover_setup(k=50, seed=seed, tau=-1.0)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(seed, 2))
    b_mask = np.fromiter((hi == (0, 1) for hi in h), bool, len(h))
    y_shifted = y + delta * b_mask

    grid = np.linspace(-4.0, 2.0, 121)
    p1 = permutation_profile(hyp, pop, z, y, focals, MODEL, rng=spawn_rng(seed, 3),
                             replicates=3000)
    p2 = permutation_profile(hyp, pop, z, y_shifted, focals, MODEL, rng=spawn_rng(seed, 3),
                             replicates=3000)
    t1 = hodges_lehmann(p1.expected_stat, p1.a_obs, grid)
    t2 = hodges_lehmann(p2.expected_stat, p2.a_obs, grid + delta)
    assert t2 - t1 == pytest.approx(delta, abs=1e-9)


def test_hodges_lehmann_requires_bracketing():
    with pytest.raises(EngineError, match="widen"):
        hodges_lehmann(lambda tau: tau + 100.0, 0.0, np.linspace(0.0, 1.0, 11))


def test_interval_width_monotone_in_alpha():
    pop, design, z, y, h = _spillover_setup(k=80, seed=31, tau=-1.0)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(31, 2))
    profile = permutation_profile(hyp, pop, z, y, focals, MODEL, rng=spawn_rng(31, 3),
                                  replicates=2000)
    grid = np.linspace(-3.0, 1.0, 81)
    tau0 = hodges_lehmann(profile.expected_stat, profile.a_obs, grid)
    loose = invert_ci(profile.pvalue_two_sided, grid, 0.5, tau_hat=tau0)
    tight = invert_ci(profile.pvalue_two_sided, grid, 0.05, tau_hat=tau0)
    assert (loose.ci_high - loose.ci_low) < (tight.ci_high - tight.ci_low)
    # a tiny alpha keeps every grid point (add-one p-values are bounded away from 0)
    everything = invert_ci(profile.pvalue_two_sided, grid, 1e-6, tau_hat=tau0)
    assert everything.ci_low == grid[0] and everything.ci_high == grid[-1]
    assert loose.ci_low <= tau0 <= loose.ci_high


def test_interval_empty_set_degenerates():
    pop, design, z, y, h = _spillover_setup(k=80, seed=33, tau=-1.0)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(33, 2))
    profile = permutation_profile(hyp, pop, z, y, focals, MODEL, rng=spawn_rng(33, 3),
                                  replicates=2000)
    grid = np.linspace(-3.0, 1.0, 81)
    result = invert_ci(profile.pvalue_two_sided, grid, 0.9999, tau_hat=-1.0)
    assert result.ci_low == result.ci_high == -1.0
    assert any("empty" in w for w in result.warnings)


def test_default_grid_shape():
    grid = default_tau_grid(1.5, 2.0)
    assert grid.size == 81
    assert grid[0] == pytest.approx(1.5 - 8.0)
    assert grid[-1] == pytest.approx(1.5 + 8.0)


def test_two_sided_pvalue_capped():
    pop, design, z, y, h = _spillover_setup(k=40, seed=35)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(35, 2))
    profile = permutation_profile(hyp, pop, z, y, focals, MODEL, rng=spawn_rng(35, 3),
                                  replicates=500)
    for tau in np.linspace(-2, 2, 9):
        assert 0.0 < profile.pvalue_two_sided(tau) <= 1.0


def test_custom_model_requires_pair_label():
    pop, design, z, y, h = _spillover_setup(k=10, seed=37)
    hyp = spillover_hypothesis()
    focals = draw_focals(SPILL, hyp, pop, z, spawn_rng(37, 2))
    bad = AdditiveEffectModel(target="primary")  # (1,1) is outside the spillover pair
    with pytest.raises(ConfigError, match="contrast pair"):
        permutation_profile(hyp, pop, z, y, focals, bad, rng=1, replicates=100)


def test_invert_ci_noncontiguous_and_boundary_warnings():
    grid = np.array([0.0, 1.0, 2.0, 3.0])
    pv = {0.0: 0.2, 1.0: 0.01, 2.0: 0.2, 3.0: 0.01}
    res = invert_ci(lambda t: pv[float(t)], grid, 0.05, tau_hat=0.0)
    assert (res.ci_low, res.ci_high) == (0.0, 2.0)
    assert any("non-contiguous" in w for w in res.warnings)
    assert any("boundary" in w for w in res.warnings)
