"""Effect estimation: covariate adjustment, point estimates, interval inversion.

The additive model says the shifted exposure adds a constant tau to the
baseline outcome. Subtracting a candidate tau from units observed at the
shifted exposure turns the hypothesis "the effect equals tau" into a plain
zero-contrast null on the transformed outcomes, so the whole tau grid reuses
one test engine. The point estimate picks the grid tau whose null expectation
of the statistic is closest to the observed statistic; the confidence set
keeps the taus whose two-sided p-value exceeds alpha.

The statistic is linear in the outcomes and the transformation is affine in
tau, so each reference draw contributes a pair (contrast of y, contrast of
the shift indicator) and the entire grid profile costs one set of draws
(common random numbers, giving a smooth p-value curve across the grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .conditioning import ConditioningEvent, ContrastHypothesis, MechanismSpec, mechanism_log_weight
from .design import Assignment, DesignSpec, log_mass
from .engine import draw_b_arm_indices
from .errors import ConfigError, DataError, EngineError
from .exposure import exposure_codes
from .population import Population
from .rng import as_rng


# --- covariate adjustment ----------------------------------------------------


@dataclass(frozen=True)
class ResidualizeResult:
    """Residuals from a regression fit on a held-out split.

    ``residuals`` covers every unit (outcome minus holdout-fitted
    prediction); downstream analysis should use the ``analysis_idx`` rows,
    whose outcomes never entered the fit.
    """

    residuals: np.ndarray
    analysis_idx: np.ndarray
    holdout_idx: np.ndarray
    coef: np.ndarray


def residualize(y, covariates, holdout_fraction: float, rng, groups=None) -> ResidualizeResult:
    """Regression-adjust outcomes using a random holdout split.

    Fits outcome on covariates (with intercept) over the holdout rows only,
    then returns residuals from that fit. When ``groups`` is given (e.g.
    household indices), whole groups are held out so the analysis split keeps
    intact households.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError("covariates must be an N x p matrix aligned with y")
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    rng = as_rng(rng)
    n = y.shape[0]

    if groups is None:
        perm = rng.permutation(n)
        n_hold = min(max(int(round(holdout_fraction * n)), 1), n - 1)
        holdout_idx = np.sort(perm[:n_hold])
    else:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        perm = rng.permutation(uniq.size)
        n_hold = min(max(int(round(holdout_fraction * uniq.size)), 1), uniq.size - 1)
        held = set(uniq[perm[:n_hold]].tolist())
        holdout_idx = np.flatnonzero([g in held for g in groups])
    analysis_idx = np.setdiff1d(np.arange(n), holdout_idx)

    design = np.column_stack([np.ones(n), x])
    dh = design[holdout_idx]
    rank = np.linalg.matrix_rank(dh)
    if rank < design.shape[1]:
        _, r, piv = sla.qr(dh, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = diag.max() * max(dh.shape) * np.finfo(float).eps if diag.size else 0.0
        dropped = sorted(int(piv[i]) - 1 for i in range(rank, design.shape[1]) if piv[i] > 0)
        raise DataError(
            f"singular covariate matrix on the holdout split (rank {rank} < "
            f"{design.shape[1]}); linearly dependent column indices: {dropped}"
        )
    coef, *_ = np.linalg.lstsq(dh, y[holdout_idx], rcond=None)
    residuals = y - design @ coef
    return ResidualizeResult(residuals=residuals, analysis_idx=analysis_idx,
                             holdout_idx=holdout_idx, coef=coef)


# --- the additive effect model ----------------------------------------------


@dataclass(frozen=True)
class AdditiveEffectModel:
    """Constant additive effect of the shifted exposure relative to pure control."""

    target: str  # "spillover" | "primary" | "custom"
    tau: float = 0.0
    exposure: object = None  # shifted label for target="custom"

    @property
    def shifted_exposure(self):
        if self.target == "spillover":
            return (0, 1)
        if self.target == "primary":
            return (1, 1)
        if self.target == "custom":
            if self.exposure is None:
                raise ConfigError("a custom effect target needs an explicit shifted exposure")
            return self.exposure
        raise ConfigError(f"unknown effect target {self.target!r}")


def shift_under_null(y, exposures_obs, model: AdditiveEffectModel, tau: float) -> np.ndarray:
    """Transform outcomes so the effect-equals-tau null becomes a zero null.

    Subtracts tau from units observed at the shifted exposure; tau = 0 is the
    identity, and applying tau then -tau round-trips exactly.
    """
    y = np.asarray(y, dtype=float)
    b = model.shifted_exposure
    mask = np.fromiter((h == b for h in exposures_obs), dtype=bool, count=len(exposures_obs))
    return y - tau * mask


# --- grid profiles: one set of reference draws, evaluated on a tau grid ------


@dataclass
class GridProfile:
    """Reference-draw contrasts of the outcome (a) and shift indicator (b).

    Under the effect-equals-tau null the statistic at a reference draw is
    a - tau*b - tau and the observed statistic is the unshifted observed
    contrast, so expectations and p-values for every tau come from the same
    draws.
    """

    a_null: np.ndarray
    b_null: np.ndarray
    a_obs: float
    exact: bool
    weights: np.ndarray | None = None  # exact conditional mass; None = equally weighted

    def _stat(self, tau: float) -> np.ndarray:
        return self.a_null - tau * self.b_null - tau

    def expected_stat(self, tau: float) -> float:
        t = self._stat(tau)
        finite = np.isfinite(t)
        if not finite.all():
            t = t[finite]
            w = None if self.weights is None else self.weights[finite] / self.weights[finite].sum()
        else:
            w = self.weights
        if t.size == 0:
            return float("nan")
        return float(np.average(t, weights=w))

    def _tail(self, hits: np.ndarray) -> float:
        if self.weights is not None:
            return float(self.weights[hits].sum())
        if self.exact:
            return float(hits.mean())
        return (1.0 + int(hits.sum())) / (hits.size + 1.0)

    def pvalue_upper(self, tau: float) -> float:
        return self._tail(self._stat(tau) >= self.a_obs)

    def pvalue_lower(self, tau: float) -> float:
        return self._tail(self._stat(tau) <= self.a_obs)

    def pvalue_two_sided(self, tau: float) -> float:
        """Double the smaller one-sided p-value, capped at 1."""
        return min(1.0, 2.0 * min(self.pvalue_upper(tau), self.pvalue_lower(tau)))


def _contrast_pair(values, e, cf, ia, ib):
    """Contrast of (values, shift indicator) at one label arrangement."""
    a_mask, b_mask = cf == ia, cf == ib
    na, nb = int(a_mask.sum()), int(b_mask.sum())
    if na == 0 or nb == 0:
        return -np.inf, 0.0
    va = float(values[a_mask].sum()) / na - float(values[b_mask].sum()) / nb
    vb = float(e[a_mask].sum()) / na - float(e[b_mask].sum()) / nb
    return va, vb


def permutation_profile(hyp: ContrastHypothesis, pop: Population, z_obs, y, focals,
                        model: AdditiveEffectModel, rng=None, replicates: int = 10_000,
                        exact_cap: int = 10**6,
                        restrict_to_effective: bool = False) -> GridProfile:
    """Grid profile for the label-permutation engine."""
    focals = np.asarray(focals, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes, labels = exposure_codes(hyp.map, pop, a_obs)
    ia, ib = labels.index(hyp.a), labels.index(hyp.b)
    cf = codes[focals]
    in_pair = (cf == ia) | (cf == ib)
    if restrict_to_effective:
        sizes = pop.household_sizes
        if sizes.min() != sizes.max():
            raise EngineError(
                "per-household unconditional focals permit a permutation engine "
                "only with equal household sizes; use the exact engine"
            )
        focals, cf = focals[in_pair], cf[in_pair]
    elif not in_pair.all():
        raise EngineError("every focal exposure must lie in the contrasted pair")

    if model.shifted_exposure not in (hyp.a, hyp.b):
        raise ConfigError("the effect model's shifted exposure must be one of the contrast pair")
    yf = y[focals]
    shifted_code = ib if model.shifted_exposure == hyp.b else ia
    e = (cf == shifted_code).astype(float)

    n_b = int((cf == ib).sum())
    n_a = focals.size - n_b
    if n_a == 0 or n_b == 0:
        raise EngineError("cannot profile a degenerate test (an observed arm is empty)")
    a_obs_val, _ = _contrast_pair(yf, e, cf, ia, ib)

    idx, exact = draw_b_arm_indices(focals.size, n_b, rng, replicates, exact_cap)
    s_y_b = yf[idx].sum(axis=1)
    s_e_b = e[idx].sum(axis=1)
    a_null = (yf.sum() - s_y_b) / n_a - s_y_b / n_b
    b_null = (e.sum() - s_e_b) / n_a - s_e_b / n_b
    return GridProfile(a_null=a_null, b_null=b_null, a_obs=a_obs_val, exact=exact)


def monte_carlo_profile(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                        mech: MechanismSpec, z_obs, y, focals,
                        model: AdditiveEffectModel, rng=None,
                        replicates: int = 10_000) -> GridProfile:
    """Grid profile from direct draws of the conditional assignment distribution.

    Needed when the conditional law is not a label permutation (the network
    mechanism): each draw contributes the contrast of outcomes and of the
    shift indicator under its own exposure labels.
    """
    from .engine import conditional_assignment_sampler  # avoids a module cycle

    focals = np.asarray(focals, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    rng = as_rng(rng)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes_obs, labels = exposure_codes(hyp.map, pop, a_obs)
    ia, ib = labels.index(hyp.a), labels.index(hyp.b)
    if model.shifted_exposure not in (hyp.a, hyp.b):
        raise ConfigError("the effect model's shifted exposure must be one of the contrast pair")
    shifted_code = ib if model.shifted_exposure == hyp.b else ia
    cf_obs = codes_obs[focals]
    yf = y[focals]
    e = (cf_obs == shifted_code).astype(float)
    a_obs_val, _ = _contrast_pair(yf, e, cf_obs, ia, ib)
    if a_obs_val == -np.inf:
        raise EngineError("cannot profile a degenerate test (an observed arm is empty)")

    sampler = conditional_assignment_sampler(mech, hyp, pop, design, focals, a_obs)
    a_null = np.empty(replicates)
    b_null = np.empty(replicates)
    for r in range(replicates):
        cand = sampler(rng)
        codes_r, _ = exposure_codes(hyp.map, pop, cand)
        a_null[r], b_null[r] = _contrast_pair(yf, e, codes_r[focals], ia, ib)
    return GridProfile(a_null=a_null, b_null=b_null, a_obs=a_obs_val, exact=False)


def exact_profile(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                  event: ConditioningEvent, y, z_obs,
                  model: AdditiveEffectModel,
                  mech: MechanismSpec | None = None) -> GridProfile:
    """Grid profile over an explicit compatible assignment set."""
    if event.zset is None or len(event.zset) == 0:
        raise EngineError("exact profile requires a non-empty explicit assignment set")
    focals = np.asarray(event.focals, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes_obs, labels = exposure_codes(hyp.map, pop, a_obs)
    ia, ib = labels.index(hyp.a), labels.index(hyp.b)
    if model.shifted_exposure not in (hyp.a, hyp.b):
        raise ConfigError("the effect model's shifted exposure must be one of the contrast pair")
    shifted_code = ib if model.shifted_exposure == hyp.b else ia
    cf_obs = codes_obs[focals]
    yf = y[focals]
    e = (cf_obs == shifted_code).astype(float)
    a_obs_val, _ = _contrast_pair(yf, e, cf_obs, ia, ib)

    a_null = np.empty(len(event.zset))
    b_null = np.empty(len(event.zset))
    logw = np.empty(len(event.zset))
    for r, cand in enumerate(event.zset):
        codes_r, _ = exposure_codes(hyp.map, pop, cand)
        a_null[r], b_null[r] = _contrast_pair(yf, e, codes_r[focals], ia, ib)
        lw = log_mass(design, pop, cand)
        if mech is not None:
            lw += mechanism_log_weight(mech, pop, focals, cand)
        logw[r] = lw
    if np.all(np.isneginf(logw)):
        raise EngineError("no assignment in the set has positive conditional mass")
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return GridProfile(a_null=a_null, b_null=b_null, a_obs=a_obs_val, exact=True, weights=w)


# --- grid solvers -------------------------------------------------------------


def hodges_lehmann(test_closure, t_obs: float, grid) -> float:
    """Grid tau whose null expectation of the statistic is closest to t_obs.

    ``test_closure(tau)`` must return the expected statistic under the
    effect-equals-tau null. The difference must change sign somewhere on the
    grid, otherwise the estimate would sit on the boundary.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise ConfigError("the tau grid needs at least two points")
    d = np.array([test_closure(t) - t_obs for t in grid])
    if np.all(d > 0) or np.all(d < 0):
        raise EngineError(
            "expected statistic minus observed does not change sign on the grid; "
            "widen the tau grid"
        )
    return float(grid[int(np.argmin(np.abs(d)))])


@dataclass
class InversionResult:
    """Point estimate and test-inversion confidence interval on a tau grid."""

    tau_hat: float
    ci_low: float
    ci_high: float
    grid: np.ndarray
    alpha: float
    pvalues: np.ndarray = field(default=None, repr=False)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tau_hat": self.tau_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "alpha": self.alpha,
            "grid_lo": float(self.grid[0]),
            "grid_hi": float(self.grid[-1]),
            "grid_points": int(self.grid.size),
            "warnings": list(self.warnings),
        }


def invert_ci(pvalue_closure, grid, alpha: float, tau_hat: float | None = None) -> InversionResult:
    """Confidence set: grid taus whose two-sided p-value exceeds alpha.

    Reported as [min, max] of the retained taus. A non-contiguous retained
    set (possible in small samples) is recorded as a warning, not an error.
    An empty retained set degenerates to the point estimate.
    """
    grid = np.asarray(grid, dtype=float)
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be in (0, 1)")
    pvals = np.array([pvalue_closure(t) for t in grid])
    keep = pvals > alpha
    warnings = []
    if not keep.any():
        if tau_hat is None:
            raise EngineError("every grid tau is rejected and no point estimate was given")
        warnings.append("empty confidence set at this alpha; degenerate interval at tau_hat")
        lo = hi = float(tau_hat)
    else:
        kept = np.flatnonzero(keep)
        lo, hi = float(grid[kept[0]]), float(grid[kept[-1]])
        if np.any(~keep[kept[0]:kept[-1] + 1]):
            warnings.append("non-contiguous retained set; reporting its hull")
        if keep[0] or keep[-1]:
            warnings.append("confidence set touches the grid boundary; widen the grid")
    if tau_hat is None:
        tau_hat = 0.5 * (lo + hi)
    return InversionResult(tau_hat=float(tau_hat), ci_low=lo, ci_high=hi, grid=grid,
                           alpha=alpha, pvalues=pvals, warnings=warnings)


def default_tau_grid(t_obs: float, pooled_sd: float, points: int = 81,
                     half_width_sds: float = 4.0) -> np.ndarray:
    """Grid of candidate effects centered at the observed statistic.

    Spans t_obs plus or minus ``half_width_sds`` pooled within-arm standard
    deviations. A zero spread (constant outcomes) falls back to unit width.
    """
    s = float(pooled_sd) if pooled_sd > 0 else 1.0
    return np.linspace(t_obs - half_width_sds * s, t_obs + half_width_sds * s, points)


def pooled_arm_sd(y, focal_codes, ia, ib) -> float:
    """Within-arm pooled standard deviation of focal outcomes."""
    ya = y[focal_codes == ia]
    yb = y[focal_codes == ib]
    dev = np.concatenate([ya - ya.mean() if ya.size else ya,
                          yb - yb.mean() if yb.size else yb])
    ddof = (ya.size >= 1) + (yb.size >= 1)
    if dev.size <= ddof:
        return 0.0
    return float(np.sqrt((dev ** 2).sum() / (dev.size - ddof)))


def invert_from_profile(profile: GridProfile, grid, alpha: float,
                        refine: bool = True) -> InversionResult:
    """Full inversion on one profile: point estimate, then interval.

    The point estimate gets one refinement pass on a 10x finer grid around
    the coarse optimum (same reference draws); the interval is reported on
    the requested grid so its endpoints are grid points.
    """
    grid = np.asarray(grid, dtype=float)
    tau0 = hodges_lehmann(profile.expected_stat, profile.a_obs, grid)
    tau_hat = tau0
    if refine and grid.size >= 2:
        step = float(grid[1] - grid[0])
        fine = np.linspace(tau0 - 2 * step, tau0 + 2 * step, 41)
        try:
            tau_hat = hodges_lehmann(profile.expected_stat, profile.a_obs, fine)
        except EngineError:
            pass  # keep the coarse optimum if the fine window lost the sign change
    return invert_ci(profile.pvalue_two_sided, grid, alpha, tau_hat=tau_hat)


def _grid_for_profile(hyp, pop, z_obs, y, focals, grid):
    if grid is not None:
        return np.asarray(grid, dtype=float)
    focals = np.asarray(focals, dtype=np.intp)
    a_obs = z_obs if isinstance(z_obs, Assignment) else Assignment.from_z(pop, z_obs)
    codes, labels = exposure_codes(hyp.map, pop, a_obs)
    ia, ib = labels.index(hyp.a), labels.index(hyp.b)
    cf = codes[focals]
    keep = (cf == ia) | (cf == ib)
    yf = np.asarray(y, dtype=float)[focals][keep]
    cf = cf[keep]
    sd = pooled_arm_sd(yf, cf, ia, ib)
    na, nb = int((cf == ia).sum()), int((cf == ib).sum())
    if na == 0 or nb == 0:
        raise EngineError("cannot build a tau grid: an observed arm is empty")
    t_obs = float(yf[cf == ia].mean() - yf[cf == ib].mean())
    return default_tau_grid(t_obs, sd)


def permutation_inversion(hyp: ContrastHypothesis, pop: Population, z_obs, y, focals,
                          model: AdditiveEffectModel, alpha: float = 0.05, grid=None,
                          rng=None, replicates: int = 10_000, exact_cap: int = 10**6,
                          restrict_to_effective: bool = False,
                          refine: bool = True) -> InversionResult:
    """Point estimate and confidence interval from the permutation engine."""
    grid = _grid_for_profile(hyp, pop, z_obs, y, focals, grid)
    profile = permutation_profile(hyp, pop, z_obs, y, focals, model, rng=rng,
                                  replicates=replicates, exact_cap=exact_cap,
                                  restrict_to_effective=restrict_to_effective)
    return invert_from_profile(profile, grid, alpha, refine=refine)


def exact_inversion(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                    event: ConditioningEvent, y, z_obs, model: AdditiveEffectModel,
                    alpha: float = 0.05, grid=None, mech: MechanismSpec | None = None,
                    refine: bool = True) -> InversionResult:
    """Point estimate and confidence interval from the exact engine."""
    grid = _grid_for_profile(hyp, pop, z_obs, y, event.focals, grid)
    profile = exact_profile(hyp, pop, design, event, y, z_obs, model, mech=mech)
    return invert_from_profile(profile, grid, alpha, refine=refine)


def monte_carlo_inversion(hyp: ContrastHypothesis, pop: Population, design: DesignSpec,
                          mech: MechanismSpec, z_obs, y, focals,
                          model: AdditiveEffectModel, alpha: float = 0.05, grid=None,
                          rng=None, replicates: int = 10_000,
                          refine: bool = True) -> InversionResult:
    """Inversion from conditional assignment draws (network mechanism)."""
    grid = _grid_for_profile(hyp, pop, z_obs, y, focals, grid)
    profile = monte_carlo_profile(hyp, pop, design, mech, z_obs, y, focals, model,
                                  rng=rng, replicates=replicates)
    return invert_from_profile(profile, grid, alpha, refine=refine)
