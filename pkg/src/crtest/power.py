"""Power analysis: paired mechanism comparisons and an analytic approximation.

The simulator generates exposure-consistent potential outcomes (a common
baseline draw, plus constant shifts for the spillover and treated exposures),
assigns treatment with the two-stage design, runs the competing focal-choice
mechanisms on the same data and assignment, and records rejection rates. The
analytic approximation treats the test as a completely randomized comparison
of two arms and maps (units, balance, effect, noise) to an approximate normal
power; by construction it returns exactly alpha at zero effect.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .conditioning import (
    ContrastHypothesis,
    MechanismSpec,
    draw_focals,
    primary_hypothesis,
    spillover_hypothesis,
)
from .design import DesignSpec, sample
from .engine import PotentialOutcomes, pvalue_permutation
from .errors import ConfigError
from .exposure import ExposureMapSpec
from .population import Population
from .rng import as_rng, spawn_rng


@dataclass(frozen=True)
class PowerScenario:
    """A two-stage simulation setting with constant additive effects."""

    n_households: int
    n_treated_households: int
    household_size: int
    tau_spillover: float = 0.0
    tau_primary: float = 0.0
    sigma: float = 1.0
    mu: float = 0.0
    alpha: float = 0.05
    replications: int = 1000

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0 <= self.n_treated_households <= self.n_households:
            raise ConfigError("need 0 <= treated households <= households")
        if self.household_size < 2:
            raise ConfigError("household size must be >= 2 for within-household spillovers")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")

    @property
    def design(self) -> DesignSpec:
        return DesignSpec(kind="two_stage", k1=self.n_treated_households)


def equal_household_population(n_households: int, household_size: int) -> Population:
    """Synthetic population of equally sized households."""
    household_of = np.repeat(np.arange(n_households), household_size)
    return Population(
        unit_ids=tuple(f"u{i}" for i in range(n_households * household_size)),
        household_ids=tuple(f"h{j}" for j in range(n_households)),
        household_of=household_of,
    )


def two_stage_potential_outcomes(pop: Population, tau_spillover: float,
                                 tau_primary: float, mu: float, sigma: float,
                                 rng) -> PotentialOutcomes:
    """Potential-outcome table: baseline noise plus constant exposure shifts.

    Outcomes depend on the assignment only through the two-stage exposure, so
    imputability checks apply to data generated this way.
    """
    rng = as_rng(rng)
    base = mu + sigma * rng.standard_normal(pop.n_units)
    return PotentialOutcomes(
        map=ExposureMapSpec(kind="two_stage"),
        table={
            (0, 0): base,
            (0, 1): base + tau_spillover,
            (1, 1): base + tau_primary,
        },
    )


# --- analytic approximation ---------------------------------------------------


@dataclass(frozen=True)
class AnalyticPowerParams:
    """Completely randomized two-arm test: size, balance, effect, noise, level."""

    n_units: int
    treated_fraction: float
    tau: float
    sigma: float
    alpha: float = 0.05

    def validate(self) -> None:
        if not 0 < self.treated_fraction < 1:
            raise ConfigError("treated fraction must be in (0, 1)")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if self.n_units < 1:
            raise ConfigError("need at least one unit")

    @property
    def signal_fraction(self) -> float:
        """tau^2 / (sigma^2 / (p(1-p)) + tau^2), in [0, 1); zero iff tau is zero."""
        if self.tau == 0.0:
            return 0.0
        p = self.treated_fraction
        return self.tau**2 / (self.sigma**2 / (p * (1 - p)) + self.tau**2)


def analytic_power(params: AnalyticPowerParams) -> float:
    """Approximate one-sided power of the randomization test at level alpha."""
    params.validate()
    c = params.signal_fraction
    if c == 0.0:
        return float(params.alpha)
    shift = np.sqrt(params.n_units * c)
    return float(1.0 - stats.norm.cdf((stats.norm.ppf(1.0 - params.alpha) - shift)
                                      / np.sqrt(1.0 - c)))


def power_comparison_rule(n1: int, p1: float, n2: int, p2: float) -> str:
    """Asymptotic ordering of two completely randomized tests.

    With equal unit counts the arm split closer to one half wins; with equal
    splits the larger test wins. Returns "first", "second" or "tie".
    """
    if n1 == n2 and p1 == p2:
        return "tie"
    if n1 == n2:
        d1, d2 = abs(p1 - 0.5), abs(p2 - 0.5)
        if d1 == d2:
            return "tie"
        return "second" if d1 > d2 else "first"
    if p1 == p2:
        return "second" if n1 < n2 else "first"
    raise ConfigError("the ordering rule applies with equal unit counts or equal splits")


# --- simulation ----------------------------------------------------------------


@dataclass
class MechanismPower:
    mechanism: str
    replications: int
    rejections: int
    effective_focal_counts: np.ndarray

    @property
    def power(self) -> float:
        return self.rejections / self.replications

    @property
    def se(self) -> float:
        p = self.power
        return float(np.sqrt(p * (1 - p) / self.replications))


@dataclass
class PowerComparison:
    scenario: PowerScenario
    target: str
    per_mechanism: tuple

    def to_rows(self) -> list:
        tau = (self.scenario.tau_spillover if self.target == "spillover"
               else self.scenario.tau_primary)
        return [
            {
                "target": self.target,
                "mechanism": m.mechanism,
                "tau": tau,
                "household_size": self.scenario.household_size,
                "n_households": self.scenario.n_households,
                "n_treated_households": self.scenario.n_treated_households,
                "alpha": self.scenario.alpha,
                "replications": m.replications,
                "power": m.power,
                "se": m.se,
                "effective_focals_mean": float(m.effective_focal_counts.mean()),
            }
            for m in self.per_mechanism
        ]


def _hypothesis_for(target: str) -> ContrastHypothesis:
    if target == "spillover":
        return spillover_hypothesis()
    if target == "primary":
        return primary_hypothesis()
    raise ConfigError(f"unknown test target {target!r}")


def simulate_power(scenario: PowerScenario, mech_a: MechanismSpec, mech_b: MechanismSpec,
                   target: str, seed: int, engine_replicates: int = 999,
                   exact_cap: int = 10**4) -> PowerComparison:
    """Paired rejection rates of two mechanisms on identical simulated data.

    Every replication draws fresh potential outcomes and one two-stage
    assignment, shared by both mechanisms; only the focal choice and the
    reference randomization differ. The replication r streams are keyed by
    (seed, r), so results are independent of execution order.

    The tests are one-sided, so the contrast is oriented toward the simulated
    alternative (an analyst picks the tail that matches the effect direction
    they are testing for); at zero effect the orientation is immaterial.
    """
    scenario.validate()
    hyp = _hypothesis_for(target)
    true_tau = scenario.tau_spillover if target == "spillover" else scenario.tau_primary
    if true_tau > 0:
        hyp = ContrastHypothesis(a=hyp.b, b=hyp.a, map=hyp.map)
    pop = equal_household_population(scenario.n_households, scenario.household_size)
    design = scenario.design
    for mech in (mech_a, mech_b):
        mech.validate(hyp, design)

    mechs = (mech_a, mech_b)
    rejections = [0, 0]
    eff_counts = np.zeros((2, scenario.replications), dtype=np.int64)
    for r in range(scenario.replications):
        potential = two_stage_potential_outcomes(
            pop, scenario.tau_spillover, scenario.tau_primary,
            scenario.mu, scenario.sigma, spawn_rng(seed, r, 0),
        )
        z = sample(design, pop, spawn_rng(seed, r, 1))
        y = potential.realize(pop, z)
        for m, mech in enumerate(mechs):
            rng = spawn_rng(seed, r, 2 + m)
            focals = draw_focals(mech, hyp, pop, z, rng)
            unconditional = mech.kind in ("per_household_unconditional", "focal_restriction")
            report = pvalue_permutation(
                hyp, pop, z, y, focals, rng=rng, replicates=engine_replicates,
                exact_cap=exact_cap, restrict_to_effective=unconditional,
            )
            eff_counts[m, r] = report.n_effective
            rejections[m] += report.pvalue <= scenario.alpha
    return PowerComparison(
        scenario=scenario,
        target=target,
        per_mechanism=tuple(
            MechanismPower(
                mechanism=mech.kind,
                replications=scenario.replications,
                rejections=rejections[m],
                effective_focal_counts=eff_counts[m],
            )
            for m, mech in enumerate(mechs)
        ),
    )


def power_curve(scenario: PowerScenario, target: str, taus, mech_a: MechanismSpec,
                mech_b: MechanismSpec, seed: int, engine_replicates: int = 999,
                exact_cap: int = 10**4) -> list:
    """Long-format power rows over an effect grid (for the CLI's CSV output)."""
    rows = []
    for t_idx, tau in enumerate(taus):
        scen = replace(
            scenario,
            tau_spillover=float(tau) if target == "spillover" else scenario.tau_spillover,
            tau_primary=float(tau) if target == "primary" else scenario.tau_primary,
        )
        comparison = simulate_power(scen, mech_a, mech_b, target,
                                    seed=int(spawn_rng(seed, t_idx).integers(2**31)),
                                    engine_replicates=engine_replicates,
                                    exact_cap=exact_cap)
        rows.extend(comparison.to_rows())
    return rows


def default_tau_steps(sigma: float, points: int = 9) -> np.ndarray:
    """Effect grid from 0 to 2 sigma inclusive."""
    return np.linspace(0.0, 2.0 * sigma, points)
