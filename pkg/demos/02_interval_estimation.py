"""Point estimates and confidence intervals by inverting randomization tests.

Under a constant additive effect model, the hypothesis "the spillover effect
equals tau" becomes a plain zero null after subtracting tau from the units
observed at the spillover exposure. Scanning a grid of taus gives a point
estimate (the tau whose null expectation matches the observed statistic) and
a confidence interval (the taus that are not rejected).
"""

import numpy as np

from crtest import (
    AdditiveEffectModel,
    DesignSpec,
    MechanismSpec,
    draw_focals,
    permutation_inversion,
    sample,
    spawn_rng,
    spillover_hypothesis,
)
from crtest.power import equal_household_population, two_stage_potential_outcomes

SEED = 12
TRUE_EFFECT = -1.0

pop = equal_household_population(250, 2)
design = DesignSpec(kind="two_stage", k1=125)
potential = two_stage_potential_outcomes(
    pop, tau_spillover=TRUE_EFFECT, tau_primary=-1.5, mu=8.0, sigma=1.5,
    rng=spawn_rng(SEED, 0),
)
z_obs = sample(design, pop, spawn_rng(SEED, 1))
y_obs = potential.realize(pop, z_obs)

hyp = spillover_hypothesis()
model = AdditiveEffectModel(target="spillover")
conditional = MechanismSpec(kind="spillover_conditional")
unconditional = MechanismSpec(kind="per_household_unconditional")

print(f"true spillover effect: {TRUE_EFFECT}")
print(f"{'draw':>4} {'estimate':>9} {'95% interval':>18} {'width':>6}   focal choice")
for draw in range(4):
    rng = spawn_rng(SEED, 2, draw)
    focals = draw_focals(conditional, hyp, pop, z_obs, rng)
    res = permutation_inversion(hyp, pop, z_obs, y_obs, focals, model,
                                alpha=0.05, rng=rng, replicates=4000)
    print(f"{draw:>4} {res.tau_hat:>9.3f} [{res.ci_low:>7.3f}, {res.ci_high:>6.3f}] "
          f"{res.ci_high - res.ci_low:>6.3f}   conditional")

    rng_u = spawn_rng(SEED, 3, draw)
    focals_u = draw_focals(unconditional, hyp, pop, z_obs, rng_u)
    res_u = permutation_inversion(hyp, pop, z_obs, y_obs, focals_u, model,
                                  alpha=0.05, rng=rng_u, replicates=4000,
                                  restrict_to_effective=True)
    print(f"{'':>4} {res_u.tau_hat:>9.3f} [{res_u.ci_low:>7.3f}, {res_u.ci_high:>6.3f}] "
          f"{res_u.ci_high - res_u.ci_low:>6.3f}   unconditional")

print("\nboth recover the true effect; the conditional focal choice gives "
      "systematically narrower intervals because no focal is wasted.")
