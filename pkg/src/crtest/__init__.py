"""Conditional randomization tests for causal effects under interference.

Builds hypothesis tests, interval estimates and power analyses around
conditioning events: a set of focal units whose outcomes enter the test
statistic, and the set of treatment assignments kept in the reference
distribution. Choosing focals conditionally on the realized assignment keeps
every focal informative and turns the tests into simple permutation tests in
two-stage designs.
"""

__version__ = "0.1.0"

from .conditioning import (
    ConditioningEvent,
    ContrastHypothesis,
    MechanismSpec,
    compatible_set,
    draw_focals,
    effective_focal_distribution,
    effective_focals,
    focal_restriction_set,
    mechanism_log_weight,
    primary_hypothesis,
    sample_network_conditional,
    spillover_hypothesis,
)
from .design import Assignment, DesignSpec, enumerate_assignments, log_mass, sample, support_size
from .engine import (
    ImputabilityResult,
    PotentialOutcomes,
    TestReport,
    check_imputable,
    diff_in_means,
    pvalue_exact,
    pvalue_monte_carlo,
    pvalue_permutation,
    pvalue_permutation_spillover,
)
from .errors import CapExceededError, ConfigError, CrtestError, DataError, EngineError
from .estimate import (
    AdditiveEffectModel,
    GridProfile,
    InversionResult,
    ResidualizeResult,
    default_tau_grid,
    exact_inversion,
    hodges_lehmann,
    invert_ci,
    monte_carlo_inversion,
    permutation_inversion,
    residualize,
    shift_under_null,
)
from .exposure import ExposureMapSpec, ExposureRule, alphabet, exposure_codes, exposures
from .population import (
    ColumnSchema,
    OutcomeData,
    Population,
    load_assignment,
    load_edges,
    load_population,
    save_population,
    second_order_relation,
    with_adjacency,
)
from .power import (
    AnalyticPowerParams,
    MechanismPower,
    PowerComparison,
    PowerScenario,
    analytic_power,
    equal_household_population,
    power_comparison_rule,
    power_curve,
    simulate_power,
    two_stage_potential_outcomes,
)
from .rng import spawn_rng
