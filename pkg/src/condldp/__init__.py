"""Conditional large-deviation rate functions, tilting and Monte Carlo checks."""

__version__ = "0.1.0"

from .convex_core import (  # noqa: E402
    INF,
    ConjugatePair,
    DomainError,
    Grid,
    ScalarField,
    biconjugate_defect,
    conjugate,
    convexity_violations,
    gradient,
    infimum_over,
)
from .models import (  # noqa: E402
    JointModel,
    empirical_psi,
    make_bernoulli_cramer,
    make_gaussian_cramer,
    make_gaussian_pair,
    make_model,
    sample_batch,
)
from .conditional import (  # noqa: E402
    ConditionalRate,
    ConditioningSet,
    SolverError,
    TiltSolution,
    build_conditioning_set,
    check_infimum_consistency,
    conditional_free_energy,
    conditional_marginal_rate,
    conditional_rate,
    inf_rate_on_set,
    solve_tilt,
    verify_duality,
)
from .empirics import (  # noqa: E402
    EventSet,
    LdpEstimate,
    SweepResult,
    canonical_expectation,
    convergence_sweep,
    estimate_conditional_logprob,
    sandwich_check,
)
