"""Numerical laboratory for jump-diffusion terminal-value problems whose terminal
data may be +inf on a closed set: a truncate-and-pass-to-the-monotone-limit
regression solver, a monotone IMEX finite-difference solver for the associated
nonlocal equation, and the verification harness tying both back to comparison
oracles, bounds and blow-up rates.
"""

__version__ = "0.1.0"

from .model import (AprioriBound, AuditReport, ForwardModel, Generator,
                    IntervalUnion, LevyMeasureSpec, ProbePlan, ProblemSpec,
                    TerminalData, apriori_bound, audit_assumptions,
                    check_rho_condition, eval_generator, truncate_generator,
                    truncate_terminal)
from .forward import (CompoundPoissonApprox, MomentCheck, PathBundle, TimeGrid,
                      build_jump_sampler, graded_time_grid, levy_quadrature,
                      load_bundle, moment_check, save_bundle, simulate_paths)
from .bsde import (LimitSolution, McConfig, RegressionBasis, TruncatedSolution,
                   backward_sweep, condexp_regress, monotone_limit,
                   zu_weighted_norm)
from .ipde import (IpdeSolution, NonlocalStencil, SpaceGrid,
                   build_nonlocal_stencil, imex_step, solve_singular_ipde,
                   solve_truncated_ipde)
from .verify import (BlowupFit, CheckResult, ModulusEstimate, TolPolicy,
                     VerificationReport, blowup_rate_fit, cross_validate,
                     modulus_estimate, ode_oracle, solution_invariant_suite)

__all__ = [name for name in dir() if not name.startswith("_")]
