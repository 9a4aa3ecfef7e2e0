"""Factor-diffusion market lab: simulate, solve, and verify that optimal
portfolio strategies are spanned by a small set of fund directions."""

__version__ = "0.1.0"

from .funds import (FundSet, SpanDecomposition, compute_Q, decompose,
                    fund_directions, mu_of, q_columns)
from .hjb import (Grid, PolicyGrid, StabilityError, Utility, ValueGrid,
                  auto_grid, convergence_study, derivative_stencils,
                  extract_fund_policy, minimum_stable_steps, solve_bellman,
                  unrestricted_argmax_check)
from .market import (DOMAIN_POSITIVE, DOMAIN_REALS, AffineField,
                     CoefficientSet, ConstantField, EllipticityWitness,
                     MarketSpec, OUDriftField, PathBundle, TanhField,
                     build_A, build_B, check_ellipticity, eval_coefficients,
                     simulate_paths, validate_spec)
from .policyeval import (ConstantControl, EvalResult, FundRuleStrategy,
                         GridPolicyStrategy, McParams, MertonOracle,
                         PerturbedStrategy, ZeroStrategy,
                         epsilon_optimality_report, evaluate, merton_oracle)
from .quadopt import (BallProblem, BallSolution, brute_force_ball, solve_G0,
                      solve_ball)
from .scenario import (PRESETS, ScenarioBundle, ScenarioError, load_scenario,
                       parse_scenario, preset_bundle)

__all__ = [name for name in dir() if not name.startswith("_")]
