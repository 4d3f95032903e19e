"""Metric slopes, KL desingularizers and descent diagnostics for MM methods.

The subpackages build on each other in this order:

- :mod:`metricslope.metric`: vectors, balls, objectives, Dykstra projection
- :mod:`metricslope.slope`: slope estimation, desingularizers, KL fits, rate regimes
- :mod:`metricslope.diagnostics`: traces and the per-step descent checks
- :mod:`metricslope.mm`: majorization-minimization problems, envelopes, approximators
- :mod:`metricslope.solvers`: proximal point, prox-linear and moving balls
- :mod:`metricslope.harness`: config-driven experiments and reports
"""

from .errors import (ConfigError, ContractViolationError, ConvergenceError, DomainError,
                     InfeasibleModelError, InsufficientDataError, InvalidArgumentError,
                     MetricSlopeError, PreconditionError, UnsupportedOperationError)
from .metric import (Ball, Objective, as_vector, distance, dykstra_project, interpolate,
                     project_ball)
from .slope import (KLFit, PowerForm, RateKind, RateRegime, SlopeSample, Tabulated,
                    check_moderate_growth, classify_rate, desingularizer_eval,
                    fit_kl_exponent, kl_certificate_check, limiting_slope_estimate,
                    slope_estimate, slope_exact_smooth)
from .diagnostics import (ConditionReport, DescentParams, Trace, check_basic_descent,
                          check_key_inequality, check_slope_descent, criticality_report,
                          error_bound_radii, gap_ratios, rate_fit, trace_from_csv,
                          trace_slope_samples, trace_to_csv, value_convergence_report)
from .mm import (BallIntersection, MMProblem, WholeSpace, approximator_gamma_fit,
                 check_envelope_descent, check_majorization, check_quadratic_growth,
                 check_sum_scalar_closure, envelope, fixed_point_slope_check,
                 fixed_radius_ball, mapping_approximator_check, mm_step, run_mm)
from .solvers import (CompositeProblem, NLPProblem, ProxParams, SmoothFunction,
                      moving_balls_model, moving_balls_problem, moving_balls_step,
                      pg_solve, power_objective, prox_catalog, prox_linear_mu_floor,
                      prox_linear_problem, prox_linear_step, prox_point_problem,
                      prox_point_step)

__version__ = "0.1.0"
