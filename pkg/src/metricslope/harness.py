"""Config-driven experiments: registries, runs, diagnostic checks and reports.

A config names a problem, a solver and a list of checks::

    {"problem_id": "power_p4", "solver_id": "prox_point",
     "solver_params": {"alpha": 1.0}, "x0": [1.0],
     "stop": {"step_tol": 0.0, "max_iter": 10000},
     "checks": ["kl_fit", {"id": "rate_fit", "params": {"window": [100, 10000]}}],
     "seed": 0, "output_dir": "out/power_p4"}

Every check produces one :class:`ReportRow`; a row passes iff its worst
margin is at least ``-tolerance``. Checks that cannot be evaluated (too
little data, precondition failures) fail with ``worst_margin = None``.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import jsonschema
import numpy as np

from . import diagnostics as dg
from .errors import ConfigError, InvalidArgumentError, MetricSlopeError
from .metric import Objective, as_vector
from .mm import (MMProblem, box_pair_sampler, check_envelope_descent,
                 check_majorization, fixed_point_slope_check, run_mm)
from .slope import (DEFAULT_GAP_WINDOW, PowerForm, classify_rate, fit_kl_exponent)
from .solvers import (CompositeProblem, NLPProblem, Polynomial, SmoothFunction,
                      TOL_FEAS, check_feasibility, moving_balls_problem,
                      power_objective, prox_linear_problem, prox_point_problem)

OUTPUT_DIR_ENV = "METRICSLOPE_OUTPUT_DIR"
DEFAULT_STOP = {"step_tol": 1e-12, "max_iter": 1000}
DEFAULT_SUBPROBLEM_TOL = 1e-12
# segment samples per step when the iterates alone leave the KL window sparse
KL_SEGMENT_SAMPLES = 24
# fitted exponents this close to 0 or 1/2 are classified on the boundary
REGIME_SNAP = 1e-6

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# --------------------------------------------------------------------------
# problems

@dataclass(frozen=True)
class ProblemEntry:
    problem_id: str
    kind: str  # "objective" | "composite" | "nlp"
    build: Callable[[], object] = field(compare=False)
    x0: Tuple[float, ...]
    solvers: Tuple[str, ...]
    description: str = ""
    minimizer: Optional[Tuple[float, ...]] = None
    defaults: dict = field(default_factory=dict, compare=False)


def _power_entry(p: float) -> ProblemEntry:
    return ProblemEntry(f"power_p{p:g}", "objective", lambda: power_objective(p),
                        (1.0,), ("prox_point",), f"f(x) = |x|^{p:g} on R",
                        (0.0,))


def _composite_sharp() -> CompositeProblem:
    return CompositeProblem("abs", lambda x: np.array([x[0] ** 2 - 1.0]),
                            lambda x: np.array([[2.0 * x[0]]]),
                            second_deriv_bound=2.0, mu=20.0, dim=1,
                            known_inf=0.0, minimizer=as_vector([1.0]),
                            name="composite_sharp")


def _disk(center) -> SmoothFunction:
    c = np.asarray(center, dtype=float)
    return SmoothFunction(lambda y: float((y - c) @ (y - c)) - 1.0,
                          lambda y: 2.0 * (y - c), 2.0)


def _linear(g) -> SmoothFunction:
    g = as_vector(g)
    return SmoothFunction(lambda y: float(g @ y), lambda y: g, 1.0)


def _unit_disk_linear() -> NLPProblem:
    return NLPProblem(_linear([1.0, 0.0]), (_disk([0.0, 0.0]),), 2,
                      known_inf=-1.0, minimizer=as_vector([-1.0, 0.0]),
                      name="unit_disk_linear")


def _two_ball_linear() -> NLPProblem:
    s = math.sqrt(0.5)
    return NLPProblem(_linear([1.0, 1.0]), (_disk([0.0, 0.0]), _disk([1.0, 0.0])), 2,
                      known_inf=1.0 - math.sqrt(2.0),
                      minimizer=as_vector([1.0 - s, -s]), name="two_ball_linear")


_BUILTINS = [
    _power_entry(1.0), _power_entry(1.5), _power_entry(2.0), _power_entry(4.0),
    ProblemEntry("composite_sharp", "composite", _composite_sharp, (2.0,),
                 ("prox_linear",), "f(x) = |x^2 - 1| as q(G(x)), q = abs", (1.0,),
                 {"mu": 20.0}),
    ProblemEntry("unit_disk_linear", "nlp", _unit_disk_linear, (0.5, 0.0),
                 ("moving_balls",), "min y1 over the unit disk", (-1.0, 0.0)),
    ProblemEntry("two_ball_linear", "nlp", _two_ball_linear, (0.5, 0.0),
                 ("moving_balls",), "min y1 + y2 over two overlapping unit disks",
                 (1.0 - math.sqrt(0.5), -math.sqrt(0.5))),
]

PROBLEMS: Dict[str, ProblemEntry] = {e.problem_id: e for e in _BUILTINS}


def register_problem(entry: ProblemEntry, replace: bool = False) -> None:
    """Add a problem to the global registry."""
    if entry.problem_id in PROBLEMS and not replace:
        raise InvalidArgumentError(f"problem {entry.problem_id!r} already registered")
    for s in entry.solvers:
        if s not in SOLVERS:
            raise InvalidArgumentError(f"unknown solver {s!r}")
    PROBLEMS[entry.problem_id] = entry


def _poly_map(rows, dim):
    polys = [Polynomial.from_terms(r, dim) for r in rows]
    return (lambda x: np.array([q(x) for q in polys]),
            lambda x: np.vstack([q.gradient(x) for q in polys]))


def _smooth_from_dict(d, dim):
    poly = Polynomial.from_terms(d["terms"], dim)
    return SmoothFunction(poly, poly.gradient, float(d["L"]))


def problem_from_dict(pid: str, d: dict) -> ProblemEntry:
    """Custom problem from a config ``problems`` entry (polynomial data)."""
    try:
        kind = d["kind"]
        mini = tuple(d["minimizer"]) if "minimizer" in d else None
        if kind == "power":
            p = float(d["p"])
            return ProblemEntry(pid, "objective", lambda: power_objective(p),
                                tuple(d.get("x0", [1.0])), ("prox_point",),
                                f"f(x) = |x|^{p:g}", mini or (0.0,))
        dim = int(d["dim"])
        if kind == "composite":
            G, J = _poly_map(d["G"], dim)
            M, codim = float(d["M"]), len(d["G"])
            outer, ki = d["outer"], d.get("known_inf")
            mu = float(d.get("mu", 0.0)) or None

            def build():
                return CompositeProblem(outer, G, J, M, mu or 1.0, dim, codim, ki,
                                        None if mini is None else as_vector(mini), pid)
            build()  # validate eagerly
            return ProblemEntry(pid, "composite", build, tuple(d["x0"]),
                                ("prox_linear",), "custom composite", mini,
                                {"mu": mu} if mu else {})
        if kind == "nlp":
            f = _smooth_from_dict(d["f"], dim)
            cons = tuple(_smooth_from_dict(c, dim) for c in d.get("constraints", []))
            ki = d.get("known_inf")
            return ProblemEntry(
                pid, "nlp",
                lambda: NLPProblem(f, cons, dim, ki,
                                   None if mini is None else as_vector(mini), pid),
                tuple(d["x0"]), ("moving_balls",), "custom nlp", mini)
    except (KeyError, TypeError, ValueError, MetricSlopeError) as exc:
        raise ConfigError(f"problem {pid!r}: {exc}") from exc
    raise ConfigError(f"problem {pid!r}: unknown kind {d.get('kind')!r}")


# --------------------------------------------------------------------------
# solvers

def _pp(problem, params, entry):
    return prox_point_problem(problem, float(params.get("alpha", 1.0)))


def _pl(problem, params, entry):
    mu = params.get("mu", entry.defaults.get("mu"))
    if mu is None:
        raise ConfigError("prox_linear needs solver_params.mu")
    return prox_linear_problem(problem.with_mu(float(mu)))


def _mb(problem, params, entry):
    return moving_balls_problem(problem)


SOLVERS: Dict[str, Tuple[Callable, Tuple[str, ...]]] = {
    "prox_point": (_pp, ("alpha",)),
    "prox_linear": (_pl, ("mu",)),
    "moving_balls": (_mb, ()),
}


# --------------------------------------------------------------------------
# checks

@dataclass
class CheckContext:
    trace: dg.Trace
    entry: ProblemEntry
    problem: object
    mm: MMProblem
    solver_id: str
    solver_params: dict
    seed: int
    subproblem_tol: float

    @property
    def objective(self) -> Objective:
        return self.mm.objective

    def prox_alpha(self) -> Optional[float]:
        if self.solver_id == "prox_point":
            return float(self.solver_params.get("alpha", 1.0))
        return None


class CheckSkipped(MetricSlopeError):
    """A check that cannot be evaluated on this run."""


def _param(ctx, params, name, default_fn=None):
    if name in params:
        return float(params[name])
    if default_fn is not None:
        v = default_fn(ctx)
        if v is not None:
            return float(v)
    raise CheckSkipped(f"parameter {name!r} is required for solver {ctx.solver_id}")


def _alpha(ctx):
    return ctx.prox_alpha()


def _beta(ctx):
    a = ctx.prox_alpha()
    return None if a is None else 1.0 / (2.0 * a)


def _delta(ctx):
    a = ctx.prox_alpha()
    return None if a is None else 1.0 / (4.0 * a)


def _kl_samples(ctx, params):
    per = params.get("per_segment", "auto")
    window = tuple(params.get("gap_window", DEFAULT_GAP_WINDOW))
    if ctx.objective.known_inf is None:
        raise CheckSkipped("objective has no known infimum")
    if per == "auto":
        try:
            s = dg.trace_slope_samples(ctx.trace, ctx.objective)
            return fit_kl_exponent(s, window), 0
        except MetricSlopeError:
            per = KL_SEGMENT_SAMPLES
    s = dg.trace_slope_samples(ctx.trace, ctx.objective, per_segment=int(per))
    return fit_kl_exponent(s, window), int(per)


def _desingularizer(ctx, params):
    if "theta" in params and "kappa" in params:
        return PowerForm(float(params["kappa"]), float(params["theta"])), "given"
    fit, _ = _kl_samples(ctx, params)
    return fit.desingularizer, "fitted"


def _from_report(r: dg.ConditionReport, extra=None):
    details = {"steps_checked": r.steps_checked,
               "violating_steps": r.violating_steps[:20],
               "violations": len(r.violating_steps)}
    if r.notes:
        details["notes"] = r.notes
    details.update(extra or {})
    return r.worst_margin, r.tol, details


def chk_basic_descent(ctx, params):
    r = dg.check_basic_descent(ctx.trace, _param(ctx, params, "delta", _delta))
    return _from_report(r)


def chk_slope_descent(ctx, params):
    r = dg.check_slope_descent(ctx.trace, _param(ctx, params, "alpha", _alpha),
                               _param(ctx, params, "beta", _beta))
    return _from_report(r)


def chk_key_inequality(ctx, params):
    d, src = _desingularizer(ctx, params)
    r = dg.check_key_inequality(ctx.trace, d, _param(ctx, params, "delta", _delta))
    return _from_report(r, {"desingularizer": src, "theta": d.theta, "kappa": d.kappa})


def chk_kl_fit(ctx, params):
    fit, per = _kl_samples(ctx, params)
    reg = classify_rate(fit.theta_hat, REGIME_SNAP)
    details = {"theta_hat": fit.theta_hat, "kappa_hat": fit.kappa_hat,
               "samples": fit.sample_count, "per_segment": per,
               "max_violation": fit.max_violation, "regime": reg.kind.value}
    if "expect_theta" in params:
        tol_t = float(params.get("theta_tol", 0.05))
        details["expect_theta"] = float(params["expect_theta"])
        return tol_t - abs(fit.theta_hat - float(params["expect_theta"])), 0.0, details
    return -fit.max_violation, dg.BASE_TOL, details


def chk_rate_fit(ctx, params):
    t = ctx.trace
    details = {}
    kind = params.get("expect_kind")
    if kind == "finite":
        steps = len(t) - 1
        details.update(steps=steps, final_gap=float(t.gaps[-1]))
        margin = 0.0 if t.gaps[-1] == 0 else -float(t.gaps[-1])
        if "expect_steps" in params:
            details["expect_steps"] = int(params["expect_steps"])
            margin = min(margin, -abs(steps - int(params["expect_steps"])))
        return margin, 0.0, details
    if kind == "superlinear":
        r = dg.gap_ratios(t)
        if r.size < 3:
            raise CheckSkipped("fewer than 3 positive-gap ratios")
        tol_r = float(params.get("ratio_tol", 1e-3))
        rise = float(np.max(np.diff(r)))
        details.update(ratios=[float(v) for v in r], last_ratio=float(r[-1]))
        return min(tol_r - float(r[-1]), -max(rise, 0.0)), 0.0, details
    window = tuple(params["window"]) if "window" in params else None
    fit = dg.rate_fit(t, window)
    details.update(loglog_slope=fit.loglog_slope, ratio_limit=fit.ratio_limit,
                   window=list(fit.window))
    margins = []
    if "expect_slope" in params:
        margins.append(float(params.get("slope_tol", 0.2))
                       - abs(fit.loglog_slope - float(params["expect_slope"])))
    if "expect_ratio" in params:
        if fit.ratio_limit is None:
            margins.append(-math.inf)
        else:
            margins.append(float(params.get("ratio_tol", 1e-6))
                           - abs(fit.ratio_limit - float(params["expect_ratio"])))
    return (min(margins) if margins else 0.0), 0.0, details


def chk_value_convergence(ctx, params):
    r = dg.value_convergence_report(ctx.trace)
    ratio = float(params.get("ratio", 0.1))
    inc = float(np.max(np.diff(ctx.trace.values))) if len(ctx.trace) > 1 else 0.0
    margin = ratio * r.k_tau_sup_head - r.k_tau_sup_tail
    if not r.monotone:
        margin = min(margin, -inc)
    return margin, 0.0, {"monotone": r.monotone, "k_tau_sup_head": r.k_tau_sup_head,
                         "k_tau_sup_tail": r.k_tau_sup_tail, "ratio": ratio}


def chk_error_bound(ctx, params):
    if ctx.entry.minimizer is None:
        raise CheckSkipped("problem has no known minimizer")
    d, src = _desingularizer(ctx, params)
    s = dg.error_bound_radii(ctx.trace, d, _param(ctx, params, "alpha", _alpha),
                             _param(ctx, params, "beta", _beta), ctx.entry.minimizer,
                             form=params.get("form", "sqrt"),
                             coefficient=params.get("coefficient", "beta_over_alpha"))
    slack = s.lambdas - s.errors
    return float(slack.min()), dg.BASE_TOL, {
        "form": s.form, "coefficient": params.get("coefficient", "beta_over_alpha"),
        "desingularizer": src, "theta": d.theta, "kappa": d.kappa,
        "dominated": s.dominated, "worst_step": int(np.argmin(slack)) + 1}


def chk_criticality(ctx, params):
    thr = float(params.get("threshold", 1e-4))
    r = dg.criticality_report(ctx.trace)
    return thr - r.final_slope, 0.0, {"final_slope": r.final_slope, "threshold": thr,
                                      "slope_source": ctx.trace.meta.get("slope_source")}


def chk_envelope_descent(ctx, params):
    tol = 1e-8 + ctx.subproblem_tol
    beta = float(params["beta"]) if "beta" in params else None
    r = check_envelope_descent(ctx.trace, ctx.mm.mu, beta, problem=ctx.mm, tol=tol)
    return _from_report(r, {"beta_hat": r.beta_hat, "beta_gamma_bound": r.beta_gamma_bound,
                            "mu": ctx.mm.mu})


def chk_feasibility(ctx, params):
    if not isinstance(ctx.problem, NLPProblem):
        raise CheckSkipped("feasibility applies to constrained problems")
    r = check_feasibility(ctx.trace, ctx.problem, float(params.get("tol_feas", TOL_FEAS)))
    return _from_report(r, {"max_violation": float(-np.min(r.margins))})


def chk_majorization(ctx, params):
    n = int(params.get("samples", 1000))
    dim = ctx.trace.iterates.shape[1]
    lo = params.get("lo", [-2.0] * dim)
    hi = params.get("hi", [2.0] * dim)
    pairs = box_pair_sampler(ctx.mm, lo, hi, n, seed=ctx.seed)
    r = check_majorization(ctx.mm, pairs, float(params.get("tol", 1e-9)))
    return _from_report(r, {"samples": n, "seed": ctx.seed})


def chk_fixed_point(ctx, params):
    which = params.get("which", "auto")
    if which == "auto":
        which = "envelope" if ctx.entry.kind == "nlp" else "objective"
    thr = float(params.get("threshold", 1e-4))
    step_tol = float(params.get("step_tol", 1e-6))
    x = ctx.trace.iterates[-1]
    s = fixed_point_slope_check(ctx.mm, x, step_tol, which, ctx.subproblem_tol)
    return thr - s, 0.0, {"slope": s, "which": which, "threshold": thr,
                          "step_tol": step_tol}


CHECKS: Dict[str, Callable] = {
    "basic_descent": chk_basic_descent,
    "slope_descent": chk_slope_descent,
    "key_inequality": chk_key_inequality,
    "kl_fit": chk_kl_fit,
    "rate_fit": chk_rate_fit,
    "value_convergence": chk_value_convergence,
    "error_bound": chk_error_bound,
    "criticality": chk_criticality,
    "envelope_descent": chk_envelope_descent,
    "feasibility": chk_feasibility,
    "majorization": chk_majorization,
    "fixed_point": chk_fixed_point,
}


def registry_list() -> dict:
    """Sorted catalogs of problem, solver and check ids."""
    return {"problems": sorted(PROBLEMS), "solvers": sorted(SOLVERS),
            "checks": sorted(CHECKS)}


# --------------------------------------------------------------------------
# config

_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["problem_id", "solver_id"],
    "additionalProperties": False,
    "properties": {
        "problem_id": {"type": "string"},
        "solver_id": {"type": "string"},
        "solver_params": {"type": "object"},
        "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "stop": {"type": "object", "additionalProperties": False,
                 "properties": {"step_tol": {"type": "number", "minimum": 0},
                                "max_iter": {"type": "integer", "minimum": 1}}},
        "checks": {"type": "array", "items": {"oneOf": [
            {"type": "string"},
            {"type": "object", "required": ["id"], "additionalProperties": False,
             "properties": {"id": {"type": "string"}, "params": {"type": "object"}}}]}},
        "seed": {"type": "integer", "minimum": 0},
        "subproblem_tol": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string"},
        "problems": {"type": "object", "additionalProperties": {"type": "object"}},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["problem_id", "solver_id", "passed", "rows"],
    "additionalProperties": False,
    "properties": {
        "problem_id": {"type": "string"},
        "solver_id": {"type": "string"},
        "passed": {"type": "boolean"},
        "rows": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False,
            "required": ["check_id", "status", "worst_margin", "tolerance", "details"],
            "properties": {
                "check_id": {"type": "string"},
                "status": {"enum": ["pass", "fail"]},
                "worst_margin": {"type": ["number", "null"]},
                "tolerance": {"type": "number"},
                "details": {"type": "object"}}}},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem_id: str
    solver_id: str
    solver_params: dict = field(default_factory=dict)
    x0: Optional[Tuple[float, ...]] = None
    stop: dict = field(default_factory=lambda: dict(DEFAULT_STOP))
    checks: Tuple[Tuple[str, dict], ...] = ()
    output_dir: Optional[str] = None
    seed: int = 0
    subproblem_tol: float = DEFAULT_SUBPROBLEM_TOL
    problems: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        """Validate a config mapping against the schema and the registries."""
        try:
            jsonschema.validate(d, _CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {path}: {exc.message}") from None
        d = copy.deepcopy(d)
        checks = []
        for c in d.get("checks", []):
            cid, prm = (c, {}) if isinstance(c, str) else (c["id"], c.get("params", {}))
            checks.append((cid, prm))
        stop = dict(DEFAULT_STOP)
        stop.update(d.get("stop", {}))
        cfg = cls(d["problem_id"], d["solver_id"], d.get("solver_params", {}),
                  tuple(d["x0"]) if "x0" in d else None, stop, tuple(checks),
                  d.get("output_dir"), d.get("seed", 0),
                  d.get("subproblem_tol", DEFAULT_SUBPROBLEM_TOL), d.get("problems", {}))
        cfg.validate()
        return cfg

    def registry(self) -> Dict[str, ProblemEntry]:
        reg = dict(PROBLEMS)
        for pid, spec in self.problems.items():
            reg[pid] = problem_from_dict(pid, spec)
        return reg

    def entry(self) -> ProblemEntry:
        reg = self.registry()
        if self.problem_id not in reg:
            raise ConfigError(f"unknown problem {self.problem_id!r}; known: {sorted(reg)}")
        return reg[self.problem_id]

    def validate(self) -> None:
        entry = self.entry()
        if self.solver_id not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver_id!r}; known: {sorted(SOLVERS)}")
        if self.solver_id not in entry.solvers:
            raise ConfigError(f"solver {self.solver_id!r} does not apply to "
                              f"{self.problem_id!r} (use {list(entry.solvers)})")
        allowed = SOLVERS[self.solver_id][1]
        extra = sorted(set(self.solver_params) - set(allowed))
        if extra:
            raise ConfigError(f"unknown solver_params {extra} for {self.solver_id!r}")
        for cid, _ in self.checks:
            if cid not in CHECKS:
                raise ConfigError(f"unknown check {cid!r}; known: {sorted(CHECKS)}")
        x0 = self.x0 if self.x0 is not None else entry.x0
        problem = entry.build()
        if len(x0) != problem.dim:
            raise ConfigError(f"x0 has dimension {len(x0)}, problem needs {problem.dim}")

    def resolved_output_dir(self) -> Path:
        env = os.environ.get(OUTPUT_DIR_ENV)
        if env:
            return Path(env)
        return Path(self.output_dir or os.path.join("out", self.problem_id))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# running and reporting

@dataclass(frozen=True)
class ReportRow:
    check_id: str
    status: str
    worst_margin: Optional[float]
    tolerance: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {"check_id": self.check_id, "status": self.status,
                "worst_margin": self.worst_margin, "tolerance": self.tolerance,
                "details": _clean(self.details)}


def _clean(v):
    """JSON-safe copy: numpy scalars to floats, non-finite floats to strings."""
    if isinstance(v, dict):
        return {str(k): _clean(v[k]) for k in sorted(v)}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def make_row(check_id: str, margin: Optional[float], tol: float, details: dict) -> ReportRow:
    if margin is not None and not math.isfinite(margin):
        details = dict(details, worst_margin=repr(float(margin)))
        margin = None
    ok = margin is not None and margin >= -tol
    # + 0.0 folds -0.0 into 0.0 so text reports do not flip sign
    return ReportRow(check_id, "pass" if ok else "fail",
                     None if margin is None else float(margin) + 0.0, float(tol), details)


def run_checks(ctx: CheckContext, checks) -> List[ReportRow]:
    rows = []
    for cid, params in checks:
        try:
            margin, tol, details = CHECKS[cid](ctx, params)
        except MetricSlopeError as exc:
            rows.append(make_row(cid, None, 0.0,
                                 {"error": type(exc).__name__, "message": str(exc)}))
            continue
        rows.append(make_row(cid, margin, tol, details))
    return rows


def _context(cfg: ExperimentConfig, trace: dg.Trace) -> CheckContext:
    entry = cfg.entry()
    problem = entry.build()
    mm = SOLVERS[cfg.solver_id][0](problem, cfg.solver_params, entry)
    return CheckContext(trace, entry, problem, mm, cfg.solver_id, dict(cfg.solver_params),
                        cfg.seed, cfg.subproblem_tol)


def build_problem(cfg: ExperimentConfig) -> MMProblem:
    entry = cfg.entry()
    return SOLVERS[cfg.solver_id][0](entry.build(), cfg.solver_params, entry)


def run_trace(cfg: ExperimentConfig) -> dg.Trace:
    mm = build_problem(cfg)
    x0 = cfg.x0 if cfg.x0 is not None else cfg.entry().x0
    return run_mm(mm, x0, step_tol=float(cfg.stop["step_tol"]),
                  max_iter=int(cfg.stop["max_iter"]), tol=cfg.subproblem_tol)


def emit_report(rows: List[ReportRow], format: str = "text",
                header: Optional[dict] = None) -> str:
    """Serialize rows: ``text`` is one "check_id status worst_margin" line per row."""
    if not rows:
        raise InvalidArgumentError("no report rows to emit")
    if format == "text":
        lines = []
        for r in rows:
            m = "nan" if r.worst_margin is None else f"{r.worst_margin:.6e}"
            lines.append(f"{r.check_id} {r.status} {m}")
        return "\n".join(lines) + "\n"
    if format == "json":
        header = header or {}
        doc = {"problem_id": header.get("problem_id", ""),
               "solver_id": header.get("solver_id", ""),
               "passed": all(r.passed for r in rows),
               "rows": [r.to_dict() for r in rows]}
        jsonschema.validate(doc, REPORT_SCHEMA)
        return json.dumps(doc, indent=2) + "\n"
    raise InvalidArgumentError(f"unknown report format {format!r}")


def parse_report(text: str) -> List[ReportRow]:
    """Inverse of ``emit_report(rows, "json")``."""
    doc = json.loads(text)
    jsonschema.validate(doc, REPORT_SCHEMA)
    return [ReportRow(r["check_id"], r["status"], r["worst_margin"], r["tolerance"],
                      r["details"]) for r in doc["rows"]]


def exit_code(rows: List[ReportRow]) -> int:
    return EXIT_PASS if all(r.passed for r in rows) else EXIT_FAIL


def run_experiment(cfg: ExperimentConfig, write: bool = True
                   ) -> Tuple[dg.Trace, List[ReportRow]]:
    """Run the solver, execute every requested check and write the outputs.

    Writes ``trace.csv``, ``report.json`` and ``report.txt`` into the output
    directory (``$METRICSLOPE_OUTPUT_DIR`` wins over the config).
    """
    cfg.validate()
    trace = run_trace(cfg)
    rows = run_checks(_context(cfg, trace), cfg.checks)
    if write:
        out = cfg.resolved_output_dir()
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(dg.trace_to_csv(trace), encoding="utf-8")
        if rows:
            hdr = {"problem_id": cfg.problem_id, "solver_id": cfg.solver_id}
            (out / "report.json").write_text(emit_report(rows, "json", hdr), encoding="utf-8")
            (out / "report.txt").write_text(emit_report(rows, "text"), encoding="utf-8")
    return trace, rows


def check_trace(trace: dg.Trace, cfg: ExperimentConfig) -> List[ReportRow]:
    """Run the config's checks against a stored trace."""
    cfg.validate()
    trace = dg.Trace(trace.iterates, trace.values, trace.gaps, trace.step_dists,
                     trace.slopes, trace.envelope_values,
                     dict(trace.meta, subproblem_tol=cfg.subproblem_tol))
    return run_checks(_context(cfg, trace), cfg.checks)
