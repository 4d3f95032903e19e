"""Majorization-minimization: models, approximating regions, envelopes, runs.

An :class:`MMProblem` pairs an objective ``f`` with a model ``h(x, y)`` that
majorizes ``f`` on a convex region ``D(x)`` containing ``x`` and touches it
at ``y = x``. The envelope is ``F(x) = min_{D(x)} h(x, .)`` and the
iteration map sends ``x`` to that minimizer. How the subproblem is solved is
up to whoever builds the problem (see :mod:`metricslope.solvers`); this
module only relies on the tolerance contract of ``subproblem(x, tol)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import ConditionReport, Trace, _report
from .errors import (ContractViolationError, InsufficientDataError,
                     InvalidArgumentError, MetricSlopeError, PreconditionError)
from .metric import Ball, Objective, as_vector, distance, dykstra_project
from .slope import descent_ratio_slope, direction_set, slope_estimate

ENVELOPE_RADII = (1e-3, 1e-4)
ENVELOPE_DIRECTIONS = 16


# --------------------------------------------------------------------------
# regions

class WholeSpace:
    kind = "whole_space"

    def contains(self, y, tol: float = 0.0) -> bool:
        return True

    def project(self, y, tol: float = 1e-10) -> np.ndarray:
        return as_vector(y)

    def distance(self, y, tol: float = 1e-10) -> float:
        return 0.0

    def sample(self, rng: np.random.Generator, lo, hi) -> np.ndarray:
        return as_vector(rng.uniform(lo, hi))

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __eq__(self, other):
        return isinstance(other, WholeSpace)


@dataclass(frozen=True)
class BallIntersection:
    balls: Tuple[Ball, ...]
    kind = "ball_intersection"

    def __post_init__(self):
        object.__setattr__(self, "balls", tuple(self.balls))

    def contains(self, y, tol: float = 0.0) -> bool:
        return all(b.contains(y, tol) for b in self.balls)

    def project(self, y, tol: float = 1e-10) -> np.ndarray:
        return dykstra_project(self.balls, y, tol)

    def distance(self, y, tol: float = 1e-10) -> float:
        y = as_vector(y)
        if self.contains(y):
            return 0.0
        return distance(y, self.project(y, tol))

    def sample(self, rng: np.random.Generator, lo=None, hi=None,
               max_tries: int = 1000) -> np.ndarray:
        """Uniform point of the intersection, by rejection from its smallest ball."""
        if not self.balls:
            raise InvalidArgumentError("cannot sample an intersection of no balls")
        small = min(self.balls, key=lambda b: b.radius)
        n = small.dim
        for _ in range(max_tries):
            u = rng.standard_normal(n)
            u /= np.linalg.norm(u)
            y = small.center + small.radius * rng.uniform() ** (1.0 / n) * u
            if self.contains(y):
                return as_vector(y)
        raise ContractViolationError("rejection sampling found no point in the region")

    def describe(self) -> dict:
        return {"kind": self.kind,
                "balls": [{"center": [float(c) for c in b.center],
                           "radius": b.radius} for b in self.balls]}


def fixed_radius_ball(rho: float) -> Callable[[np.ndarray], BallIntersection]:
    """The mapping x -> B_rho(x)."""
    if rho <= 0:
        raise InvalidArgumentError("rho must be positive")

    def mapping(x):
        return BallIntersection((Ball(x, rho),))

    mapping.kind = "fixed_radius_ball"
    mapping.rho = rho
    return mapping


def whole_space(x=None) -> WholeSpace:
    return WholeSpace()


whole_space.kind = "whole_space"


# --------------------------------------------------------------------------
# problem and envelope

@dataclass(frozen=True)
class MMProblem:
    objective: Objective
    model: Callable[[np.ndarray, np.ndarray], float]
    mapping: Callable[[np.ndarray], object]
    mu: float
    subproblem: Callable[[np.ndarray, float], np.ndarray] = field(compare=False)
    gamma_h: Optional[float] = None
    gamma_D: Optional[float] = None
    kind: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidArgumentError("mu must be positive (set-valued maps unsupported)")

    def h(self, x, y) -> float:
        return float(self.model(as_vector(x), as_vector(y)))

    def describe(self) -> dict:
        return {"model": self.kind, "params": dict(self.params), "mu": self.mu,
                "mapping": getattr(self.mapping, "kind", "custom")}


@dataclass(frozen=True)
class EnvelopeValue:
    value: float
    argmin: np.ndarray
    subproblem_tol: float


def envelope(p: MMProblem, x, tol: float = 1e-12) -> EnvelopeValue:
    """Envelope value F(x) and the iteration-map point p(x)."""
    x = as_vector(x)
    y = as_vector(p.subproblem(x, tol))
    region = p.mapping(x)
    if region.distance(y) > max(math.sqrt(tol), 1e-9):
        raise ContractViolationError("subproblem solution lies outside D(x)")
    return EnvelopeValue(p.h(x, y), y, tol)


def mm_step(p: MMProblem, x, tol: float = 1e-12) -> np.ndarray:
    return envelope(p, x, tol).argmin


def run_mm(p: MMProblem, x0, step_tol: float = 1e-12, max_iter: int = 1000,
           tol: float = 1e-12, slopes="auto") -> Trace:
    """Iterate x <- p(x) until a step shorter than ``step_tol`` or the budget.

    The trace holds x_0..x_K where the step computed from x_K was the first
    one shorter than ``step_tol`` (not appended). Running out of budget is
    recorded in ``meta["stop_reason"]`` rather than raised.
    """
    x = as_vector(x0)
    if not math.isfinite(p.objective(x)):
        raise PreconditionError("x0 lies outside the feasible region")
    iterates, env = [x], []
    reason, next_step, last = "max_iter", None, None
    for _ in range(max_iter):
        e = envelope(p, x, tol)
        env.append(e.value)
        step = distance(x, e.argmin)
        if step < step_tol:
            reason, next_step, last = "step_tol", step, e.argmin
            break
        x = e.argmin
        iterates.append(x)
    if len(env) < len(iterates):
        e = envelope(p, x, tol)
        env.append(e.value)
        next_step, last = distance(x, e.argmin), e.argmin
    meta = {"subproblem_tol": tol, "mu": p.mu, "stop_reason": reason,
            "converged": reason == "step_tol", "next_step": next_step,
            "next_point": last, "problem": p.describe()}
    return Trace.from_iterates(p.objective, iterates, slopes=slopes,
                               envelope_values=env, meta=meta)


def envelope_slope_estimate(p: MMProblem, x, fx: Optional[float] = None,
                            radii: Sequence[float] = ENVELOPE_RADII,
                            directions: Optional[int] = None,
                            tol: float = 1e-12) -> float:
    """Slope of the envelope at ``x`` from descent ratios (one solve per sample)."""
    x = as_vector(x)
    if directions is None:
        directions = 2 if x.shape[0] == 1 else ENVELOPE_DIRECTIONS

    def F(y):
        if not math.isfinite(p.objective(y)):
            return math.inf
        try:
            return envelope(p, y, tol).value
        except MetricSlopeError:
            return math.inf

    return descent_ratio_slope(F, x, radii, direction_set(x.shape[0], directions), fx)


# --------------------------------------------------------------------------
# diagnostics

@dataclass
class EnvelopeDescentReport(ConditionReport):
    beta_hat: Optional[float] = None
    beta_gamma_bound: Optional[float] = None
    envelope_slopes: Optional[np.ndarray] = field(default=None, repr=False)


def check_envelope_descent(t: Trace, mu: float, beta: Optional[float] = None,
                           problem: Optional[MMProblem] = None,
                           envelope_slopes: Optional[Sequence[float]] = None,
                           radii: Sequence[float] = ENVELOPE_RADII,
                           tol: Optional[float] = None) -> EnvelopeDescentReport:
    """Check F(x_-) - F(x) >= mu/2 d(x, x_+)^2 and |grad F|(x) <= beta d(x, x_+).

    Envelope slopes come from ``envelope_slopes`` or are estimated through
    ``problem``; without either only the first inequality is checked. When
    ``beta`` is omitted the smallest feasible value is fitted and reported.
    """
    if t.envelope_values is None:
        raise InvalidArgumentError("trace has no envelope values")
    if len(t) < 3:
        raise InsufficientDataError("need at least 3 iterates")
    tol = t.tol if tol is None else tol
    F = t.envelope_values
    steps = list(t.step_dists)
    if t.meta.get("next_step") is not None:
        steps.append(float(t.meta["next_step"]))
    ks = list(range(1, min(len(t), len(steps))))
    # distance from x_k to x_{k+1} is steps[k]
    m1 = np.array([F[k - 1] - F[k] - 0.5 * mu * steps[k] ** 2 for k in ks])

    sl = None
    if envelope_slopes is not None:
        sl = np.asarray(envelope_slopes, dtype=float)
    elif problem is not None:
        sl = np.array([envelope_slope_estimate(problem, t.iterates[k], F[k], radii,
                                               tol=t.meta.get("subproblem_tol", 1e-12))
                       for k in range(len(t))])
    notes = ""
    beta_hat = None
    if sl is None:
        margins = m1
        notes = "near-critical inequality not checked (no envelope slopes)"
    else:
        ratios = []
        for k in ks:
            if sl[k] == 0:
                ratios.append(0.0)
            elif steps[k] == 0:
                ratios.append(math.inf)
            else:
                ratios.append(sl[k] / steps[k])
        beta_hat = max(ratios) if ratios else 0.0
        b = beta_hat if beta is None else beta
        m2 = np.array([b * steps[k] - sl[k] if math.isfinite(b) else -math.inf
                       for k in ks])
        margins = np.column_stack([m1, m2])
    base = _report("envelope_descent", ks, margins, tol, notes)
    gb = None
    if problem is not None and problem.gamma_h is not None and problem.gamma_D is not None:
        g = max(problem.gamma_h, problem.gamma_D)
        gb = 2.0 * g * (g + 1.0)
    return EnvelopeDescentReport(base.condition_id, base.worst_margin,
                                 base.violating_steps, base.steps_checked,
                                 base.tol, base.margins, base.notes,
                                 beta_hat=beta_hat, beta_gamma_bound=gb,
                                 envelope_slopes=sl)


def box_pair_sampler(p: MMProblem, lo, hi, n: int, seed: int = 0,
                     max_tries: int = 100):
    """Yield ``n`` pairs (x, y) with x feasible in the box and y in D(x)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    made = 0
    tries = 0
    while made < n:
        tries += 1
        if tries > max_tries * n:
            raise ContractViolationError("could not sample enough feasible pairs")
        x = as_vector(rng.uniform(lo, hi))
        if not math.isfinite(p.objective(x)):
            continue
        try:
            region = p.mapping(x)
        except PreconditionError:
            continue
        y = region.sample(rng, lo, hi)
        made += 1
        yield x, y


def check_majorization(p: MMProblem, pairs: Iterable, tol: float = 1e-9) -> ConditionReport:
    """Sampled majorization, touching and midpoint strong convexity of the model.

    Three margins per pair: h(x,y) - f(y); tol - |h(x,x) - f(x)|; and
    (h(x,x) + h(x,y))/2 - mu/8 d(x,y)^2 - h(x, midpoint).
    """
    ms, idx = [], []
    for i, (x, y) in enumerate(pairs):
        x, y = as_vector(x), as_vector(y)
        hxy, hxx = p.h(x, y), p.h(x, x)
        mid = as_vector(0.5 * (x + y))
        d2 = float(np.sum((x - y) ** 2))
        ms.append([hxy - p.objective(y),
                   tol - abs(hxx - p.objective(x)),
                   0.5 * (hxx + hxy) - p.mu / 8.0 * d2 - p.h(x, mid)])
        idx.append(i)
    return _report("majorization", idx, np.array(ms).reshape(-1, 3), tol)


def check_quadratic_growth(p: MMProblem, x, samples: int = 100, seed: int = 0,
                           tol: float = 1e-12, lo=None, hi=None) -> ConditionReport:
    """h_x(y) - h_x(p(x)) >= mu/2 d(y, p(x))^2 - tol for sampled y in D(x)."""
    rng = np.random.default_rng(seed)
    x = as_vector(x)
    e = envelope(p, x, tol)
    region = p.mapping(x)
    if lo is None:
        lo, hi = x - 1.0, x + 1.0
    ms = []
    for _ in range(samples):
        y = region.sample(rng, lo, hi)
        ms.append(p.h(x, y) - e.value - 0.5 * p.mu * distance(y, e.argmin) ** 2)
    return _report("quadratic_growth", list(range(samples)), ms, tol)


def fixed_point_slope_check(p: MMProblem, x, tol: float = 1e-8,
                            which: str = "objective",
                            subproblem_tol: float = 1e-12) -> float:
    """Slope at a fixed point of the iteration map (objective or envelope)."""
    x = as_vector(x)
    step = distance(x, mm_step(p, x, subproblem_tol))
    if step > tol:
        raise PreconditionError(f"not a fixed point: step {step:.3e} > {tol:.3e}")
    if which == "objective":
        return slope_estimate(p.objective, x)
    if which == "envelope":
        return envelope_slope_estimate(p, x, tol=subproblem_tol)
    raise InvalidArgumentError(f"unknown slope target {which!r}")


# --------------------------------------------------------------------------
# approximators

@dataclass(frozen=True)
class ApproximatorFit:
    gamma_hat: float
    worst_triple: Tuple[np.ndarray, np.ndarray, np.ndarray]
    triples_checked: int


def _fit_from_ratios(ratios, triples):
    if not ratios:
        raise InvalidArgumentError("degenerate sampling: every triple had x == z")
    i = int(np.argmax(ratios))
    return ApproximatorFit(float(ratios[i]), triples[i], len(ratios))


def _triple_ratio(h, x, y, z):
    dxz = float(np.linalg.norm(x - z))
    den = dxz * (np.linalg.norm(x - y) + np.linalg.norm(z - y))
    if dxz == 0 or den == 0:
        return None
    return abs(float(h(x, y)) - float(h(z, y))) / den


def _refine_triple(h, t, r, lo, hi, rng, rounds):
    # seeded random local ascent; the sampled sup of a ratio that peaks on
    # thin sets converges very slowly without it
    t = np.array(t)
    step = 0.1 * float(np.max(hi - lo))
    stall = 0
    for _ in range(rounds):
        cand = np.clip(t + step * rng.standard_normal(t.shape), lo, hi)
        rc = _triple_ratio(h, *cand)
        if rc is not None and rc > r:
            t, r, stall = cand, rc, 0
        else:
            stall += 1
            if stall >= 20:
                step, stall = 0.5 * step, 0
                if step < 1e-9:
                    break
    return t, r


def approximator_gamma_fit(h: Callable, region: Tuple, triples: int = 10_000,
                           seed: int = 0, refine: int = 4,
                           refine_rounds: int = 400) -> ApproximatorFit:
    """Largest |h(x,y) - h(z,y)| / (d(x,z) (d(x,y) + d(z,y))) found in a box.

    ``region`` is a bounding box ``(lo, hi)``; triples are drawn uniformly
    from it with a seeded generator, so equal seeds give equal fits. The
    ``refine`` best sampled triples are then improved by a seeded local
    ascent of ``refine_rounds`` perturbations each (``refine=0`` disables
    it). Every reported ratio is attained by an actual triple in the box,
    so the fit is always a lower bound on the true constant.
    """
    if triples < 1:
        raise InvalidArgumentError("triples must be positive")
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in region)
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(triples, lo.size))
    Y = rng.uniform(lo, hi, size=(triples, lo.size))
    Z = rng.uniform(lo, hi, size=(triples, lo.size))
    ratios, kept = [], []
    for x, y, z in zip(X, Y, Z):
        r = _triple_ratio(h, x, y, z)
        if r is None:
            continue
        ratios.append(r)
        kept.append((x, y, z))
    if ratios and refine > 0:
        for i in np.argsort(ratios)[::-1][:refine]:
            t, r = _refine_triple(h, np.stack(kept[i]), ratios[i], lo, hi, rng,
                                  refine_rounds)
            ratios[i], kept[i] = r, (t[0], t[1], t[2])
    kept = [tuple(as_vector(v) for v in t) for t in kept]
    return _fit_from_ratios(ratios, kept)


def check_sum_scalar_closure(fits: Sequence[ApproximatorFit], weights: Sequence[float],
                             combined_fit: ApproximatorFit) -> bool:
    """Combined constant is at most sum |w_i| gamma_i (fits on shared triples)."""
    if len(fits) != len(weights):
        raise InvalidArgumentError("one weight per fit")
    bound = sum(abs(w) * f.gamma_hat for f, w in zip(fits, weights))
    return combined_fit.gamma_hat <= bound + 1e-9


def mapping_approximator_check(mapping: Callable, region: Tuple, triples: int = 10_000,
                               seed: int = 0, max_tries: int = 100) -> ApproximatorFit:
    """Approximator constant of (x, y) -> dist_{D(x)}(y) with y drawn from D(z).

    Base points x, z are drawn from the box ``region``; points where the
    mapping is undefined (infeasible x) are skipped.
    """
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in region)
    rng = np.random.default_rng(seed)

    def draw():
        for _ in range(max_tries):
            x = as_vector(rng.uniform(lo, hi))
            try:
                D = mapping(x)
            except PreconditionError:
                continue
            if D.distance(x) > 1e-9:
                raise ContractViolationError("D(x) does not contain x")
            return x, D
        raise ContractViolationError("mapping undefined on the sampled box")

    ratios, kept = [], []
    for _ in range(triples):
        x, Dx = draw()
        z, Dz = draw()
        y = Dz.sample(rng, lo, hi)
        dxz = distance(x, z)
        den = dxz * (distance(x, y) + distance(z, y))
        if dxz == 0 or den == 0:
            continue
        ratios.append(Dx.distance(y) / den)
        kept.append((x, y, z))
    return _fit_from_ratios(ratios, kept)
