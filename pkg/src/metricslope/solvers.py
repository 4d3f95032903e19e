"""Concrete MM schemes: proximal point, prox-linear and moving balls.

All subproblems are small and strongly convex. They are solved either in
closed form (prox of power functions, the outer-function catalog) or by
:func:`pg_solve`, a plain projected/proximal gradient method with step
``1/L`` and a certified stopping rule. No acceleration is used, which keeps
the inner values monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .diagnostics import ConditionReport, Trace, _report
from .errors import (ConvergenceError, InfeasibleModelError, InvalidArgumentError,
                     PreconditionError, UnsupportedOperationError)
from .metric import Ball, Objective, as_vector, distance
from .mm import BallIntersection, MMProblem, WholeSpace, whole_space

TOL_FEAS = 1e-8


# --------------------------------------------------------------------------
# inner solver

@dataclass(frozen=True)
class ConvexModel:
    """``s + r`` with ``s`` smooth (gradient ``grad``, modulus ``lipschitz``).

    ``prox(v, t)`` is the prox of the nonsmooth part ``r`` (identity when
    omitted) and ``mu`` the strong-convexity modulus of the whole model.
    ``certificate(y)``, when given, must upper-bound the value gap at ``y``
    and replaces the default subgradient-based bound.
    """

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    mu: float = 0.0
    prox: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    certificate: Optional[Callable[[np.ndarray], float]] = None

    def __post_init__(self):
        if not self.lipschitz > 0:
            raise InvalidArgumentError("smoothness modulus must be positive")
        if self.mu < 0:
            raise InvalidArgumentError("mu must be nonnegative")
        if self.mu == 0 and self.certificate is None:
            raise InvalidArgumentError("need mu > 0 or an explicit gap certificate")


@dataclass(frozen=True)
class PGResult:
    x: np.ndarray
    value: float
    gap: float
    nit: int
    values: Tuple[float, ...] = field(repr=False, default=())


def pg_solve(model: ConvexModel, region=None, y0=None, tol: float = 1e-12,
             max_iter: int = 100_000, proj_tol: float = 1e-12) -> PGResult:
    """Minimize ``model`` over ``region`` to a value gap of at most ``tol``.

    Without an explicit certificate the gap bound at y+ is ``|v|^2 / (2 mu)``
    where ``v = L (y - y+) - grad s(y) + grad s(y+)`` is a subgradient of the
    model (plus region indicator) at y+. Since the model is mu-strongly
    convex, the returned point lies within ``sqrt(2 tol / mu)`` of the exact
    minimizer.
    """
    if region is None:
        region = WholeSpace()
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    L = model.lipschitz
    y = region.project(as_vector(y0), proj_tol)
    g = np.asarray(model.grad(y), dtype=float)
    values = [float(model.value(y))]
    best, best_gap = y, math.inf
    for it in range(1, max_iter + 1):
        z = y - g / L
        if model.prox is not None:
            z = model.prox(as_vector(z), 1.0 / L)
        y_new = region.project(as_vector(z), proj_tol)
        g_new = np.asarray(model.grad(y_new), dtype=float)
        if model.certificate is not None:
            gap = float(model.certificate(y_new))
        else:
            v = L * (y - y_new) - g + g_new
            gap = float(v @ v) / (2.0 * model.mu)
        values.append(float(model.value(y_new)))
        if gap < best_gap:
            best, best_gap = y_new, gap
        if gap <= tol:
            return PGResult(y_new, values[-1], max(gap, 0.0), it, tuple(values))
        y, g = y_new, g_new
    raise ConvergenceError(
        f"pg_solve: gap {best_gap:.3e} > tol {tol:.3e} after {max_iter} iterations",
        best=best, residual=best_gap)


# --------------------------------------------------------------------------
# proximal point

@dataclass(frozen=True)
class ProxParams:
    """Regularization ``alpha`` of ``f + alpha |. - x|^2`` (model modulus 2 alpha)."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError("alpha must be positive")


def _power_prox(p: float):
    def prox(x, alpha):
        x = as_vector(x)
        out = np.empty_like(x)
        for i, xi in enumerate(x):
            s = abs(float(xi))
            if s == 0.0:
                u = 0.0
            elif p == 1.0:
                u = max(s - 0.5 / alpha, 0.0)
            elif p == 2.0:
                u = alpha * s / (1.0 + alpha)
            else:
                # stationarity of u^p + alpha (u - s)^2 on (0, s)
                def phi(u):
                    return p * u ** (p - 1.0) + 2.0 * alpha * (u - s)
                if phi(s) <= 0.0:
                    u = s
                elif p > 2.0:
                    # phi is convex and increasing: Newton from the right
                    # decreases monotonically onto the root
                    u = s
                    for _ in range(200):
                        step = phi(u) / (p * (p - 1.0) * u ** (p - 2.0) + 2.0 * alpha)
                        if not step > 0.0:
                            break
                        u_new = u - step
                        if u_new >= u or u_new <= 0.0:
                            break
                        u = u_new
                else:
                    # the root is ~ s^{1/(p-1)} for tiny s, so allow enough
                    # bisections to cross every binade below s
                    u = brentq(phi, 0.0, s, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                               maxiter=4000)
            out[i] = math.copysign(u, xi)
        return as_vector(out)
    return prox


def power_objective(p: float, dim: int = 1) -> Objective:
    """f(x) = sum_i |x_i|^p with its exact proximal map (p >= 1)."""
    p = float(p)
    if p < 1.0:
        raise InvalidArgumentError("power objectives need p >= 1 (convex prox)")

    def value(x):
        return float((np.abs(x) ** p).sum())

    def gradient(x):
        # np.sign(0) = 0 gives the minimal-norm subgradient at the kink for p = 1
        return as_vector(p * np.abs(x) ** (p - 1.0) * np.sign(x)) if p > 1 \
            else as_vector(np.sign(x))

    label = f"power_p{p:g}"
    return Objective(dim=dim, value=value, gradient=gradient, known_inf=0.0,
                     lipschitz_grad=2.0 if p == 2.0 else None,
                     prox=_power_prox(p), name=label, minimizer=as_vector(np.zeros(dim)))


def prox_point_step(obj: Objective, x, params, tol: float = 1e-12) -> np.ndarray:
    """Minimizer of ``f + alpha d(x, .)^2`` (within ``tol`` in value).

    Uses the objective's exact prox when it has one. Otherwise a smooth
    objective whose gradient modulus is below ``2 alpha`` (so the subproblem
    is strongly convex) is handled by :func:`pg_solve`.
    """
    alpha = params.alpha if isinstance(params, ProxParams) else ProxParams(float(params)).alpha
    x = as_vector(x)
    if obj.prox is not None:
        return as_vector(obj.prox(x, alpha))
    L = obj.lipschitz_grad
    if obj.gradient is None or L is None or not L < 2.0 * alpha:
        raise UnsupportedOperationError(
            f"{obj.name}: no prox oracle and no strongly convex smooth subproblem")
    model = ConvexModel(
        value=lambda y: obj(y) + alpha * float(np.sum((y - x) ** 2)),
        grad=lambda y: np.asarray(obj.gradient(y)) + 2.0 * alpha * (y - x),
        lipschitz=L + 2.0 * alpha, mu=2.0 * alpha - L)
    return pg_solve(model, None, x, tol).x


def prox_point_problem(obj: Objective, alpha: float) -> MMProblem:
    prm = ProxParams(alpha)
    return MMProblem(
        objective=obj,
        model=lambda x, y: obj(y) + prm.alpha * float(np.sum((y - x) ** 2)),
        mapping=whole_space, mu=2.0 * prm.alpha,
        subproblem=lambda x, tol: prox_point_step(obj, x, prm, tol),
        gamma_h=prm.alpha, gamma_D=0.0, kind="prox_point",
        params={"alpha": prm.alpha})


# --------------------------------------------------------------------------
# outer-function catalog

def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _block_soft(v, t):
    nrm = float(np.linalg.norm(v))
    if nrm <= t:
        return np.zeros_like(v)
    return (1.0 - t / nrm) * v


def _project_simplex(w, radius=1.0):
    # sort-based projection onto {w >= 0, sum w = radius}
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - radius
    idx = np.arange(1, w.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(w - css[rho] / (rho + 1.0), 0.0)


def _prox_max(v, t):
    # Moreau: prox_{t max}(v) = v - t P_simplex(v / t)
    return v - t * _project_simplex(v / t)


@dataclass(frozen=True)
class OuterFunction:
    q_id: str
    value: Callable[[np.ndarray], float]
    prox: Callable[[np.ndarray, float], np.ndarray]
    lipschitz: Callable[[int], float]


OUTER_CATALOG = {
    "abs": OuterFunction("abs", lambda u: float(np.sum(np.abs(u))), _soft,
                         lambda m: math.sqrt(m)),
    "l1": OuterFunction("l1", lambda u: float(np.sum(np.abs(u))), _soft,
                        lambda m: math.sqrt(m)),
    "l2": OuterFunction("l2", lambda u: float(np.linalg.norm(u)), _block_soft,
                        lambda m: 1.0),
    "max": OuterFunction("max", lambda u: float(np.max(u)), _prox_max,
                         lambda m: 1.0),
}


def outer_function(q_id: str) -> OuterFunction:
    try:
        return OUTER_CATALOG[q_id]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown outer function {q_id!r}; known: {sorted(OUTER_CATALOG)}") from None


def prox_catalog(q_id: str, v, t: float) -> np.ndarray:
    """argmin_u q(u) + |u - v|^2 / (2t) for a catalog outer function."""
    q = outer_function(q_id)
    if not t > 0:
        raise InvalidArgumentError("t must be positive")
    return as_vector(q.prox(np.array(as_vector(v)), float(t)))


# --------------------------------------------------------------------------
# prox-linear

@dataclass(frozen=True)
class CompositeProblem:
    """f = q(G(x)) with q from the catalog and G smooth.

    ``second_deriv_bound`` (M) bounds the second derivative of G so that
    ``|G(y) - G(x) - DG(x)(y - x)| <= M |y - x|^2``. The majorization floor
    ``mu > 2 L_q M`` is enforced when a step is taken, so under-regularized
    problems can still be built and sampled.
    """

    outer: str
    inner_map: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    second_deriv_bound: float
    mu: float
    dim: int
    codim: int = 1
    known_inf: Optional[float] = None
    minimizer: Optional[np.ndarray] = field(default=None, compare=False)
    name: str = "composite"

    def __post_init__(self):
        outer_function(self.outer)
        if self.second_deriv_bound < 0:
            raise InvalidArgumentError("M must be nonnegative")
        if not self.mu > 0:
            raise InvalidArgumentError("mu must be positive")

    @property
    def L_q(self) -> float:
        return outer_function(self.outer).lipschitz(self.codim)

    def G(self, x) -> np.ndarray:
        return np.asarray(self.inner_map(as_vector(x)), dtype=float).reshape(-1)

    def DG(self, x) -> np.ndarray:
        return np.asarray(self.jacobian(as_vector(x)), dtype=float).reshape(
            self.codim, self.dim)

    def linearization(self, x, y) -> np.ndarray:
        x, y = as_vector(x), as_vector(y)
        return self.G(x) + self.DG(x) @ (y - x)

    def objective(self) -> Objective:
        q = outer_function(self.outer)
        return Objective(dim=self.dim, value=lambda x: q.value(self.G(x)),
                         known_inf=self.known_inf, name=self.name,
                         minimizer=self.minimizer)

    def with_mu(self, mu: float) -> "CompositeProblem":
        return CompositeProblem(self.outer, self.inner_map, self.jacobian,
                                self.second_deriv_bound, mu, self.dim, self.codim,
                                self.known_inf, self.minimizer, self.name)


def prox_linear_mu_floor(L_q: float, M: float) -> float:
    """2 L_q M; the proximal parameter must exceed it strictly."""
    if L_q < 0 or M < 0:
        raise InvalidArgumentError("L_q and M must be nonnegative")
    return 2.0 * L_q * M


def _unit_ball_projection(w):
    nrm = float(np.linalg.norm(w))
    return w if nrm <= 1.0 else w / nrm


# each catalog q is the support function of a set C; projecting onto C
# directly avoids the cancellation in w - prox_q(w, 1) for large |w|
_DUAL_SETS = {
    "abs": lambda w: np.clip(w, -1.0, 1.0),
    "l1": lambda w: np.clip(w, -1.0, 1.0),
    "l2": _unit_ball_projection,
    "max": _project_simplex,
}


def _dual_set_projection(q_id):
    outer_function(q_id)
    proj = _DUAL_SETS[q_id]
    return lambda w, t=1.0: as_vector(proj(np.array(w, dtype=float)))


def prox_linear_step(p: CompositeProblem, x, tol: float = 1e-12) -> np.ndarray:
    """argmin_y q(G(x) + DG(x)(y - x)) + mu/2 |y - x|^2.

    Solved through the dual ``max_{w in C} <w, b> - |A^T w|^2 / (2 mu)``
    with ``q`` the support function of ``C``; the primal point is
    ``x - A^T w / mu`` and the duality gap is the stopping certificate.
    """
    floor = prox_linear_mu_floor(p.L_q, p.second_deriv_bound)
    if not p.mu > floor:
        raise PreconditionError(f"mu={p.mu} must exceed 2 L_q M = {floor}")
    x = as_vector(x)
    b, A = p.G(x), p.DG(x)
    mu = p.mu
    q = outer_function(p.outer)
    LA = float(np.linalg.norm(A, 2)) ** 2 / mu
    if LA == 0.0:
        return x
    # any upper bound on the modulus is valid; flooring it keeps b / L finite
    # when DG(x) is nearly zero (the dual iterate then saturates onto C)
    LA = max(LA, 1e-200 * (1.0 + float(np.max(np.abs(b)))))

    def primal(w):
        d = -(A.T @ w) / mu
        return q.value(b + A @ d) + 0.5 * mu * float(d @ d)

    def neg_dual(w):
        r = A.T @ w
        return -float(w @ b) + float(r @ r) / (2.0 * mu)

    model = ConvexModel(value=neg_dual, grad=lambda w: -b + A @ (A.T @ w) / mu,
                        lipschitz=LA, prox=_dual_set_projection(p.outer),
                        certificate=lambda w: primal(w) + neg_dual(w))
    res = pg_solve(model, None, np.zeros(p.codim), tol)
    return as_vector(x - (A.T @ res.x) / mu)


def prox_linear_problem(p: CompositeProblem) -> MMProblem:
    q = outer_function(p.outer)

    def model(x, y):
        return q.value(p.linearization(x, y)) + 0.5 * p.mu * float(np.sum((y - x) ** 2))

    return MMProblem(
        objective=p.objective(), model=model, mapping=whole_space, mu=p.mu,
        subproblem=lambda x, tol: prox_linear_step(p, x, tol),
        gamma_h=p.L_q * p.second_deriv_bound + 0.5 * p.mu, gamma_D=0.0,
        kind="prox_linear",
        params={"outer": p.outer, "M": p.second_deriv_bound, "L_q": p.L_q})


def check_linearization_remainder(p: CompositeProblem, pairs, tol: float = 1e-9
                                  ) -> ConditionReport:
    """L_q M |x - y|^2 - |q(G(y)) - q(H(x, y))| >= -tol over sampled pairs."""
    q = outer_function(p.outer)
    ms, idx = [], []
    for i, (x, y) in enumerate(pairs):
        x, y = as_vector(x), as_vector(y)
        rem = abs(q.value(p.G(y)) - q.value(p.linearization(x, y)))
        ms.append(p.L_q * p.second_deriv_bound * distance(x, y) ** 2 - rem)
        idx.append(i)
    return _report("linearization_remainder", idx, ms, tol)


# --------------------------------------------------------------------------
# moving balls

@dataclass(frozen=True)
class SmoothFunction:
    """A C^1 function with an L-Lipschitz gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    L: float

    def __post_init__(self):
        if not self.L > 0:
            raise InvalidArgumentError("gradient moduli must be positive")


@dataclass(frozen=True)
class NLPProblem:
    """min f(x) subject to f_i(x) <= 0."""

    f: SmoothFunction
    constraints: Tuple[SmoothFunction, ...]
    dim: int
    known_inf: Optional[float] = None
    minimizer: Optional[np.ndarray] = field(default=None, compare=False)
    name: str = "nlp"

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def L(self) -> float:
        return self.f.L

    def max_violation(self, x) -> float:
        x = as_vector(x)
        if not self.constraints:
            return -math.inf
        return max(float(c.value(x)) for c in self.constraints)

    def feasible(self, x, tol: float = TOL_FEAS) -> bool:
        return self.max_violation(x) <= tol

    def objective(self, tol_feas: float = 1e-12) -> Objective:
        """f restricted to the feasible set (``+inf`` outside)."""
        def value(x):
            if self.max_violation(x) > tol_feas:
                return math.inf
            return float(self.f.value(x))
        return Objective(dim=self.dim, value=value, known_inf=self.known_inf,
                         name=self.name, minimizer=self.minimizer)


@dataclass(frozen=True)
class QuadraticModel:
    """f(x) + <g, y - x> + L/2 |y - x|^2."""

    x: np.ndarray
    fx: float
    g: np.ndarray
    L: float

    def __call__(self, y) -> float:
        d = as_vector(y) - self.x
        return self.fx + float(self.g @ d) + 0.5 * self.L * float(d @ d)


def moving_balls_model(p: NLPProblem, x, tol_feas: float = TOL_FEAS
                       ) -> Tuple[QuadraticModel, List[Ball]]:
    """Quadratic upper model of f at x and one ball per constraint.

    Ball i is the sublevel set {h_i(x, .) <= 0} of the quadratic upper
    model of f_i, i.e. centre ``x - grad f_i(x)/L_i`` and radius
    ``sqrt(|grad f_i(x)|^2 / L_i^2 - 2 f_i(x) / L_i)``.
    """
    x = as_vector(x)
    if not p.feasible(x, tol_feas):
        raise PreconditionError(
            f"x is infeasible (max f_i = {p.max_violation(x):.3e})")
    balls = []
    for c in p.constraints:
        gi = np.asarray(c.grad(x), dtype=float)
        fi = float(c.value(x))
        r2 = float(gi @ gi) / c.L ** 2 - 2.0 * fi / c.L
        balls.append(Ball(x - gi / c.L, math.sqrt(max(r2, 0.0))))
    model = QuadraticModel(x, float(p.f.value(x)),
                           as_vector(p.f.grad(x)), p.L)
    return model, balls


def _pull_into_balls(x, y, balls):
    """Largest s in [0, 1] with x + s (y - x) in every ball (x is in all of them)."""
    d = y - x
    a = float(d @ d)
    if a == 0.0:
        return y
    s = 1.0
    for b in balls:
        if np.linalg.norm(y - b.center) <= b.radius:
            continue
        e = x - b.center
        bb = float(e @ d)
        c0 = float(e @ e) - b.radius ** 2
        disc = max(bb * bb - a * c0, 0.0)
        s = min(s, max((-bb + math.sqrt(disc)) / a, 0.0))
    out = x + s * d
    # guard against the last ulp
    while s > 0 and any(np.linalg.norm(out - b.center) > b.radius for b in balls):
        s = np.nextafter(s, 0.0)
        out = x + s * d
    return as_vector(out)


class _DykstraGuard:
    """Region wrapper turning a Dykstra failure into an infeasible-model error."""

    def __init__(self, region):
        self.region = region

    def project(self, y, tol=1e-12):
        try:
            return self.region.project(y, tol)
        except ConvergenceError as exc:
            raise InfeasibleModelError(
                f"ball intersection looks empty: {exc}", best=exc.best,
                residual=exc.residual) from exc


def moving_balls_step(p: NLPProblem, x, tol: float = 1e-12,
                      tol_feas: float = TOL_FEAS) -> np.ndarray:
    """Minimize the quadratic model over the ball intersection.

    Projected gradient with Dykstra projections; the result is then moved
    toward x (which lies in every ball) until it is exactly inside each
    ball, so the original constraints hold by the upper-model property.
    """
    model, balls = moving_balls_model(p, x, tol_feas)
    x = model.x
    region = BallIntersection(tuple(balls))
    cm = ConvexModel(value=model, grad=lambda y: model.g + model.L * (y - x),
                     lipschitz=model.L, mu=model.L)
    try:
        y = pg_solve(cm, _DykstraGuard(region), x, tol, proj_tol=1e-12).x
    except InfeasibleModelError:
        raise
    y = _pull_into_balls(x, np.array(y), balls) if balls else y
    viol = p.max_violation(y)
    if viol > tol_feas:
        raise InfeasibleModelError(
            f"moving-balls step left the feasible set (max f_i = {viol:.3e})",
            best=y, residual=viol)
    return y


def _moving_balls_mapping(p: NLPProblem):
    def mapping(x):
        if not p.constraints:
            return WholeSpace()
        return BallIntersection(tuple(moving_balls_model(p, x)[1]))
    mapping.kind = "moving_balls"
    return mapping


def moving_balls_problem(p: NLPProblem) -> MMProblem:
    def model(x, y):
        g = np.asarray(p.f.grad(x), dtype=float)
        d = y - x
        return float(p.f.value(x)) + float(g @ d) + 0.5 * p.L * float(d @ d)

    return MMProblem(
        objective=p.objective(), model=model, mapping=_moving_balls_mapping(p),
        mu=p.L, subproblem=lambda x, tol: moving_balls_step(p, x, tol),
        gamma_h=1.5 * p.L, gamma_D=None, kind="moving_balls",
        params={"L": p.L, "L_i": [c.L for c in p.constraints]})


def check_feasibility(t: Trace, p: NLPProblem, tol_feas: float = TOL_FEAS
                      ) -> ConditionReport:
    """Margin -max_i f_i(x_k) per iterate; violation below -tol_feas."""
    ms = [-p.max_violation(x) if p.constraints else 0.0 for x in t.iterates]
    return _report("feasibility", list(range(len(t))), ms, tol_feas)


# --------------------------------------------------------------------------
# polynomial data for config files

@dataclass(frozen=True)
class Polynomial:
    """sum_j c_j prod_i x_i^{e_ji}, given as ``[[c_j, [e_j1, ..., e_jn]], ...]``."""

    coefs: np.ndarray
    exponents: np.ndarray

    @classmethod
    def from_terms(cls, terms: Sequence, dim: int) -> "Polynomial":
        if not terms:
            return cls(np.zeros(1), np.zeros((1, dim), dtype=int))
        coefs, exps = [], []
        for term in terms:
            try:
                c, e = term
                e = [int(v) for v in e]
            except (TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"malformed polynomial term {term!r}") from exc
            if len(e) != dim or any(v < 0 for v in e):
                raise InvalidArgumentError(
                    f"term {term!r}: need {dim} nonnegative exponents")
            coefs.append(float(c))
            exps.append(e)
        return cls(np.array(coefs), np.array(exps, dtype=int))

    @property
    def dim(self) -> int:
        return self.exponents.shape[1]

    def __call__(self, x) -> float:
        x = as_vector(x)
        return float(self.coefs @ np.prod(x[None, :] ** self.exponents, axis=1))

    def gradient(self, x) -> np.ndarray:
        x = as_vector(x)
        g = np.zeros(self.dim)
        for i in range(self.dim):
            e = self.exponents.copy()
            c = self.coefs * e[:, i]
            e[:, i] = np.maximum(e[:, i] - 1, 0)
            g[i] = float(c @ np.prod(x[None, :] ** e, axis=1))
        return as_vector(g)
