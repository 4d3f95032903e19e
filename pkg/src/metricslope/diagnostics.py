"""Iterate traces and verifiers for descent, KL and rate inequalities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError
from .metric import Objective, as_vector
from .slope import Desingularizer, SlopeSample, slope_estimate

BASE_TOL = 1e-9
CSV_COLUMNS = ("k", "f", "gap", "step_dist", "slope", "envelope")


def _ro(a, dtype=float):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _same(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)


@dataclass(eq=False)
class Trace:
    """Record of an iterate sequence x_0, ..., x_K.

    ``step_dists[k-1]`` is the distance between x_{k-1} and x_k. ``meta``
    carries provenance (slope estimator, subproblem tolerance, stop reason)
    and is not part of equality or the CSV form.
    """

    iterates: np.ndarray
    values: np.ndarray
    gaps: Optional[np.ndarray]
    step_dists: np.ndarray
    slopes: Optional[np.ndarray] = None
    envelope_values: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        it = np.array(self.iterates, dtype=float)
        if it.ndim == 1:
            it = it.reshape(-1, 1)
        it.flags.writeable = False
        self.iterates = it
        self.values = _ro(self.values)
        self.gaps = _ro(self.gaps)
        self.step_dists = _ro(self.step_dists)
        self.slopes = _ro(self.slopes)
        self.envelope_values = _ro(self.envelope_values)
        n = it.shape[0]
        for name in ("values", "gaps", "slopes", "envelope_values"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise InvalidArgumentError(f"{name} must have length {n}")
        if self.step_dists.shape != (n - 1,):
            raise InvalidArgumentError(f"step_dists must have length {n - 1}")

    def __len__(self):
        return self.iterates.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return all(_same(getattr(self, k), getattr(other, k))
                   for k in ("iterates", "values", "gaps", "step_dists",
                             "slopes", "envelope_values"))

    @property
    def tol(self) -> float:
        return BASE_TOL + float(self.meta.get("subproblem_tol", 0.0))

    @classmethod
    def from_iterates(cls, obj: Objective, iterates, slopes="auto",
                      envelope_values=None, meta=None) -> "Trace":
        """Build a trace by evaluating ``obj`` along an iterate list.

        ``slopes="auto"`` uses the gradient oracle when present and the
        sampled estimator otherwise; pass an array to supply them directly
        or ``None`` to leave them out.
        """
        pts = [as_vector(x) for x in iterates]
        meta = dict(meta or {})
        values = [obj(x) for x in pts]
        gaps = None
        if obj.known_inf is not None:
            gaps = [max(v - obj.known_inf, 0.0) for v in values]
        steps = [float(np.linalg.norm(b - a)) for a, b in zip(pts, pts[1:])]
        if isinstance(slopes, str) and slopes == "auto":
            slopes, source = compute_slopes(obj, pts)
            meta.setdefault("slope_source", source)
        return cls(np.vstack(pts), values, gaps, steps, slopes,
                   envelope_values, meta)


def compute_slopes(obj: Objective, points):
    if obj.gradient is not None:
        return [float(np.linalg.norm(obj.gradient(x))) for x in points], "gradient"
    return [slope_estimate(obj, x) for x in points], "sampled"


@dataclass(frozen=True)
class DescentParams:
    delta: float
    alpha: float
    beta: float
    mu: float = 0.0

    def __post_init__(self):
        if min(self.delta, self.alpha, self.beta) <= 0 or self.mu < 0:
            raise InvalidArgumentError("delta, alpha, beta must be > 0 and mu >= 0")

    @classmethod
    def for_prox(cls, alpha: float) -> "DescentParams":
        beta = 1.0 / (2.0 * alpha)
        return cls(alpha * beta ** 2, alpha, beta, 2.0 * alpha)


@dataclass
class ConditionReport:
    """Outcome of checking one inequality along a trace.

    Margins are the raw slack (left side minus right side); a step is a
    violation once its margin drops below ``-tol``.
    """

    condition_id: str
    worst_margin: float
    violating_steps: list
    steps_checked: int
    tol: float = BASE_TOL
    margins: Optional[np.ndarray] = field(default=None, repr=False)
    notes: str = ""

    @property
    def passed(self) -> bool:
        return not self.violating_steps


def _report(cid, steps, margins, tol, notes=""):
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return ConditionReport(cid, 0.0, [], 0, tol, margins, notes)
    if margins.ndim == 1:
        worst_per_step = margins
    else:
        worst_per_step = margins.min(axis=1)
    bad = [int(k) for k, m in zip(steps, worst_per_step) if m < -tol]
    return ConditionReport(cid, float(worst_per_step.min()), bad, len(steps),
                           tol, margins, notes)


def _need(t: Trace, *names):
    for n in names:
        if getattr(t, n) is None:
            raise InvalidArgumentError(f"trace has no {n}")


def check_basic_descent(t: Trace, delta: float, tol: Optional[float] = None) -> ConditionReport:
    """f(x_{k-1}) - f(x_k) >= delta * slope(x_k)**2 at every step."""
    _need(t, "slopes")
    tol = t.tol if tol is None else tol
    k = np.arange(1, len(t))
    m = t.values[:-1] - t.values[1:] - delta * t.slopes[1:] ** 2
    return _report("basic_descent", k, m, tol,
                   f"slopes: {t.meta.get('slope_source', 'unknown')}")


def check_slope_descent(t: Trace, alpha: float, beta: float,
                        tol: Optional[float] = None) -> ConditionReport:
    """Sufficient decrease f drop >= alpha d_k^2 and step d_k >= beta slope(x_k)."""
    _need(t, "slopes")
    tol = t.tol if tol is None else tol
    k = np.arange(1, len(t))
    d = t.step_dists
    m1 = t.values[:-1] - t.values[1:] - alpha * d ** 2
    m2 = d - beta * t.slopes[1:]
    return _report("slope_descent", k, np.column_stack([m1, m2]), tol,
                   f"slopes: {t.meta.get('slope_source', 'unknown')}")


def check_key_inequality(t: Trace, d: Desingularizer, delta: float,
                         tol: Optional[float] = None) -> ConditionReport:
    """tau_{k-1} - tau_k >= delta / phi'(tau_k)**2 while gaps stay positive."""
    _need(t, "gaps")
    tol = t.tol if tol is None else tol
    g = t.gaps
    zero = np.flatnonzero(g <= 0)
    end = int(zero[0]) if zero.size else len(t)
    notes = ""
    if end < len(t):
        notes = f"range truncated at k={end} (zero gap)"
    ks, ms = [], []
    for k in range(1, end):
        ks.append(k)
        rhs = delta / d.phi_prime(float(g[k])) ** 2 if delta else 0.0
        ms.append(g[k - 1] - g[k] - rhs)
    return _report("key_inequality", ks, ms, tol, notes)


@dataclass
class ValueConvergenceReport:
    monotone: bool
    k_tau_trend: np.ndarray
    k_tau_sup_tail: float
    k_tau_sup_head: float
    moderate_growth: bool = True


def value_convergence_report(t: Trace, moderate_growth: bool = True,
                             tol: Optional[float] = None) -> ValueConvergenceReport:
    """Monotonicity of values and the trend of k * tau_k.

    ``k_tau_sup_tail``/``k_tau_sup_head`` are the suprema over the last and
    first quartiles of iterations.
    """
    _need(t, "gaps")
    tol = t.tol if tol is None else tol
    monotone = bool(np.all(np.diff(t.values) <= tol))
    k = np.arange(len(t))
    ktau = k * t.gaps
    q = max(len(t) // 4, 1)
    return ValueConvergenceReport(monotone, ktau, float(ktau[-q:].max()),
                                  float(ktau[:q].max()), moderate_growth)


@dataclass
class RateFit:
    loglog_slope: float
    ratio_limit: Optional[float]
    ratios: np.ndarray = field(repr=False)
    window: Tuple[int, int] = (0, 0)


def gap_ratios(t: Trace) -> np.ndarray:
    """tau_{k+1} / tau_k over the leading run of positive gaps."""
    _need(t, "gaps")
    g = t.gaps
    zero = np.flatnonzero(g <= 0)
    g = g[: zero[0]] if zero.size else g
    return g[1:] / g[:-1]


def rate_fit(t: Trace, window: Optional[Tuple[int, int]] = None,
             min_length: int = 20) -> RateFit:
    """Log-log slope of tau_k against k, plus the limiting gap ratio if stable.

    ``window`` is an inclusive iteration range (default: all k >= 1). The
    ratio limit is the mean of the trailing quarter of ratios when their
    variance falls below 1e-6.
    """
    _need(t, "gaps")
    lo, hi = window if window is not None else (1, len(t) - 1)
    lo = max(lo, 1)
    hi = min(hi, len(t) - 1)
    k = np.arange(lo, hi + 1)
    g = t.gaps[lo:hi + 1]
    if k.size < min_length:
        raise InsufficientDataError(f"window holds {k.size} < {min_length} iterations")
    if np.any(g <= 0):
        raise InsufficientDataError("gaps must be positive on the window")
    slope, _ = np.polyfit(np.log(k), np.log(g), 1)
    ratios = g[1:] / g[:-1]
    tail = ratios[-max(5, ratios.size // 4):]
    limit = float(tail.mean()) if float(tail.var()) < 1e-6 else None
    return RateFit(float(slope), limit, ratios, (int(lo), int(hi)))


@dataclass
class ErrorBoundSeries:
    lambdas: np.ndarray
    dominated: Optional[bool]
    form: str = "step"
    errors: Optional[np.ndarray] = field(default=None, repr=False)


def error_bound_radii(t: Trace, d: Desingularizer, alpha: float, beta: float,
                      minimizer=None, form: str = "auto",
                      coefficient: str = "beta_over_alpha") -> ErrorBoundSeries:
    """Radii lambda_k (k >= 1) bounding the distance from x_k to the limit.

    lambda_k = c * phi(g(x_k)) + r_k, with r_k the step d_k (``form="step"``)
    or sqrt(g(x_{k-1}) / alpha) (``form="sqrt"``). ``coefficient="beta_over_alpha"``
    uses c = beta / alpha; ``"inverse_product"`` uses c = 1 / (alpha * beta),
    the constant the telescoping bound d(x_k, x_{k+1}) <= lambda_k - lambda_{k+1}
    needs for general (alpha, beta).
    """
    _need(t, "gaps")
    if form == "auto":
        form = "step" if t.step_dists is not None else "sqrt"
    if form not in ("step", "sqrt"):
        raise InvalidArgumentError(f"unknown form {form!r}")
    if coefficient == "beta_over_alpha":
        c = beta / alpha
    elif coefficient == "inverse_product":
        c = 1.0 / (alpha * beta)
    else:
        raise InvalidArgumentError(f"unknown coefficient {coefficient!r}")
    g = t.gaps
    phis = np.array([d.phi(float(v)) for v in g[1:]])
    if form == "step":
        tail = t.step_dists
    else:
        tail = np.sqrt(g[:-1] / alpha)
    lam = c * phis + tail
    dominated, errs = None, None
    if minimizer is not None:
        xs = as_vector(minimizer)
        errs = np.linalg.norm(t.iterates[1:] - xs, axis=1)
        dominated = bool(np.all(errs <= lam))
    return ErrorBoundSeries(_ro(lam), dominated, form, errs)


@dataclass
class CriticalityReport:
    final_slope: float
    slope_trend: np.ndarray = field(repr=False)


def criticality_report(t: Trace) -> CriticalityReport:
    _need(t, "slopes")
    return CriticalityReport(float(t.slopes[-1]), t.slopes)


def trace_slope_samples(t: Trace, obj: Objective, per_segment: int = 0,
                        min_fraction: float = 1e-12) -> list:
    """Slope/gap samples at the iterates and along the segments joining them.

    Segment points approach each later iterate geometrically, at fractions
    ``min_fraction .. 1`` of the step, so that steps which jump over a whole
    range of gaps (fast or finite convergence) still populate that range.
    """
    if obj.known_inf is None:
        raise InvalidArgumentError("samples need a known infimum for gaps")
    pts = [as_vector(x) for x in t.iterates]
    if per_segment > 0:
        fracs = np.geomspace(1.0, min_fraction, per_segment + 1)[1:]
        for a, b in zip(t.iterates[:-1], t.iterates[1:]):
            if np.array_equal(a, b):
                continue
            pts.extend(as_vector(b + s * (a - b)) for s in fracs)
    slopes, _ = compute_slopes(obj, pts)
    out = []
    for x, s in zip(pts, slopes):
        v = obj(x)
        out.append(SlopeSample(x, v, max(v - obj.known_inf, 0.0), s))
    return out


# --------------------------------------------------------------------------
# CSV

def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def trace_to_csv(t: Trace) -> str:
    """Serialize with the columns k,f,gap,step_dist,slope,envelope then x1..xn."""
    n = t.iterates.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CSV_COLUMNS) + [f"x{i + 1}" for i in range(n)])
    for k in range(len(t)):
        w.writerow([str(k), _fmt(t.values[k]),
                    _fmt(None if t.gaps is None else t.gaps[k]),
                    _fmt(None if k == 0 else t.step_dists[k - 1]),
                    _fmt(None if t.slopes is None else t.slopes[k]),
                    _fmt(None if t.envelope_values is None else t.envelope_values[k])]
                   + [_fmt(c) for c in t.iterates[k]])
    return buf.getvalue()


def trace_from_csv(text: str) -> Trace:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InvalidArgumentError("empty trace CSV") from None
    if tuple(header[:6]) != CSV_COLUMNS:
        raise InvalidArgumentError(f"unexpected trace header {header[:6]}")
    rows = list(reader)
    if not rows:
        raise InvalidArgumentError("trace CSV has no rows")
    xcols = header[6:]

    def col(i, start=0):
        vals = [r[i] for r in rows[start:]]
        if all(v == "" for v in vals):
            return None
        return [float(v) for v in vals]

    iterates = [[float(v) for v in r[6:6 + len(xcols)]] for r in rows]
    if not xcols:
        iterates = [[math.nan] for _ in rows]
    steps = col(3, start=1) or []
    return Trace(iterates, col(1), col(2), steps, col(4), col(5))
