"""Slopes, desingularizers, KL certificates and rate regimes.

The slope of ``f`` at ``x`` is estimated from descent ratios
``max(f(x) - f(y), 0) / |x - y|`` over a deterministic set of directions at
a few shrinking radii, then extrapolated to radius zero.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm, qmc

from .errors import (DomainError, InsufficientDataError, InvalidArgumentError,
                     UnsupportedOperationError)
from .metric import Objective, as_vector

DEFAULT_RADII = (1e-2, 1e-3, 1e-4)
DEFAULT_GAP_WINDOW = (1e-10, 1e-2)
MODERATE_GROWTH_THRESHOLD = 1e-6
_THETA_MAX = 1.0 - 1e-12


# --------------------------------------------------------------------------
# desingularizers

@dataclass(frozen=True)
class PowerForm:
    """phi(tau) = kappa * tau**(1 - theta)."""

    kappa: float
    theta: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidArgumentError("kappa must be positive")
        if not 0.0 <= self.theta < 1.0:
            raise DomainError("theta must lie in [0, 1)")

    @property
    def concave(self) -> bool:
        return True

    def phi(self, tau: float) -> float:
        if tau < 0:
            raise DomainError("tau must be nonnegative")
        if tau == 0:
            return 0.0
        return self.kappa * tau ** (1.0 - self.theta)

    def phi_prime(self, tau: float) -> float:
        if tau < 0:
            raise DomainError("tau must be nonnegative")
        if tau == 0:
            if self.theta > 0:
                raise DomainError("phi' is unbounded at 0 when theta > 0")
            return self.kappa
        return self.kappa * (1.0 - self.theta) * tau ** (-self.theta)


@dataclass(frozen=True)
class Tabulated:
    """Desingularizer given on a grid; linear interpolation in between.

    Outside the grid the derivative is clamped to its end values and phi is
    extended linearly with the end slopes. ``phi(0)`` is always 0.
    """

    tau: np.ndarray
    values: np.ndarray
    derivs: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        ders = np.asarray(self.derivs, dtype=float)
        if not (tau.ndim == 1 and tau.shape == vals.shape == ders.shape
                and tau.size >= 2):
            raise InvalidArgumentError("grid columns must be 1-D, equal length >= 2")
        if np.any(tau <= 0) or np.any(np.diff(tau) <= 0):
            raise InvalidArgumentError("tau grid must be positive and increasing")
        if np.any(ders <= 0):
            raise InvalidArgumentError("phi' must be strictly positive")
        for name, arr in (("tau", tau), ("values", vals), ("derivs", ders)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def concave(self) -> bool:
        return bool(np.all(np.diff(self.derivs) <= 0))

    def phi(self, tau: float) -> float:
        if tau < 0:
            raise DomainError("tau must be nonnegative")
        if tau == 0:
            return 0.0
        t, v, d = self.tau, self.values, self.derivs
        if tau < t[0]:
            return float(v[0] - d[0] * (t[0] - tau))
        if tau > t[-1]:
            return float(v[-1] + d[-1] * (tau - t[-1]))
        return float(np.interp(tau, t, v))

    def phi_prime(self, tau: float) -> float:
        if tau <= 0:
            raise DomainError("phi' of a tabulated desingularizer needs tau > 0")
        return float(np.interp(tau, self.tau, self.derivs))


Desingularizer = Union[PowerForm, Tabulated]


def desingularizer_eval(d: Desingularizer, tau: float,
                        derivative: bool = True) -> Tuple[float, Optional[float]]:
    """Return ``(phi(tau), phi'(tau))``; the derivative is skipped if not wanted."""
    phi = d.phi(tau)
    return phi, (d.phi_prime(tau) if derivative else None)


def check_moderate_growth(d: Desingularizer, grid: Sequence[float]) -> bool:
    """Whether tau * phi'(tau) -> 0 as tau decreases to 0.

    Power forms satisfy this for every admissible theta. For tables the
    products along ``grid`` must be nonincreasing and end below 1e-6.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2 or np.any(grid <= 0) or np.any(np.diff(grid) >= 0):
        raise InvalidArgumentError("grid must be positive and strictly decreasing")
    if isinstance(d, PowerForm):
        return d.theta < 1.0
    prods = np.array([t * d.phi_prime(t) for t in grid])
    return bool(np.all(np.diff(prods) <= 0)
                and prods[-1] < MODERATE_GROWTH_THRESHOLD)


# --------------------------------------------------------------------------
# slopes

def slope_exact_smooth(obj: Objective, x) -> float:
    """Norm of the gradient oracle at ``x``."""
    if obj.gradient is None:
        raise UnsupportedOperationError(f"{obj.name} has no gradient oracle")
    return float(np.linalg.norm(np.asarray(obj.gradient(as_vector(x)), dtype=float)))


@lru_cache(maxsize=64)
def _directions(dim: int, count: int) -> np.ndarray:
    eye = np.eye(dim)
    dirs = [eye, -eye]
    extra = count - 2 * dim
    if extra > 0 and dim > 1:
        pts = qmc.Halton(d=dim, scramble=False).random(extra + 1)[1:]
        gauss = norm.ppf(pts)
        gauss /= np.linalg.norm(gauss, axis=1, keepdims=True)
        dirs.append(gauss)
    out = np.vstack(dirs)
    out.flags.writeable = False
    return out


def direction_set(dim: int, count: Optional[int] = None) -> np.ndarray:
    """Signed coordinate directions followed by Halton points on the sphere."""
    if count is None:
        count = 2 if dim == 1 else max(16, 2 * dim)
    if count < 2 * dim:
        raise InvalidArgumentError("need at least 2*dim directions")
    return _directions(dim, count)


def _extrapolate(radii: Sequence[float], ratios: Sequence[float]) -> float:
    if len(radii) == 1:
        return max(ratios[0], 0.0)
    order = np.argsort(radii)
    r_b, r_a = radii[order[0]], radii[order[1]]
    s_b, s_a = ratios[order[0]], ratios[order[1]]
    est = (r_a * s_b - r_b * s_a) / (r_a - r_b)
    return max(est, 0.0)


def descent_ratio_slope(func: Callable[[np.ndarray], float], x,
                        radii: Sequence[float] = DEFAULT_RADII,
                        directions: Optional[np.ndarray] = None,
                        fx: Optional[float] = None) -> float:
    """Slope of an arbitrary function from sampled descent ratios.

    ``func`` may return ``+inf`` at points outside its domain; such samples
    never count as descent.
    """
    x = as_vector(x)
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii):
        raise InvalidArgumentError("radii must be positive")
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise InvalidArgumentError("radii must be strictly decreasing")
    if directions is None:
        directions = direction_set(x.shape[0])
    if fx is None:
        fx = float(func(x))
    if not math.isfinite(fx):
        return math.inf

    h = radii[-1]
    dim = x.shape[0]
    fd = np.zeros(dim)
    fd_ok = dim > 1
    for i in range(dim if fd_ok else 0):
        e = np.zeros(dim)
        e[i] = h
        fp, fm = float(func(x + e)), float(func(x - e))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            fd_ok = False
            break
        fd[i] = (fp - fm) / (2 * h)
    dirs = directions
    nrm = float(np.linalg.norm(fd))
    if fd_ok and nrm > 0 and dim > 1:
        dirs = np.vstack([directions, -fd / nrm])

    ratios = []
    for r in radii:
        best = 0.0
        for u in dirs:
            drop = fx - float(func(x + r * u))
            if drop > best * r:
                best = drop / r
        ratios.append(best)
    return _extrapolate(radii, ratios)


def slope_estimate(obj: Objective, x, radii: Sequence[float] = DEFAULT_RADII,
                   directions_per_radius: Optional[int] = None) -> float:
    """Estimate the metric slope of ``obj`` at ``x`` from descent ratios."""
    x = as_vector(x)
    dirs = direction_set(x.shape[0], directions_per_radius)
    return descent_ratio_slope(obj.value, x, radii, dirs)


def limiting_slope_estimate(obj: Objective, x, neighborhood_radius: float,
                            samples: int,
                            radii: Sequence[float] = DEFAULT_RADII) -> float:
    """Smallest slope estimate over nearby points with nearby values.

    ``x`` itself is always one of the sampled points.
    """
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    x = as_vector(x)
    fx = obj(x)
    dirs = direction_set(x.shape[0])
    best = slope_estimate(obj, x, radii)
    for j in range(1, samples):
        u = dirs[j % len(dirs)]
        y = as_vector(x + neighborhood_radius * (j / samples) * u)
        fy = obj(y)
        if not math.isfinite(fy) or abs(fy - fx) > neighborhood_radius:
            continue
        best = min(best, slope_estimate(obj, y, radii))
    return best


# --------------------------------------------------------------------------
# KL certificates and fits

@dataclass(frozen=True)
class SlopeSample:
    point: np.ndarray
    value: float
    gap: float
    slope: float

    def __post_init__(self):
        object.__setattr__(self, "point", as_vector(self.point))
        if self.gap < 0 or self.slope < 0:
            raise InvalidArgumentError("gap and slope must be nonnegative")

    def __eq__(self, other):
        if not isinstance(other, SlopeSample):
            return NotImplemented
        return (np.array_equal(self.point, other.point)
                and (self.value, self.gap, self.slope)
                == (other.value, other.gap, other.slope))


@dataclass(frozen=True)
class KLFit:
    theta_hat: float
    kappa_hat: float
    max_violation: float
    sample_count: int

    @property
    def desingularizer(self) -> PowerForm:
        return PowerForm(self.kappa_hat, self.theta_hat)

    def to_json(self) -> str:
        return json.dumps({"theta": self.theta_hat, "kappa": self.kappa_hat,
                           "max_violation": self.max_violation,
                           "n": self.sample_count})

    @classmethod
    def from_json(cls, s: str) -> "KLFit":
        d = json.loads(s)
        return cls(float(d["theta"]), float(d["kappa"]),
                   float(d["max_violation"]), int(d["n"]))


def _window(samples, gap_window):
    lo, hi = gap_window
    if not 0 < lo < hi:
        raise InvalidArgumentError(f"bad gap window {gap_window}")
    return [s for s in samples if lo < s.gap < hi]


def kl_certificate_check(samples: Iterable[SlopeSample], d: Desingularizer,
                         gap_window: Tuple[float, float] = DEFAULT_GAP_WINDOW) -> float:
    """Largest shortfall ``(1 - phi'(gap) * slope)_+`` over samples in the window."""
    inside = _window(list(samples), gap_window)
    if not inside:
        raise InvalidArgumentError("no samples fall inside the gap window")
    return max(max(1.0 - d.phi_prime(s.gap) * s.slope, 0.0) for s in inside)


def fit_kl_exponent(samples: Iterable[SlopeSample],
                    gap_window: Tuple[float, float] = DEFAULT_GAP_WINDOW) -> KLFit:
    """Fit a power desingularizer to slope/gap samples.

    Regresses ``log slope`` on ``log gap``; the slope of the line is the KL
    exponent (clamped into [0, 1)). kappa is then the smallest value for
    which the fitted certificate holds on every sample used.
    """
    usable = [s for s in _window(list(samples), gap_window)
              if s.slope > 0 and math.isfinite(s.slope)]
    gaps = np.array([s.gap for s in usable])
    if len(usable) < 8 or np.unique(gaps).size < 8:
        raise InsufficientDataError(
            f"need >= 8 samples with distinct gaps, got {len(usable)}")
    slopes = np.array([s.slope for s in usable])
    lg, ls = np.log(gaps), np.log(slopes)
    theta, _ = np.polyfit(lg, ls, 1)
    theta = float(min(max(theta, 0.0), _THETA_MAX))
    kappa = float(np.max(gaps ** theta / ((1.0 - theta) * slopes)))
    viol = kl_certificate_check(usable, PowerForm(kappa, theta), gap_window)
    return KLFit(theta, kappa, viol, len(usable))


# --------------------------------------------------------------------------
# rate regimes

class RateKind(str, enum.Enum):
    FINITE = "finite"
    SUPERLINEAR = "superlinear"
    LINEAR = "linear"
    SUBLINEAR = "sublinear"


@dataclass(frozen=True)
class RateRegime:
    kind: RateKind
    gap_exponent: Optional[float] = None
    iterate_exponent: Optional[float] = None


def classify_rate(theta: float, atol: float = 0.0) -> RateRegime:
    """Convergence regime implied by a KL exponent ``theta`` in [0, 1).

    ``atol`` snaps a fitted exponent within that distance of 0 or 1/2 onto
    the boundary value, so that e.g. 0.5000000000000001 reads as linear.
    """
    if atol < 0:
        raise InvalidArgumentError("atol must be nonnegative")
    for edge in (0.0, 0.5):
        if abs(theta - edge) <= atol:
            theta = edge
    if not 0.0 <= theta < 1.0:
        raise DomainError(f"theta must lie in [0, 1), got {theta}")
    if theta == 0.0:
        return RateRegime(RateKind.FINITE)
    if theta < 0.5:
        return RateRegime(RateKind.SUPERLINEAR)
    if theta == 0.5:
        return RateRegime(RateKind.LINEAR)
    denom = 2.0 * theta - 1.0
    return RateRegime(RateKind.SUBLINEAR, 1.0 / denom, (1.0 - theta) / denom)


# --------------------------------------------------------------------------
# serialization

def samples_to_csv(samples: Iterable[SlopeSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gap", "slope", "value"])
    for s in samples:
        w.writerow([repr(float(s.gap)), repr(float(s.slope)), repr(float(s.value))])
    return buf.getvalue()


def samples_from_csv(text: str):
    """Load samples written by :func:`samples_to_csv` (points are not stored)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return [SlopeSample(np.zeros(1), float(r["value"]), float(r["gap"]),
                        float(r["slope"])) for r in rows]


def samples_to_json(samples: Iterable[SlopeSample]) -> str:
    return json.dumps([{"gap": s.gap, "slope": s.slope, "value": s.value,
                        "point": [float(v) for v in s.point]} for s in samples])


def samples_from_json(text: str):
    return [SlopeSample(d.get("point", [0.0]), float(d["value"]),
                        float(d["gap"]), float(d["slope"]))
            for d in json.loads(text)]
