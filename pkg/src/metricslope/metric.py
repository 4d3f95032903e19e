"""Euclidean metric primitives: vectors, segments, balls and projections.

Vectors are read-only ``float64`` numpy arrays of shape ``(n,)``. Since
they cannot be mutated they are shared freely between threads and
experiment runs, and :func:`as_vector` passes them through uncopied.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConvergenceError, InvalidArgumentError

__all__ = [
    "as_vector",
    "distance",
    "interpolate",
    "Ball",
    "Objective",
    "project_ball",
    "dykstra_project",
    "vector_to_json",
    "vector_from_json",
    "ball_to_json",
    "ball_from_json",
]


def as_vector(x) -> np.ndarray:
    """Return ``x`` as a read-only 1-D float array (scalars become length 1)."""
    if (type(x) is np.ndarray and x.ndim == 1 and x.dtype == np.float64
            and not x.flags.writeable and x.size and x.base is None):
        # already one of ours: owned, frozen, validated on creation
        return x
    v = np.array(x, dtype=float).flatten()
    if v.size == 0:
        raise InvalidArgumentError("vectors need dimension >= 1")
    if not np.isfinite(v).all():
        raise InvalidArgumentError(f"non-finite vector entries: {v!r}")
    v.flags.writeable = False
    return v


def _pair(x, y):
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise InvalidArgumentError(
            f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return x, y


def distance(x, y) -> float:
    """Euclidean distance between two vectors of equal dimension."""
    x, y = _pair(x, y)
    return float(np.linalg.norm(x - y))


def interpolate(x, y, t: float) -> np.ndarray:
    """Point ``(1 - t) x + t y`` on the segment (geodesic) from x to y."""
    x, y = _pair(x, y)
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"t must lie in [0, 1], got {t}")
    return as_vector((1.0 - t) * x + t * y)


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center))
        r = float(self.radius)
        if not (r >= 0.0 and math.isfinite(r)):
            raise InvalidArgumentError(f"ball radius must be >= 0, got {r}")
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def contains(self, y, tol: float = 0.0) -> bool:
        return self.distance_to(y) <= tol

    def distance_to(self, y) -> float:
        """Distance from ``y`` to the ball (zero inside)."""
        return max(distance(self.center, y) - self.radius, 0.0)

    def __eq__(self, other):
        if not isinstance(other, Ball):
            return NotImplemented
        return (self.radius == other.radius
                and np.array_equal(self.center, other.center))

    def __hash__(self):
        return hash((self.center.tobytes(), self.radius))


@dataclass(frozen=True)
class Objective:
    """A test objective on (a subset of) R^n.

    ``value`` must be finite on the feasible region; points outside a
    constraint set may be reported as ``+inf``. ``gradient``, when given,
    must have norm equal to the slope wherever it is called (for kinked
    one-dimensional functions return the minimal-norm subgradient).
    ``prox(x, alpha)`` optionally returns an exact minimizer of
    ``f + alpha * |. - x|^2``.
    """

    dim: int
    value: Callable[[np.ndarray], float]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    known_inf: Optional[float] = None
    lipschitz_grad: Optional[float] = None
    prox: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    name: str = "objective"
    minimizer: Optional[np.ndarray] = field(default=None, compare=False)

    def __call__(self, x) -> float:
        return float(self.value(as_vector(x)))

    def gap(self, x) -> Optional[float]:
        if self.known_inf is None:
            return None
        return max(self(x) - self.known_inf, 0.0)


def project_ball(b: Ball, y) -> np.ndarray:
    """Nearest point of the ball ``b`` to ``y``."""
    c, y = _pair(b.center, y)
    diff = y - c
    nrm = float(np.linalg.norm(diff))
    if nrm <= b.radius:
        return y
    return as_vector(c + (b.radius / nrm) * diff)


def dykstra_project(balls: Sequence[Ball], y, tol: float = 1e-10,
                    max_sweeps: int = 10_000) -> np.ndarray:
    """Project ``y`` onto the intersection of ``balls`` with Dykstra's method.

    Stops once a full sweep moves the iterate by less than ``tol / 10`` and
    the iterate lies within ``tol`` of every ball. Raises
    :class:`ConvergenceError` (carrying the last iterate) when the sweep
    budget runs out, which in practice signals an empty intersection.
    """
    y = as_vector(y)
    balls = list(balls)
    if not balls:
        return y
    for b in balls:
        if b.dim != y.shape[0]:
            raise InvalidArgumentError("ball and point dimensions differ")
    if len(balls) == 1:
        return project_ball(balls[0], y)
    if all(b.contains(y) for b in balls):
        return y

    x = np.array(y)
    incr = [np.zeros_like(x) for _ in balls]
    resid = math.inf
    for _ in range(max_sweeps):
        x_prev = x.copy()
        for i, b in enumerate(balls):
            z = np.array(project_ball(b, x + incr[i]))
            incr[i] = x + incr[i] - z
            x = z
        move = float(np.linalg.norm(x - x_prev))
        resid = max(b.distance_to(x) for b in balls)
        if move <= 0.1 * tol and resid <= tol:
            return as_vector(x)
    raise ConvergenceError(
        f"Dykstra did not reach tol={tol} in {max_sweeps} sweeps "
        f"(residual {resid:.3e})", best=as_vector(x), residual=resid)


def vector_to_json(x) -> str:
    return json.dumps([float(v) for v in as_vector(x)])


def vector_from_json(s: str) -> np.ndarray:
    data = json.loads(s)
    if not isinstance(data, list):
        raise InvalidArgumentError("vector JSON must be an array of numbers")
    return as_vector(data)


def ball_to_json(b: Ball) -> str:
    return json.dumps({"center": [float(v) for v in b.center],
                       "radius": b.radius})


def ball_from_json(s: str) -> Ball:
    data = json.loads(s)
    try:
        return Ball(data["center"], data["radius"])
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed ball JSON: {s!r}") from exc
