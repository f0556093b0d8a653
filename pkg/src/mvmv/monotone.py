"""Maximal monotone operators on R^d and their resolvents.

Every operator here is either the zero map, the normal cone of a box or a
ball, or the subdifferential of a convex function whose proximal map is known
in closed form.  The resolvent ``J_lam = (I + lam A)^{-1}`` is the only thing
the solvers need: for normal cones it is the metric projection, which turns
the implicit step of the multivalued part into a Skorokhod-type projection.

All functions accept points with arbitrary leading batch axes, ``x[..., d]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "MonotoneOperator",
    "GraphSample",
    "zero",
    "normal_cone_box",
    "normal_cone_ball",
    "subdifferential",
    "resolvent",
    "yosida",
    "domain_project",
    "graph_sample",
    "in_graph",
    "from_config",
    "to_config",
]

KINDS = ("zero", "box", "ball", "subdiff")
FAMILIES = ("abs", "quadratic", "indicator")


@dataclass(frozen=True, eq=False)
class MonotoneOperator:
    """Immutable description of a maximal monotone operator ``A``.

    Use the factory functions (:func:`zero`, :func:`normal_cone_box`,
    :func:`normal_cone_ball`, :func:`subdifferential`) rather than building
    this directly.
    """

    kind: str
    dim: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    family: str | None = None
    weight: float | None = None

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    @property
    def is_normal_cone(self) -> bool:
        return self.kind in ("box", "ball") or (
            self.kind == "subdiff" and self.family == "indicator"
        )

    def __repr__(self) -> str:
        if self.kind == "zero":
            return f"MonotoneOperator(zero, d={self.dim})"
        if self.kind == "ball":
            return (f"MonotoneOperator(ball, center={self.center.tolist()}, "
                    f"radius={self.radius})")
        if self.kind == "box" or self.family == "indicator":
            return (f"MonotoneOperator({self.kind}, lower={self.lower.tolist()}, "
                    f"upper={self.upper.tolist()})")
        return f"MonotoneOperator(subdiff {self.family}, weight={self.weight})"


@dataclass(frozen=True)
class GraphSample:
    x: np.ndarray
    y: np.ndarray = field(repr=True)


def _vec(v, d=None, name="x"):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise InvalidArgumentError(f"{name} must be a vector")
    if d is not None and a.shape[0] != d:
        raise InvalidArgumentError(f"{name} has dimension {a.shape[0]}, expected {d}")
    return a


def zero(d: int) -> MonotoneOperator:
    if d < 1:
        raise InvalidArgumentError("dimension must be positive")
    return MonotoneOperator("zero", int(d))


def _box_bounds(lower, upper):
    lo = np.array([-np.inf if v is None else v for v in np.atleast_1d(lower)], dtype=float)
    hi = np.array([np.inf if v is None else v for v in np.atleast_1d(upper)], dtype=float)
    if lo.shape != hi.shape:
        raise InvalidArgumentError("lower and upper bounds differ in dimension")
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or not np.all(lo < hi):
        raise InvalidArgumentError("box must have non-empty interior (lower < upper)")
    return lo, hi


def normal_cone_box(lower, upper) -> MonotoneOperator:
    """Normal cone of ``prod_i [lower_i, upper_i]``; ``None``/inf mean unbounded."""
    lo, hi = _box_bounds(lower, upper)
    return MonotoneOperator("box", lo.shape[0], lower=lo, upper=hi)


def normal_cone_ball(center, radius: float) -> MonotoneOperator:
    c = _vec(center, name="center")
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("center must be finite")
    if not (np.isfinite(radius) and radius > 0):
        raise InvalidArgumentError("radius must be positive")
    return MonotoneOperator("ball", c.shape[0], center=c, radius=float(radius))


def subdifferential(family: str, d: int = 1, *, weight: float = 1.0, center=None,
                    lower=None, upper=None) -> MonotoneOperator:
    """Subdifferential of a convex function with a closed-form proximal map.

    ``abs``:       phi(z) = weight * sum_i |z_i|
    ``quadratic``: phi(z) = weight/2 * |z - center|^2
    ``indicator``: phi = indicator of the box [lower, upper]
    """
    if family not in FAMILIES:
        raise InvalidArgumentError(f"unknown subdifferential family {family!r}")
    if family == "indicator":
        lo, hi = _box_bounds(lower, upper)
        return MonotoneOperator("subdiff", lo.shape[0], lower=lo, upper=hi,
                                family="indicator")
    if not (np.isfinite(weight) and weight > 0):
        raise InvalidArgumentError("weight must be positive")
    c = None
    if family == "quadratic":
        c = np.zeros(d) if center is None else _vec(center, name="center")
        d = c.shape[0]
    return MonotoneOperator("subdiff", int(d), center=c, family=family,
                            weight=float(weight))


def _project_ball(x, center, radius):
    v = x - center
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    # rescaled points can sit a few ulps past the sphere; treating those as
    # inside keeps the projection exactly idempotent
    outside = n > radius * (1.0 + 4.0 * np.finfo(float).eps)
    safe = np.where(outside, n, 1.0)
    return np.where(outside, center + v * (radius / safe), x)


def _resolvent(op: MonotoneOperator, lam: float, x: np.ndarray) -> np.ndarray:
    # unchecked fast path for the solvers
    k = op.kind
    if k == "zero":
        return x
    if k == "box" or (k == "subdiff" and op.family == "indicator"):
        return np.minimum(np.maximum(x, op.lower), op.upper)
    if k == "ball":
        return _project_ball(x, op.center, op.radius)
    if op.family == "abs":
        t = lam * op.weight
        return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    # quadratic
    a = lam * op.weight
    return (x + a * op.center) / (1.0 + a)


def _check_point(op, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != op.dim:
        raise InvalidArgumentError(
            f"point has dimension {x.shape[-1]}, operator has {op.dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("point must be finite")
    return x


def resolvent(op: MonotoneOperator, lam: float, x) -> np.ndarray:
    """Return ``J_lam(x) = (I + lam A)^{-1} x``, a point of D(A)."""
    if not (np.isfinite(lam) and lam > 0):
        raise InvalidArgumentError("resolvent parameter must be positive")
    x = _check_point(op, x)
    return np.array(_resolvent(op, float(lam), x), dtype=float)


def yosida(op: MonotoneOperator, lam: float, x) -> np.ndarray:
    """Yosida approximation ``(x - J_lam x) / lam``."""
    x = _check_point(op, x)
    return (x - resolvent(op, lam, x)) / lam


def domain_project(op: MonotoneOperator, x) -> np.ndarray:
    """Nearest point of the closure of D(A)."""
    x = _check_point(op, x)
    if op.kind == "box" or op.family == "indicator":
        return np.minimum(np.maximum(x, op.lower), op.upper)
    if op.kind == "ball":
        return _project_ball(x, op.center, op.radius)
    return x.copy()


def interior_margin(op: MonotoneOperator, x) -> np.ndarray:
    """Distance from ``x`` to the boundary of D(A); +inf when D(A) = R^d."""
    x = np.asarray(x, dtype=float)
    if op.kind == "box" or op.family == "indicator":
        return np.min(np.minimum(x - op.lower, op.upper - x), axis=-1)
    if op.kind == "ball":
        return op.radius - np.linalg.norm(x - op.center, axis=-1)
    return np.full(x.shape[:-1], np.inf)


def _sample_in_box(rng, lo, hi, size):
    a = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi - 4.0, -2.0))
    b = np.where(np.isfinite(hi), hi, a + 4.0)
    return a + (b - a) * rng.random(size)


def graph_sample(op: MonotoneOperator, rng: np.random.Generator, n: int) -> list[GraphSample]:
    """Draw ``n`` pairs ``(x, y)`` with ``y in A(x)``.

    At faces and corners of a box the whole normal cone is exercised: every
    active constraint contributes its generator ray with an independent
    nonnegative weight.
    """
    if n < 1:
        raise InvalidArgumentError("count must be at least 1")
    d = op.dim
    out = []
    for _ in range(n):
        if op.kind == "zero":
            x = rng.normal(size=d)
            y = np.zeros(d)
        elif op.kind == "box" or op.family == "indicator":
            lo, hi = op.lower, op.upper
            x = _sample_in_box(rng, lo, hi, d)
            y = np.zeros(d)
            if rng.random() > 0.25:
                for i in range(d):
                    choices = [0]
                    if np.isfinite(lo[i]):
                        choices.append(-1)
                    if np.isfinite(hi[i]):
                        choices.append(1)
                    s = choices[rng.integers(len(choices))]
                    if s == -1:
                        x[i] = lo[i]
                        y[i] = -rng.exponential()
                    elif s == 1:
                        x[i] = hi[i]
                        y[i] = rng.exponential()
        elif op.kind == "ball":
            u = rng.normal(size=d)
            u /= np.linalg.norm(u)
            if rng.random() < 0.3:
                x = op.center + u * op.radius * rng.random()
                y = np.zeros(d)
            else:
                x = op.center + u * op.radius
                y = u * rng.exponential()
        elif op.family == "abs":
            x = rng.normal(size=d)
            zero_mask = rng.random(d) < 0.35
            x[zero_mask] = 0.0
            y = op.weight * np.where(zero_mask, rng.uniform(-1.0, 1.0, d), np.sign(x))
        else:
            x = rng.normal(size=d)
            y = op.weight * (x - op.center)
        out.append(GraphSample(x, y))
    return out


def in_graph(op: MonotoneOperator, x, y, tol: float = 1e-12) -> bool:
    """Membership test ``y in A(x)`` up to ``tol``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if op.kind == "zero":
        return bool(np.all(np.abs(y) <= tol))
    if op.kind == "box" or op.family == "indicator":
        lo, hi = op.lower, op.upper
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            return False
        at_lo = np.abs(x - lo) <= tol
        at_hi = np.abs(x - hi) <= tol
        ok = np.where(at_lo & at_hi, True,
                      np.where(at_lo, y <= tol, np.where(at_hi, y >= -tol, np.abs(y) <= tol)))
        return bool(np.all(ok))
    if op.kind == "ball":
        v = x - op.center
        r = np.linalg.norm(v)
        if r > op.radius + tol:
            return False
        if r < op.radius - tol:
            return bool(np.all(np.abs(y) <= tol))
        # y must be a nonnegative multiple of the outward normal
        t = float(np.dot(y, v / r))
        return t >= -tol and bool(np.linalg.norm(y - t * v / r) <= tol)
    if op.family == "abs":
        nz = np.abs(x) > tol
        ok = np.where(nz, np.abs(y - op.weight * np.sign(x)) <= tol,
                      np.abs(y) <= op.weight + tol)
        return bool(np.all(ok))
    return bool(np.all(np.abs(y - op.weight * (x - op.center)) <= tol))


def _bounds_to_json(a):
    return [None if not np.isfinite(v) else float(v) for v in a]


def to_config(op: MonotoneOperator) -> dict:
    if op.kind == "zero":
        return {"kind": "zero", "dim": op.dim}
    if op.kind == "box":
        return {"kind": "box", "lower": _bounds_to_json(op.lower),
                "upper": _bounds_to_json(op.upper)}
    if op.kind == "ball":
        return {"kind": "ball", "center": op.center.tolist(), "radius": op.radius}
    if op.family == "indicator":
        return {"kind": "subdiff", "family": "indicator",
                "lower": _bounds_to_json(op.lower), "upper": _bounds_to_json(op.upper)}
    out = {"kind": "subdiff", "family": op.family, "weight": op.weight, "dim": op.dim}
    if op.family == "quadratic":
        out["center"] = op.center.tolist()
    return out


def from_config(cfg: dict, d: int | None = None) -> MonotoneOperator:
    """Build an operator from its experiment-file description."""
    kind = cfg.get("kind")
    if kind == "zero":
        return zero(int(cfg.get("dim", d or 1)))
    if kind == "box":
        return normal_cone_box(cfg["lower"], cfg["upper"])
    if kind == "ball":
        return normal_cone_ball(cfg["center"], cfg["radius"])
    if kind == "subdiff":
        fam = cfg.get("family")
        if fam == "indicator":
            return subdifferential("indicator", lower=cfg["lower"], upper=cfg["upper"])
        return subdifferential(fam, int(cfg.get("dim", d or 1)),
                               weight=cfg.get("weight", 1.0), center=cfg.get("center"))
    raise InvalidArgumentError(f"unknown operator kind {kind!r}")
