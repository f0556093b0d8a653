"""Weighted empirical measures in P_2(R^d) and the Wasserstein-2 distance.

Exact transport is used whenever it is cheap: the sorted quantile coupling in
one dimension, an optimal assignment for equal-weight clouds of equal size,
and the transport linear program for anything else up to 64 atoms per side.
Larger problems fall back to log-domain Sinkhorn iterations whose entropic
regularization is reported alongside the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .errors import InvalidArgumentError

EXACT_LIMIT = 64
SINKHORN_REG = 1e-3


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or w.ndim != 1 or w.shape[0] != pts.shape[0] or pts.shape[0] == 0:
            raise InvalidArgumentError("points must be (n, d) with n matching weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("support points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def dilate(self, s: float) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points * s, self.weights)

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


def dirac(x) -> EmpiricalMeasure:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return EmpiricalMeasure(x[None, :], np.ones(1))


def uniform(points) -> EmpiricalMeasure:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    return EmpiricalMeasure(pts, np.full(n, 1.0 / n))


def second_moment(mu: EmpiricalMeasure) -> float:
    """``||mu||_2^2 = sum_i w_i |x_i|^2``."""
    return float(mu.weights @ np.sum(mu.points ** 2, axis=1))


def w2_to_dirac(mu: EmpiricalMeasure, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != mu.dim:
        raise InvalidArgumentError("dimension mismatch")
    return float(np.sqrt(mu.weights @ np.sum((mu.points - x) ** 2, axis=1)))


@dataclass(frozen=True)
class TransportResult:
    value: float
    method: str
    regularization: float = 0.0


def _quantile_w2sq(mu, nu):
    xa = mu.points[:, 0]
    xb = nu.points[:, 0]
    ia = np.argsort(xa, kind="stable")
    ib = np.argsort(xb, kind="stable")
    xa, wa = xa[ia], mu.weights[ia]
    xb, wb = xb[ib], nu.weights[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    lo = np.concatenate(([0.0], cuts[:-1]))
    mass = cuts - lo
    keep = mass > 0
    mid = 0.5 * (lo + cuts)[keep]
    qa = xa[np.minimum(np.searchsorted(ca, mid), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), len(xb) - 1)]
    return float(mass[keep] @ (qa - qb) ** 2)


def _cost(mu, nu):
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _lp_w2sq(mu, nu, C):
    n, m = C.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(C.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _sinkhorn_w2sq(mu, nu, C, reg_rel, max_iter=5000, tol=1e-10):
    scale = float(C.max()) if C.max() > 0 else 1.0
    reg = reg_rel * scale
    la = np.log(np.maximum(mu.weights, 1e-300))
    lb = np.log(np.maximum(nu.weights, 1e-300))
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    for _ in range(max_iter):
        f = reg * (la - logsumexp((g[None, :] - C) / reg, axis=1))
        g = reg * (lb - logsumexp((f[:, None] - C) / reg, axis=0))
        logp = (f[:, None] + g[None, :] - C) / reg
        err = np.abs(np.exp(logsumexp(logp, axis=1)) - mu.weights).sum()
        if err < tol:
            break
    plan = np.exp((f[:, None] + g[None, :] - C) / reg)
    return float(np.sum(plan * C)), reg


def transport(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> TransportResult:
    """W2 together with the algorithm that produced it."""
    if mu.dim != nu.dim:
        raise InvalidArgumentError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return TransportResult(np.sqrt(max(_quantile_w2sq(mu, nu), 0.0)), "quantile")
    if nu.size == 1:
        return TransportResult(w2_to_dirac(mu, nu.points[0]), "dirac")
    if mu.size == 1:
        return TransportResult(w2_to_dirac(nu, mu.points[0]), "dirac")
    C = _cost(mu, nu)
    if mu.size <= EXACT_LIMIT and nu.size <= EXACT_LIMIT:
        if mu.size == nu.size and mu.is_uniform() and nu.is_uniform():
            r, c = linear_sum_assignment(C)
            val = float(C[r, c].sum() / mu.size)
            return TransportResult(np.sqrt(max(val, 0.0)), "assignment")
        return TransportResult(np.sqrt(max(_lp_w2sq(mu, nu, C), 0.0)), "linprog")
    val, reg = _sinkhorn_w2sq(mu, nu, C, SINKHORN_REG)
    return TransportResult(np.sqrt(max(val, 0.0)), "sinkhorn", reg)


def w2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Wasserstein-2 distance between two empirical measures."""
    return float(transport(mu, nu).value)
