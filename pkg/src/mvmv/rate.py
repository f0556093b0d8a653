"""Rate function values from discretized skeleton control problems.

``I(x) = 1/2 inf { ||h||_H^2 : skeleton(h) = x }`` is computed for endpoint
targets and for full path targets.  Controls are piecewise constant on a
(possibly coarsened) partition of the time grid.

When the skeleton is linear in the control (MDP mode with A = 0) the problem
is a weighted least-norm problem solved exactly from the assembled
control-to-state map.  Otherwise a quadratic penalty on the target mismatch
is minimized by damped Gauss-Newton steps with forward finite-difference
Jacobians, escalating the penalty weight until the residual meets the
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet
from .dynamics import SolvedPath, TimeGrid, solve_skeleton_batch
from .errors import InfeasibleTargetError, InvalidArgumentError
from .monotone import MonotoneOperator

__all__ = ["Control", "RateResult", "action", "rate_endpoint", "rate_tube", "segment_bounds"]

MAX_SEGMENTS = 64


@dataclass(frozen=True, eq=False)
class Control:
    """Piecewise-constant control: ``values[k]`` acts on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.steps:
            raise InvalidArgumentError("control needs one value per grid step")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int = 1) -> "Control":
        return cls(grid, np.zeros((grid.steps, m)))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Control":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(v, (grid.steps, 1)))

    @property
    def norm_sq(self) -> float:
        """``||h||_H^2``."""
        return float(np.sum(self.values ** 2) * self.grid.dt)

    def in_ball(self, N: float) -> bool:
        return self.norm_sq <= N


def action(h: Control) -> float:
    return 0.5 * h.norm_sq


@dataclass
class RateResult:
    value: float
    control: Control
    residual: float
    iterations: int
    converged: bool = True
    method: str = ""

    @property
    def norm_sq(self) -> float:
        return self.control.norm_sq


def segment_bounds(steps: int, segments: int) -> np.ndarray:
    """Step indices splitting ``steps`` into ``segments`` nearly equal pieces."""
    segments = max(1, min(int(segments), steps))
    return np.round(np.linspace(0, steps, segments + 1)).astype(int)


class _Basis:
    """Piecewise-constant control basis on a coarsened partition."""

    def __init__(self, grid: TimeGrid, m: int, segments: int):
        self.grid, self.m = grid, m
        self.bounds = segment_bounds(grid.steps, segments)
        self.S = len(self.bounds) - 1
        self.lengths = np.diff(self.bounds) * grid.dt
        self.seg_of_step = np.repeat(np.arange(self.S), np.diff(self.bounds))
        self.weights = np.repeat(self.lengths, m)  # H-norm weight per coefficient

    @property
    def size(self) -> int:
        return self.S * self.m

    def expand(self, q):
        """Coefficients ``(..., S*m)`` -> fine controls ``(..., n, m)``."""
        q = np.asarray(q, dtype=float)
        coarse = q.reshape(q.shape[:-1] + (self.S, self.m))
        return coarse[..., self.seg_of_step, :]

    def control(self, q) -> Control:
        return Control(self.grid, self.expand(q))

    def half_norm(self, q) -> float:
        return 0.5 * float(np.sum(self.weights * q * q))


def _default_segments(grid, linear):
    return grid.steps if linear else min(MAX_SEGMENTS, grid.steps)


def _is_linear(mode, op):
    return mode == "MDP" and op.is_zero


def _prepare(c, op, X0, mode):
    if mode not in ("LDP", "MDP"):
        raise InvalidArgumentError("mode must be 'LDP' or 'MDP'")
    if c.d != op.dim:
        raise InvalidArgumentError("coefficient and operator dimensions differ")
    if not isinstance(X0, SolvedPath):
        raise InvalidArgumentError("X0 must be the solved limit path")


def _endpoint_map(c, op, X0, mode, basis, Q):
    return solve_skeleton_batch(c, op, X0, basis.expand(Q), mode, record=False)


def _path_map(c, op, X0, mode, basis, Q):
    X, _, _ = solve_skeleton_batch(c, op, X0, basis.expand(Q), mode, record=True)
    return X


def _weighted_least_norm(Mmat, w, z):
    """argmin 1/2 sum w q^2 subject to M q = z (pseudo-inverse on the Gramian)."""
    winv = 1.0 / w
    gram = (Mmat * winv) @ Mmat.T
    lam = np.linalg.pinv(gram, rcond=1e-13) @ z
    return winv * (Mmat.T @ lam)


def rate_endpoint(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, mode: str,
                  target, tol: float = 1e-6, segments: int | None = None,
                  max_iter: int = 200) -> RateResult:
    """Rate of the endpoint set ``{x : x_T = target}``.

    ``segments`` sets the number of control pieces (default: every grid step
    for the linear route, at most 64 otherwise).  Non-convergence returns the
    best iterate with ``converged=False``; an unreachable target of a
    noiseless system raises :class:`InfeasibleTargetError`.
    """
    _prepare(c, op, X0, mode)
    z = np.atleast_1d(np.asarray(target, dtype=float))
    if z.shape != (c.d,):
        raise InvalidArgumentError(f"target must have dimension {c.d}")
    grid = X0.grid
    linear = _is_linear(mode, op)
    basis = _Basis(grid, c.m, segments or _default_segments(grid, linear))
    zero_q = np.zeros(basis.size)
    free_end = _endpoint_map(c, op, X0, mode, basis, zero_q[None])[0]
    if np.linalg.norm(free_end - z) <= tol:
        return RateResult(0.0, basis.control(zero_q), float(np.linalg.norm(free_end - z)), 0,
                          True, "free")
    if c.sigma_is_zero:
        raise InfeasibleTargetError("noiseless dynamics cannot reach a target other than "
                                    "the uncontrolled endpoint")
    if linear:
        cols = _endpoint_map(c, op, X0, mode, basis, np.eye(basis.size))
        Mmat = cols.T  # (d, S*m)
        q = _weighted_least_norm(Mmat, basis.weights, z)
        res = float(np.linalg.norm(Mmat @ q - z))
        if res > max(tol, 1e-9 * (1 + np.linalg.norm(z))):
            raise InfeasibleTargetError(f"target outside the reachable subspace "
                                        f"(residual {res:.3g})")
        return RateResult(basis.half_norm(q), basis.control(q), res, 1, True, "least-norm")

    def residuals(Q):
        return _endpoint_map(c, op, X0, mode, basis, Q) - z

    return _penalty_gauss_newton(basis, residuals, tol, max_iter)


def rate_tube(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, mode: str,
              reference, tol: float = 1e-6, segments: int | None = None,
              max_iter: int = 200) -> RateResult:
    """Rate of following ``reference`` (shape ``(n+1, d)``) along the whole grid.

    Minimizes ``1/2 ||h||^2 + rho sum_k |Y_k - phi_k|^2 dt`` with ``rho``
    escalated until ``sqrt(sum_k |Y_k - phi_k|^2 dt) <= tol``.
    """
    _prepare(c, op, X0, mode)
    grid = X0.grid
    phi = np.asarray(reference, dtype=float).reshape(grid.steps + 1, c.d)
    linear = _is_linear(mode, op)
    basis = _Basis(grid, c.m, segments or _default_segments(grid, linear))
    sq = np.sqrt(grid.dt)
    zero_q = np.zeros(basis.size)
    free = _path_map(c, op, X0, mode, basis, zero_q[None])[0]
    free_res = float(np.linalg.norm(free - phi) * sq)
    if free_res <= tol:
        return RateResult(0.0, basis.control(zero_q), free_res, 0, True, "free")
    if c.sigma_is_zero:
        raise InfeasibleTargetError("noiseless dynamics cannot follow a different path")

    if linear:
        L = _path_map(c, op, X0, mode, basis, np.eye(basis.size))  # (S*m, n+1, d)
        L = L.reshape(basis.size, -1).T * sq
        target = phi.ravel() * sq
        # whitened problem min 1/2|p|^2 + rho |Lw p - target|^2 with p = sqrt(w) q;
        # one SVD serves every penalty level
        sw = np.sqrt(basis.weights)
        U, sv, Vt = np.linalg.svd(L / sw, full_matrices=False)
        proj = U.T @ target
        rho = 1.0
        for it in range(1, 40):
            p = Vt.T @ (sv / (sv * sv + 0.5 / rho) * proj)
            q = p / sw
            res = float(np.linalg.norm(L @ q - target))
            if res <= tol:
                return RateResult(basis.half_norm(q), basis.control(q), res, it, True,
                                  "regularized-lsq")
            rho *= 10.0
        return RateResult(basis.half_norm(q), basis.control(q), res, it, False,
                          "regularized-lsq")

    def residuals(Q):
        return ((_path_map(c, op, X0, mode, basis, Q) - phi) * sq).reshape(len(Q), -1)

    return _penalty_gauss_newton(basis, residuals, tol, max_iter)


def _fd_jacobian(residuals, q, h_rel=1e-6):
    steps = h_rel * np.maximum(1.0, np.abs(q))
    Q = np.vstack([q[None, :], q[None, :] + np.diag(steps)])
    R = residuals(Q)
    r0 = R[0]
    J = (R[1:] - r0).T / steps
    return r0, J


def _penalty_gauss_newton(basis, residuals, tol, max_iter):
    w = basis.weights
    q = np.zeros(basis.size)
    rho = 1.0
    it = 0
    best = None
    while it < max_iter:
        # inner damped Gauss-Newton on 1/2 q'Wq + rho |r(q)|^2
        for _ in range(25):
            it += 1
            r, J = _fd_jacobian(residuals, q)
            obj = basis.half_norm(q) + rho * float(r @ r)
            grad = w * q + 2.0 * rho * (J.T @ r)
            hess = np.diag(w) + 2.0 * rho * (J.T @ J)
            step = -np.linalg.solve(hess + 1e-12 * np.eye(q.size), grad)
            t = 1.0
            while t > 1e-8:
                qn = q + t * step
                rn = residuals(qn[None])[0]
                obj_n = basis.half_norm(qn) + rho * float(rn @ rn)
                if obj_n <= obj:
                    break
                t *= 0.5
            else:
                break
            q = qn
            if obj - obj_n <= 1e-10 * obj or it >= max_iter:
                break
        res = float(np.linalg.norm(residuals(q[None])[0]))
        if best is None or res < best[1]:
            best = (q.copy(), res)
        if res <= tol:
            return RateResult(basis.half_norm(q), basis.control(q), res, it, True,
                              "penalty-gauss-newton")
        rho *= 10.0
        if rho > 1e16:
            break
    q, res = best
    return RateResult(basis.half_norm(q), basis.control(q), res, it, False,
                      "penalty-gauss-newton")
