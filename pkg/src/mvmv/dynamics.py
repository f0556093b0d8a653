"""Time stepping for reflected (multivalued) McKean-Vlasov equations.

Every scheme is a Lie splitting: an explicit Euler predictor for drift and
noise, followed by the resolvent of the monotone operator with parameter
``dt``.  The compensator increment is the projection residual
``dK = p - J_dt(p)``, so for normal cones the scheme is the projected
(Skorokhod) Euler scheme and ``dK`` vanishes exactly away from the boundary.

The law of the solution is approximated by the empirical measure of ``N``
synchronously stepped particles.  Deterministic limits use the exact Dirac
measure of the limit path rather than a particle estimate.

Brownian increments come from a counter-based generator: the increments for
(step, replica block) are a pure function of the master seed, so any subset
of replicas can be reproduced without replaying the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .coefficients import CoefficientSet
from .errors import InvalidArgumentError, SolverDivergenceError
from .measures import EmpiricalMeasure, uniform
from .monotone import MonotoneOperator, _resolvent, domain_project

__all__ = [
    "TimeGrid",
    "NoisePlan",
    "SolvedPath",
    "Ensemble",
    "step_reflected",
    "solve_limit_ode",
    "solve_mv_ensemble",
    "solve_controlled",
    "solve_clt_pair",
    "solve_mdp_pair",
    "solve_skeleton",
    "solve_skeleton_batch",
    "a_of_eps",
]

DEFAULT_STEPS = 1000
# particle slots generated per counter block; fixed so results never depend
# on how replicas are distributed over workers
BLOCK_SLOTS = 32768


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise InvalidArgumentError("horizon T must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgumentError("number of steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def same_as(self, other: "TimeGrid") -> bool:
        return self.T == other.T and self.steps == other.steps


@dataclass(frozen=True)
class NoisePlan:
    """Deterministic source of Brownian increments.

    Replicas are grouped in blocks of ``replicas_per_block(N, m)``.  The
    standard normals for block ``b`` at step ``k`` are drawn from a Philox
    stream with key derived from ``(seed, stream)`` and counter ``(0, k, b, 0)``,
    laid out replica-major then particle-major.  Normal draws are sequential,
    so a replica's increments do not depend on how many replicas follow it.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2 ** 64):
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")

    @cached_property
    def key(self) -> np.ndarray:
        return np.random.SeedSequence([int(self.seed), int(self.stream)]).generate_state(
            2, np.uint64)

    @staticmethod
    def replicas_per_block(n_particles: int, m: int) -> int:
        return max(1, BLOCK_SLOTS // (n_particles * m))

    def block(self, step: int, block: int, n_replicas: int, n_particles: int, m: int,
              dt: float) -> np.ndarray:
        bitgen = np.random.Philox(key=self.key, counter=[0, step, block, 0])
        z = np.random.Generator(bitgen).standard_normal((n_replicas, n_particles, m))
        return z * math.sqrt(dt)

    def increments(self, step: int, n_particles: int, m: int, dt: float,
                   replica: int = 0) -> np.ndarray:
        """Increments ``(N, m)`` of one replica at one step."""
        per = self.replicas_per_block(n_particles, m)
        b, off = divmod(int(replica), per)
        return self.block(step, b, off + 1, n_particles, m, dt)[off]


@dataclass(frozen=True, eq=False)
class SolvedPath:
    """State path ``X``, compensator ``K`` and its running variation on a grid."""

    grid: TimeGrid
    X: np.ndarray
    K: np.ndarray
    var_K: np.ndarray

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def dK(self) -> np.ndarray:
        return np.diff(self.K, axis=0)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``N`` particle paths on a shared grid; arrays have shape ``(N, n+1, ...)``."""

    grid: TimeGrid
    X: np.ndarray
    K: np.ndarray
    var_K: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.X.shape[0]

    def path(self, i: int) -> SolvedPath:
        return SolvedPath(self.grid, self.X[i], self.K[i], self.var_K[i])

    def measure(self, k: int) -> EmpiricalMeasure:
        return uniform(self.X[:, k, :])

    def mean(self) -> np.ndarray:
        return self.X.mean(axis=0)

    def second_moment(self) -> np.ndarray:
        return np.mean(np.sum(self.X ** 2, axis=-1), axis=0)


def a_of_eps(eps: float, kappa: float = 0.25) -> float:
    """Moderate-deviation speed ``a(eps) = eps**kappa`` with ``kappa`` in (0, 1/2)."""
    if not 0.0 < kappa < 0.5:
        raise InvalidArgumentError("kappa must lie in the open interval (0, 1/2)")
    return eps ** kappa


# --- step kernels shared with the harness ---------------------------------

def _project(op, p, dt, step, eps=None):
    # a non-finite entry (or overflow) makes the sum non-finite
    if not math.isfinite(p.sum()):
        raise SolverDivergenceError(step, eps, "non-finite predictor")
    x = _resolvent(op, dt, p)
    return x, p - x


def _mv_predictor(c: CoefficientSet, x, eps, dW, dt):
    mpsi = c.mean_psi(x) if c._has_B else None
    p = x + c.drift(x, mpsi) * dt
    if eps > 0:
        mchi = c.mean_chi(x) if c._has_S2 else None
        p = p + math.sqrt(eps) * c.diffuse(x, mchi, dW)
    return p


def _limit_terms(c: CoefficientSet, x0k):
    """``(b(X0, delta_X0), psi(X0), chi(X0))`` at one grid point."""
    psi0 = c.psi_of(x0k)
    return c.drift(x0k, psi0), psi0, c.chi_of(x0k)


def _centred_mean(f, xs, x0k):
    f0 = f(x0k)
    return f0 + np.mean(f(xs) - f0, axis=-2, keepdims=True)


def _rescaled_predictor(c, x0k, b0k, y, scale, noise_factor, dW, dt, frozen=None):
    """Predictor for ``Y = (X - X0)/scale`` with measure the law of ``X0 + scale Y``.

    With ``frozen=(psi0, chi0)`` the measure is frozen at the Dirac mass of X0.
    """
    xs = x0k + scale * y
    if frozen is None:
        # centred means vanish exactly when every particle sits at X0
        mpsi = _centred_mean(c.psi_of, xs, x0k) if c._has_B else None
        mchi = _centred_mean(c.chi_of, xs, x0k) if c._has_S2 else None
    else:
        mpsi, mchi = frozen
    p = y + (c.drift(xs, mpsi) - b0k) / scale * dt
    return p + noise_factor * c.diffuse(xs, mchi, dW)


def _linearized_predictor(c, x0k, chi0k, z, dW, dt, mean_field=True):
    """Predictor of the linear limit equation driven by ``sigma(X0, delta_X0) dW``."""
    drift = c.grad_apply(x0k, z)
    if mean_field and c._has_B:
        drift = drift + c.lions_apply(x0k, np.mean(z, axis=-2, keepdims=True))
    return z + drift * dt + c.diffuse(x0k, chi0k, dW)


def _check_start(op, x, what="initial condition"):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (op.dim,):
        raise InvalidArgumentError(f"{what} must have dimension {op.dim}")
    if not np.allclose(domain_project(op, x), x, rtol=0, atol=1e-12):
        raise InvalidArgumentError(f"{what} must lie in the closure of D(A)")
    return x


def _require_zero_admissible(op):
    _check_start(op, np.zeros(op.dim), "zero (start of rescaled process)")


def _check_dims(c, op):
    if c.d != op.dim:
        raise InvalidArgumentError(f"coefficients have d={c.d}, operator has d={op.dim}")


class _Recorder:
    def __init__(self, n, shape):
        self.X = np.empty((n + 1,) + shape)
        self.K = np.zeros((n + 1,) + shape)
        self.V = np.zeros((n + 1,) + shape[:-1])

    def start(self, x):
        self.X[0] = x

    def put(self, k, x, dK):
        self.X[k] = x
        self.K[k] = self.K[k - 1] + dK
        self.V[k] = self.V[k - 1] + np.sqrt(np.sum(dK * dK, axis=-1))

    def moved(self):
        # (n+1, N, d) -> (N, n+1, d)
        return (np.moveaxis(self.X, 0, 1), np.moveaxis(self.K, 0, 1),
                np.moveaxis(self.V, 0, 1))


# --- public solvers --------------------------------------------------------

def step_reflected(op: MonotoneOperator, x, drift, noise, dt: float, step: int = 0):
    """One splitting step: predictor ``x + drift dt + noise``, then the resolvent.

    Returns ``(x_next, dK)`` with ``dK = predictor - x_next``.
    """
    x = np.asarray(x, dtype=float)
    p = x + np.asarray(drift, dtype=float) * dt + np.asarray(noise, dtype=float)
    return _project(op, p, dt, step)


def _simulate_mv(c, op, xi, eps, n_particles, grid, noise, replica):
    _check_dims(c, op)
    xi = _check_start(op, xi)
    if eps < 0 or not math.isfinite(eps):
        raise InvalidArgumentError("epsilon must be nonnegative")
    if n_particles < 1:
        raise InvalidArgumentError("at least one particle is required")
    if eps > 0 and noise is None:
        raise InvalidArgumentError("a NoisePlan is required when epsilon > 0")
    n, dt = grid.steps, grid.dt
    x = np.tile(xi, (n_particles, 1))
    rec = _Recorder(n, x.shape)
    rec.start(x)
    for k in range(n):
        dW = noise.increments(k, n_particles, c.m, dt, replica) if eps > 0 else None
        p = _mv_predictor(c, x, eps, dW, dt)
        x, dK = _project(op, p, dt, k, eps)
        rec.put(k + 1, x, dK)
    return rec.moved()


def solve_limit_ode(c: CoefficientSet, op: MonotoneOperator, xi, grid: TimeGrid) -> SolvedPath:
    """Deterministic limit path: drift evaluated at the Dirac mass of the state."""
    X, K, V = _simulate_mv(c, op, xi, 0.0, 1, grid, None, 0)
    return SolvedPath(grid, X[0], K[0], V[0])


def solve_mv_ensemble(c: CoefficientSet, op: MonotoneOperator, xi, eps: float,
                      n_particles: int, grid: TimeGrid, noise: NoisePlan | None,
                      replica: int = 0) -> Ensemble:
    """Interacting particle approximation of the noisy equation."""
    X, K, V = _simulate_mv(c, op, xi, float(eps), int(n_particles), grid, noise, replica)
    return Ensemble(grid, X, K, V)


def _law_functionals(c, law_source, grid):
    """Per-step ``(m_psi, m_chi)`` of an ensemble or of a Dirac limit path."""
    if isinstance(law_source, Ensemble):
        if not law_source.grid.same_as(grid):
            raise InvalidArgumentError("law source grid does not match")
        X = law_source.X
        return (np.mean(c.psi_of(X), axis=0), np.mean(c.chi_of(X), axis=0))
    if isinstance(law_source, SolvedPath):
        if not law_source.grid.same_as(grid):
            raise InvalidArgumentError("law source grid does not match")
        return c.psi_of(law_source.X), c.chi_of(law_source.X)
    raise InvalidArgumentError("law source must be an Ensemble or a SolvedPath")


def _control_values(h, grid, m):
    vals = np.asarray(getattr(h, "values", h), dtype=float)
    hgrid = getattr(h, "grid", None)
    if hgrid is not None and not hgrid.same_as(grid):
        raise InvalidArgumentError("control grid does not match")
    if vals.ndim == 1 and m == 1:
        vals = vals[:, None]
    if vals.shape != (grid.steps, m):
        raise InvalidArgumentError(
            f"control must have shape ({grid.steps}, {m}), got {vals.shape}")
    return vals


def solve_controlled(c: CoefficientSet, op: MonotoneOperator, xi, eps: float, u,
                     law_source, grid: TimeGrid, noise: NoisePlan | None = None,
                     replica: int = 0) -> SolvedPath:
    """Controlled equation with drift ``b + sigma u``.

    The measure argument at each step is read from ``law_source`` (the
    uncontrolled ensemble, or the limit path for the Dirac case) and never
    from the controlled path itself.
    """
    _check_dims(c, op)
    xi = _check_start(op, xi)
    if eps < 0:
        raise InvalidArgumentError("epsilon must be nonnegative")
    if eps > 0 and noise is None:
        raise InvalidArgumentError("a NoisePlan is required when epsilon > 0")
    hv = _control_values(u, grid, c.m)
    mpsi, mchi = _law_functionals(c, law_source, grid)
    n, dt = grid.steps, grid.dt
    x = xi.copy()
    rec = _Recorder(n, x.shape)
    rec.start(x)
    for k in range(n):
        drift = c.drift(x, mpsi[k]) + c.diffuse(x, mchi[k], hv[k])
        p = x + drift * dt
        if eps > 0:
            dW = noise.increments(k, 1, c.m, dt, replica)[0]
            p = p + math.sqrt(eps) * c.diffuse(x, mchi[k], dW)
        x, dK = _project(op, p, dt, k, eps)
        rec.put(k + 1, x, dK)
    return SolvedPath(grid, rec.X, rec.K, rec.V)


def _check_limit_path(X0: SolvedPath, grid: TimeGrid):
    if not X0.grid.same_as(grid):
        raise InvalidArgumentError("limit path grid does not match")


def solve_clt_pair(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, eps: float,
                   n_particles: int, grid: TimeGrid, noise: NoisePlan,
                   replica: int = 0) -> tuple[Ensemble, Ensemble]:
    """Fluctuation process and its linear limit under shared noise.

    The first ensemble is ``(X_hat - X0)/sqrt(eps)`` simulated directly in the
    rescaled variable, with the measure taken as the particle law of
    ``X0 + sqrt(eps) Z``.  The second is the linear limit driven by
    ``grad b(X0) z + E <D^L b(X0)(X0), Z>`` and ``sigma(X0, delta_X0)``.
    """
    _check_dims(c, op)
    _check_limit_path(X0, grid)
    if c.constants.get("L3") is None:
        raise InvalidArgumentError(f"preset {c.name!r} declares no L3 constant")
    if not eps > 0:
        raise InvalidArgumentError("epsilon must be positive")
    _require_zero_admissible(op)
    n, dt, d = grid.steps, grid.dt, c.d
    rs = math.sqrt(eps)
    z = np.zeros((n_particles, d))
    zl = np.zeros((n_particles, d))
    re, rl = _Recorder(n, z.shape), _Recorder(n, z.shape)
    re.start(z)
    rl.start(zl)
    for k in range(n):
        x0k = X0.X[k]
        b0k, _, chi0k = _limit_terms(c, x0k)
        dW = noise.increments(k, n_particles, c.m, dt, replica)
        pe = _rescaled_predictor(c, x0k, b0k, z, rs, 1.0, dW, dt)
        pl = _linearized_predictor(c, x0k, chi0k, zl, dW, dt)
        z, dKe = _project(op, pe, dt, k, eps)
        zl, dKl = _project(op, pl, dt, k, eps)
        re.put(k + 1, z, dKe)
        rl.put(k + 1, zl, dKl)
    return Ensemble(grid, *re.moved()), Ensemble(grid, *rl.moved())


def solve_mdp_pair(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, eps: float,
                   a: float, n_particles: int, grid: TimeGrid, noise: NoisePlan,
                   replica: int = 0) -> tuple[Ensemble, Ensemble]:
    """Moderate-deviation process and its frozen-measure approximation.

    Both are simulated in the variable ``(X - X0)/a`` with noise factor
    ``sqrt(eps)/a`` and identical Brownian increments.  The first uses the
    particle law of ``X0 + a Y``; the second freezes the measure at the Dirac
    mass of ``X0``.
    """
    _check_dims(c, op)
    _check_limit_path(X0, grid)
    if not 0.0 < a < 1.0:
        raise InvalidArgumentError("a(eps) must lie in (0, 1)")
    if not eps > 0:
        raise InvalidArgumentError("epsilon must be positive")
    _require_zero_admissible(op)
    n, dt, d = grid.steps, grid.dt, c.d
    nf = math.sqrt(eps) / a
    yb = np.zeros((n_particles, d))
    yt = np.zeros((n_particles, d))
    rb, rt = _Recorder(n, yb.shape), _Recorder(n, yt.shape)
    rb.start(yb)
    rt.start(yt)
    for k in range(n):
        x0k = X0.X[k]
        b0k, psi0k, chi0k = _limit_terms(c, x0k)
        dW = noise.increments(k, n_particles, c.m, dt, replica)
        pb = _rescaled_predictor(c, x0k, b0k, yb, a, nf, dW, dt)
        pt = _rescaled_predictor(c, x0k, b0k, yt, a, nf, dW, dt, frozen=(psi0k, chi0k))
        yb, dKb = _project(op, pb, dt, k, eps)
        yt, dKt = _project(op, pt, dt, k, eps)
        rb.put(k + 1, yb, dKb)
        rt.put(k + 1, yt, dKt)
    return Ensemble(grid, *rb.moved()), Ensemble(grid, *rt.moved())


MODES = ("LDP", "MDP")


def solve_skeleton_batch(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, H,
                         mode: str, record: bool = True):
    """Skeleton paths for a batch of controls ``H`` of shape ``(B, n, m)``.

    LDP mode starts at ``X0_0`` with coefficients frozen at the Dirac mass of
    the limit path; MDP mode starts at 0 with the linearized drift
    ``grad b(X0) y + sigma(X0, delta_X0) h``.  Returns states ``(B, n+1, d)``
    (or only the endpoints ``(B, d)`` when ``record`` is false) and, when
    recording, the compensators.
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}")
    H = np.asarray(H, dtype=float)
    grid = X0.grid
    n, dt, d = grid.steps, grid.dt, c.d
    if H.ndim != 3 or H.shape[1:] != (n, c.m):
        raise InvalidArgumentError(f"controls must have shape (B, {n}, {c.m})")
    nb = H.shape[0]
    if mode == "LDP":
        y = np.tile(X0.X[0], (nb, 1))
    else:
        _require_zero_admissible(op)
        y = np.zeros((nb, d))
    rec = _Recorder(n, y.shape) if record else None
    if rec is not None:
        rec.start(y)
    for k in range(n):
        x0k = X0.X[k]
        psi0k, chi0k = c.psi_of(x0k), c.chi_of(x0k)
        hk = H[:, k, :]
        if mode == "LDP":
            drift = c.drift(y, psi0k) + c.diffuse(y, chi0k, hk)
        else:
            drift = c.grad_apply(x0k, y) + c.diffuse(x0k, chi0k, hk)
        y, dK = _project(op, y + drift * dt, dt, k)
        if rec is not None:
            rec.put(k + 1, y, dK)
    if rec is None:
        return y
    return rec.moved()


def solve_skeleton(c: CoefficientSet, op: MonotoneOperator, X0: SolvedPath, h,
                   mode: str = "MDP", grid: TimeGrid | None = None) -> SolvedPath:
    """Deterministic controlled skeleton for a single control ``h``."""
    _check_dims(c, op)
    grid = grid or X0.grid
    _check_limit_path(X0, grid)
    hv = _control_values(h, grid, c.m)
    X, K, V = solve_skeleton_batch(c, op, X0, hv[None], mode)
    return SolvedPath(grid, X[0], K[0], V[0])
