"""Monte Carlo experiments for the deviation estimates.

Replicas are simulated in fixed blocks of ``NoisePlan.replicas_per_block``
independent particle systems; a block is the unit of parallel work, so the
per-replica statistics (and every reduction over them) are identical for any
number of workers.  All values of epsilon in a plan are advanced together on
the same Brownian increments (common random numbers), which keeps the fitted
slopes stable.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .coefficients import CoefficientSet, preset, preset_defaults
from .dynamics import (NoisePlan, TimeGrid, _limit_terms, _linearized_predictor,
                       _require_zero_admissible, _rescaled_predictor, a_of_eps,
                       solve_limit_ode)
from .errors import (InfeasibleTargetError, InsufficientDataError, InvalidArgumentError,
                     SolverDivergenceError)
from .monotone import MonotoneOperator, _resolvent, from_config
from .rate import rate_endpoint

__all__ = [
    "ExperimentPlan",
    "DeviationReport",
    "fit_loglog",
    "pairwise_sum",
    "wilson_interval",
    "run_convergence",
    "run_clt",
    "run_ldp_tail",
    "run_mdp_equivalence",
]

DEGENERATE_LEVEL = 1e-18
MIN_SLOPE_REPLICAS = 30


@dataclass(frozen=True)
class ExperimentPlan:
    preset: str = "linear-reflected"
    params: dict = field(default_factory=dict)
    operator: dict | None = None
    xi: tuple | None = None
    T: float = 1.0
    steps: int = 1000
    epsilons: tuple = (1e-1, 1e-2, 1e-3)
    replicas: int = 200
    particles: int = 2000
    moments: tuple = (1, 2)
    delta: float = 0.25
    kappa: float = 0.25
    seed: int = 0
    target: tuple | None = None
    radius: float = 0.1
    slope_band: tuple | None = None
    r2_min: float = 0.95
    rate_tol: float = 1e-6

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise InvalidArgumentError("epsilon grid must not be empty")
        if any(not (0.0 < e <= 1.0) for e in eps):
            raise InvalidArgumentError("epsilon values must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise InvalidArgumentError("epsilon grid must be strictly decreasing")
        if not 0.0 < self.kappa < 0.5:
            raise InvalidArgumentError("kappa must lie in the open interval (0, 1/2)")
        if self.replicas < 1 or self.particles < 1:
            raise InvalidArgumentError("replicas and particles must be positive")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "moments", tuple(int(p) for p in self.moments))
        if self.xi is not None:
            object.__setattr__(self, "xi", tuple(float(v) for v in np.atleast_1d(self.xi)))
        if self.target is not None:
            object.__setattr__(self, "target",
                               tuple(float(v) for v in np.atleast_1d(self.target)))
        TimeGrid(self.T, self.steps)

    def coefficients(self) -> CoefficientSet:
        return preset(self.preset, **self.params)

    def operator_obj(self) -> MonotoneOperator:
        cfg = self.operator or preset_defaults(self.preset)["operator"]
        return from_config(cfg, d=self.coefficients().d)

    def initial(self) -> np.ndarray:
        xi = self.xi if self.xi is not None else preset_defaults(self.preset)["xi"]
        return np.asarray(xi, dtype=float)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.steps)

    def noise(self) -> NoisePlan:
        return NoisePlan(int(self.seed))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeviationReport:
    experiment: str
    epsilons: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    censored: np.ndarray
    slope: float | None = None
    intercept: float | None = None
    r2: float | None = None
    passed: bool = False
    verdict: str = ""
    label: str = ""
    details: dict = field(default_factory=dict)
    runtime: float = 0.0

    def summary(self) -> dict:
        """JSON-ready summary without the runtime (kept out of output files)."""
        def num(v):
            if v is None:
                return None
            v = float(v)
            return v if math.isfinite(v) else repr(v)
        return {
            "experiment": self.experiment,
            "label": self.label,
            "passed": bool(self.passed),
            "verdict": self.verdict,
            "slope": num(self.slope),
            "intercept": num(self.intercept),
            "r2": num(self.r2),
            "points": [
                {"epsilon": float(e), "estimate": num(v), "stderr": num(s),
                 "censored": bool(cz)}
                for e, v, s, cz in zip(self.epsilons, self.estimates, self.stderr,
                                       self.censored)
            ],
            "details": self.details,
        }


# --- statistics -------------------------------------------------------------

def pairwise_sum(x, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` by a fixed balanced binary tree."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, -1)
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    while x.shape[-1] > 1:
        n = x.shape[-1]
        half = n // 2
        paired = x[..., 0:2 * half:2] + x[..., 1:2 * half:2]
        x = np.concatenate([paired, x[..., 2 * half:]], axis=-1) if n % 2 else paired
    return x[..., 0]


def _mean_stderr(samples):
    """Replica mean and its standard error along the last axis."""
    R = samples.shape[-1]
    mean = pairwise_sum(samples) / R
    if R < 2:
        return mean, np.full_like(mean, np.nan)
    var = pairwise_sum((samples - mean[..., None]) ** 2) / (R - 1)
    return mean, np.sqrt(var / R)


def wilson_interval(k: int, n: int, confidence: float = 0.6827) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence,
                                                       method="wilson")
    return float(ci.low), float(ci.high)


def fit_loglog(points) -> tuple[float, float, float]:
    """OLS fit of ``log statistic`` on ``log epsilon``: ``(slope, intercept, r2)``."""
    pts = [(float(e), float(v)) for e, v in points
           if e > 0 and v is not None and math.isfinite(v) and v > 0]
    if len(pts) < 3:
        raise InsufficientDataError(
            f"log-log fit needs at least 3 positive points, got {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    res = stats.linregress(x, y)
    r2 = float(res.rvalue ** 2) if np.ptp(y) > 0 else 1.0
    return float(res.slope), float(res.intercept), r2


# --- block kernels (module level so they pickle) ----------------------------

def _blocks(plan: ExperimentPlan, m: int):
    per = NoisePlan.replicas_per_block(plan.particles, m)
    out, start, b = [], 0, 0
    while start < plan.replicas:
        size = min(per, plan.replicas - start)
        out.append((b, size))
        start += size
        b += 1
    return out


def _setup(plan):
    c = plan.coefficients()
    op = plan.operator_obj()
    if c.d != op.dim:
        raise InvalidArgumentError(f"preset has d={c.d}, operator has d={op.dim}")
    return c, op, plan.grid(), plan.noise()


def _col(v):
    return np.asarray(v, dtype=float)[:, None, None, None]


def _project_all(op, p, dt, step, eps):
    if not math.isfinite(p.sum()):
        bad = ~np.isfinite(p).reshape(len(eps), -1).all(axis=1)
        raise SolverDivergenceError(step, float(eps[np.argmax(bad)]), "non-finite predictor")
    x = _resolvent(op, dt, p)
    return x, p - x


def _mv_step(c, op, x, sq, dW, dt, k, eps):
    mpsi = c.mean_psi(x) if c._has_B else None
    p = x + c.drift(x, mpsi) * dt
    mchi = c.mean_chi(x) if c._has_S2 else None
    p = p + sq * c.diffuse(x, mchi, dW)
    return _project_all(op, p, dt, k, eps)[0]


def _task_convergence(plan, X0, block):
    b, C = block
    c, op, grid, noise = _setup(plan)
    eps = np.asarray(plan.epsilons)
    n, dt, N = grid.steps, grid.dt, plan.particles
    sq = _col(np.sqrt(eps))
    x = np.broadcast_to(X0[0], (len(eps), C, N, c.d)).copy()
    sup = np.zeros((len(eps), C, N))
    for k in range(n):
        dW = noise.block(k, b, C, N, c.m, dt)
        x = _mv_step(c, op, x, sq, dW, dt, k, eps)
        np.maximum(sup, np.sum((x - X0[k + 1]) ** 2, axis=-1), out=sup)
    return sup.mean(axis=-1)


def _task_tail(plan, X0, block):
    b, C = block
    c, op, grid, noise = _setup(plan)
    eps = np.asarray(plan.epsilons)
    n, dt, N = grid.steps, grid.dt, plan.particles
    sq = _col(np.sqrt(eps))
    x = np.broadcast_to(X0[0], (len(eps), C, N, c.d)).copy()
    for k in range(n):
        dW = noise.block(k, b, C, N, c.m, dt)
        x = _mv_step(c, op, x, sq, dW, dt, k, eps)
    dist = np.sqrt(np.sum((x - np.asarray(plan.target)) ** 2, axis=-1))
    return np.sum(dist <= plan.radius, axis=-1)


def _task_clt(plan, X0, block):
    b, C = block
    c, op, grid, noise = _setup(plan)
    eps = np.asarray(plan.epsilons)
    n, dt, N, d = grid.steps, grid.dt, plan.particles, c.d
    rs = _col(np.sqrt(eps))
    z = np.zeros((len(eps), C, N, d))
    zl = np.zeros((C, N, d))
    sup = np.zeros((len(eps), C, N))
    for k in range(n):
        x0k = X0[k]
        b0k, _, chi0k = _limit_terms(c, x0k)
        dW = noise.block(k, b, C, N, c.m, dt)
        pe = _rescaled_predictor(c, x0k, b0k, z, rs, 1.0, dW, dt)
        pl = _linearized_predictor(c, x0k, chi0k, zl, dW, dt)
        z = _project_all(op, pe, dt, k, eps)[0]
        zl = _project_all(op, pl[None], dt, k, eps[:1])[0][0]
        np.maximum(sup, np.sum((z - zl) ** 2, axis=-1), out=sup)
    return np.stack([np.mean(sup ** p, axis=-1) for p in plan.moments])


def _task_mdp(plan, X0, block):
    b, C = block
    c, op, grid, noise = _setup(plan)
    eps = np.asarray(plan.epsilons)
    n, dt, N, d = grid.steps, grid.dt, plan.particles, c.d
    a = np.array([a_of_eps(e, plan.kappa) for e in eps])
    ac, nf = _col(a), _col(np.sqrt(eps) / a)
    yb = np.zeros((len(eps), C, N, d))
    yt = np.zeros_like(yb)
    sup = np.zeros((len(eps), C, N))
    for k in range(n):
        x0k = X0[k]
        b0k, psi0k, chi0k = _limit_terms(c, x0k)
        dW = noise.block(k, b, C, N, c.m, dt)
        pb = _rescaled_predictor(c, x0k, b0k, yb, ac, nf, dW, dt)
        pt = _rescaled_predictor(c, x0k, b0k, yt, ac, nf, dW, dt, frozen=(psi0k, chi0k))
        yb = _project_all(op, pb, dt, k, eps)[0]
        yt = _project_all(op, pt, dt, k, eps)[0]
        np.maximum(sup, np.sqrt(np.sum((yb - yt) ** 2, axis=-1)), out=sup)
    return np.sum(sup >= plan.delta, axis=-1), sup.max(axis=(-1, -2))


_TASKS = {
    "convergence": _task_convergence,
    "tail": _task_tail,
    "clt": _task_clt,
    "mdp": _task_mdp,
}


def _call(args):
    name, plan, X0, block = args
    return _TASKS[name](plan, X0, block)


def _run_blocks(name, plan, X0, m, workers):
    jobs = [(name, plan, X0, blk) for blk in _blocks(plan, m)]
    workers = max(1, int(workers or 1))
    if workers == 1 or len(jobs) == 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(_call, jobs))


def _limit_path(plan):
    c, op, grid, _ = _setup(plan)
    return c, op, solve_limit_ode(c, op, plan.initial(), grid)


def _require_replicas(plan):
    if plan.replicas < MIN_SLOPE_REPLICAS:
        raise InvalidArgumentError(
            f"slope experiments need at least {MIN_SLOPE_REPLICAS} replicas")


def _slope_report(name, eps, mean, se, band, r2_min, label="", details=None):
    degenerate = bool(np.all(np.abs(mean) <= DEGENERATE_LEVEL))
    rep = DeviationReport(name, np.asarray(eps), mean, se, np.zeros(len(eps), bool),
                          label=label, details=dict(details or {}))
    rep.details["slope_band"] = list(band)
    rep.details["r2_min"] = r2_min
    if degenerate:
        rep.passed, rep.verdict = True, "degenerate"
        return rep
    try:
        rep.slope, rep.intercept, rep.r2 = fit_loglog(zip(eps, mean))
    except InsufficientDataError:
        rep.passed, rep.verdict = False, "insufficient-data"
        return rep
    rep.passed = band[0] <= rep.slope <= band[1] and rep.r2 >= r2_min
    rep.verdict = "pass" if rep.passed else "fail"
    return rep


# --- experiments --------------------------------------------------------------

def run_convergence(plan: ExperimentPlan, workers: int = 1) -> DeviationReport:
    """``E sup_t |X^eps_t - X0_t|^2`` per epsilon, expected log-log slope 1."""
    t0 = time.perf_counter()
    _require_replicas(plan)
    c, op, X0 = _limit_path(plan)
    parts = _run_blocks("convergence", plan, X0.X, c.m, workers)
    samples = np.concatenate(parts, axis=-1)
    mean, se = _mean_stderr(samples)
    band = plan.slope_band or (0.7, 1.3)
    rep = _slope_report("convergence", plan.epsilons, mean, se, band, plan.r2_min)
    rep.runtime = time.perf_counter() - t0
    return rep


def clt_band(p: int) -> tuple[float, float]:
    tol = 0.1 + 0.2 * p
    return (p - tol, p + tol)


def run_clt(plan: ExperimentPlan, workers: int = 1) -> list[DeviationReport]:
    """``E sup_t |Z^eps_t - Z_t|^(2p)`` per epsilon and p, expected slope p."""
    t0 = time.perf_counter()
    _require_replicas(plan)
    c, op, X0 = _limit_path(plan)
    if c.constants.get("L3") is None:
        raise InvalidArgumentError(f"preset {c.name!r} declares no L3 constant")
    _require_zero_admissible(op)
    parts = _run_blocks("clt", plan, X0.X, c.m, workers)
    samples = np.concatenate(parts, axis=-1)  # (P, E, R)
    reports = []
    for i, p in enumerate(plan.moments):
        mean, se = _mean_stderr(samples[i])
        band = tuple(plan.slope_band) if plan.slope_band else clt_band(p)
        reports.append(_slope_report("clt", plan.epsilons, mean, se, band, plan.r2_min,
                                     label=f"p={p}", details={"p": p}))
    runtime = time.perf_counter() - t0
    for r in reports:
        r.runtime = runtime
    return reports


def _tail_points(eps, hits, total):
    est = np.empty(len(eps))
    se = np.empty(len(eps))
    cens = np.zeros(len(eps), bool)
    for i, (e, k) in enumerate(zip(eps, hits)):
        if k == 0:
            cens[i] = True
            _, hi = wilson_interval(0, total, 0.95)
            est[i], se[i] = e * math.log(hi), math.nan
        else:
            lo, hi = wilson_interval(k, total)
            phat = k / total
            est[i] = e * math.log(phat)
            se[i] = e * 0.5 * (hi - lo) / phat
    return est, se, cens


def _ball_point(x0T, z, r):
    diff = x0T - z
    dist = float(np.linalg.norm(diff))
    if dist <= r:
        return x0T.copy()
    return z + r * diff / dist


def run_ldp_tail(plan: ExperimentPlan, target=None, radius: float | None = None,
                 workers: int = 1) -> DeviationReport:
    """Hit frequencies of ``{|X^eps_T - z| <= r}`` against the rate-function value.

    Zero hits give a censored point whose estimate is the 95% Wilson upper
    bound.  The comparison value is ``-I`` at the point of the ball nearest
    to the limit endpoint.
    """
    t0 = time.perf_counter()
    z = target if target is not None else plan.target
    if z is None:
        raise InvalidArgumentError("a tail target is required")
    r = plan.radius if radius is None else float(radius)
    if r <= 0:
        raise InvalidArgumentError("radius must be positive")

    plan = replace(plan, target=tuple(np.atleast_1d(np.asarray(z, dtype=float))), radius=r)
    c, op, X0 = _limit_path(plan)
    zt = np.asarray(plan.target)
    if zt.shape != (c.d,):
        raise InvalidArgumentError(f"target must have dimension {c.d}")
    parts = _run_blocks("tail", plan, X0.X, c.m, workers)
    hits = np.concatenate(parts, axis=-1).sum(axis=-1)
    total = plan.replicas * plan.particles
    eps = np.asarray(plan.epsilons)
    est, se, cens = _tail_points(eps, hits, total)
    point = _ball_point(X0.X[-1], zt, r)
    try:
        rr = rate_endpoint(c, op, X0, "LDP", point, tol=plan.rate_tol)
        rate, conv = rr.value, rr.converged
    except InfeasibleTargetError:
        rate, conv = math.inf, True
    unc = ~cens
    gaps = np.abs(est[unc] + rate) if math.isfinite(rate) else np.array([])
    approaching = bool(unc.any() and math.isfinite(rate)
                       and np.all(np.diff(gaps) <= 1e-12))
    rep = DeviationReport("ldp-tail", eps, est, se, cens, passed=approaching,
                          verdict="approaching" if approaching else "not-approaching")
    rep.details = {
        "hits": [int(h) for h in hits],
        "samples": int(total),
        "target": [float(v) for v in zt],
        "radius": r,
        "rate_point": [float(v) for v in point],
        "rate": rate if math.isfinite(rate) else "inf",
        "rate_converged": bool(conv),
        "minus_rate": -rate if math.isfinite(rate) else "-inf",
    }
    rep.runtime = time.perf_counter() - t0
    return rep


def run_mdp_equivalence(plan: ExperimentPlan, delta: float | None = None,
                        workers: int = 1) -> DeviationReport:
    """Frequencies of ``sup_t |Ybar - Ytilde| >= delta`` under shared noise.

    The trend check passes when ``eps log q`` is strictly decreasing over the
    uncensored points with Spearman correlation against ``-log eps`` of at
    most -0.8.  Fewer than two uncensored points pass vacuously.
    """
    t0 = time.perf_counter()
    if delta is not None:
        plan = replace(plan, delta=float(delta))
    if plan.delta <= 0:
        raise InvalidArgumentError("delta must be positive")
    c, op, X0 = _limit_path(plan)
    _require_zero_admissible(op)
    parts = _run_blocks("mdp", plan, X0.X, c.m, workers)
    hits = np.concatenate([p[0] for p in parts], axis=-1).sum(axis=-1)
    max_gap = np.max(np.stack([p[1] for p in parts]), axis=0)
    total = plan.replicas * plan.particles
    eps = np.asarray(plan.epsilons)
    est, se, cens = _tail_points(eps, hits, total)
    unc = ~cens
    rho = None
    if unc.sum() < 2:
        passed, verdict = True, "vacuous"
    else:
        decreasing = bool(np.all(np.diff(est[unc]) < 0))
        if np.ptp(est[unc]) > 0:
            rho = float(stats.spearmanr(est[unc], -np.log(eps[unc])).statistic)
        passed = decreasing and rho is not None and rho <= -0.8
        verdict = "pass" if passed else "fail"
    rep = DeviationReport("mdp-equiv", eps, est, se, cens, passed=passed, verdict=verdict)
    rep.details = {
        "hits": [int(h) for h in hits],
        "samples": int(total),
        "delta": plan.delta,
        "kappa": plan.kappa,
        "max_sup_gap": [float(v) for v in max_gap],
        "spearman": rho,
        "trend_check": True,
    }
    rep.runtime = time.perf_counter() - t0
    return rep
