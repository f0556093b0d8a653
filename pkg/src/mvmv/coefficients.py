"""Parametric drift/diffusion families with analytic derivatives.

The drift is ``b(x, mu) = M x + c + G g(x) + B m_psi(mu)`` and the diffusion
``sigma(x, mu) = S0 + diag(s(x)) S1 + diag(m_chi(mu)) S2`` where ``g, psi, s,
chi`` act componentwise and ``m_f(mu) = int f(y) mu(dy)``.  Within this family
the space gradient ``grad b = M + G diag(g'(x))`` and the Lions derivative
``D^L b(x, mu)(y) = B diag(psi'(y))`` are available in closed form, which is
what makes the hypothesis constants checkable.

Matrix norms are Frobenius norms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .measures import EmpiricalMeasure, second_moment, transport

__all__ = [
    "CoefficientSet",
    "HypothesisReport",
    "PRESETS",
    "preset",
    "preset_defaults",
    "eval_b",
    "eval_sigma",
    "grad_b",
    "lions_derivative_b",
    "mean_field_pairing",
    "lions_fd_check",
    "validate_hypotheses",
]


def _zero(x):
    return np.zeros_like(x)


def _one(x):
    return np.ones_like(x)


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


# name -> (f, f', f'', sup|f'|, sup|f''|)
FUNCTIONS = {
    "zero": (_zero, _zero, _zero, 0.0, 0.0),
    "id": (lambda x: x, _one, _zero, 1.0, 0.0),
    "square": (lambda x: x * x, lambda x: 2.0 * x, lambda x: 2.0 * np.ones_like(x),
               math.inf, 2.0),
    "tanh": (np.tanh, _sech2, lambda x: -2.0 * np.tanh(x) * _sech2(x),
             1.0, 4.0 / (3.0 * math.sqrt(3.0))),
    "sin": (np.sin, np.cos, lambda x: -np.sin(x), 1.0, 1.0),
}

HYPOTHESES = ("H1", "H2", "H3", "H3p", "H4")
CONSTANT_NAMES = {"H1": "L1", "H2": "L2", "H3": "L3", "H3p": "L3p", "H4": "L4"}


def _fn(name):
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown componentwise function {name!r}") from None


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Immutable drift/diffusion pair with declared hypothesis constants.

    ``constants`` maps ``L1, L2, L3, L3p, L4`` to floats; a missing entry means
    the family makes no claim about the corresponding hypothesis.
    """

    M: np.ndarray
    c: np.ndarray
    G: np.ndarray
    g: str
    B: np.ndarray
    psi: str
    S0: np.ndarray
    S1: np.ndarray
    s: str
    S2: np.ndarray
    chi: str
    constants: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        d = M.shape[0]
        S0 = np.asarray(self.S0, dtype=float).reshape(d, -1)
        m = S0.shape[1]
        vals = dict(
            M=M,
            c=np.asarray(self.c, dtype=float).reshape(d),
            G=np.asarray(self.G, dtype=float).reshape(d, d),
            B=np.asarray(self.B, dtype=float).reshape(d, d),
            S0=S0,
            S1=np.asarray(self.S1, dtype=float).reshape(d, m),
            S2=np.asarray(self.S2, dtype=float).reshape(d, m),
        )
        if M.shape != (d, d):
            raise InvalidArgumentError("drift matrix must be square")
        for k, v in vals.items():
            if not np.all(np.isfinite(v)):
                raise InvalidArgumentError(f"coefficient {k} must be finite")
            object.__setattr__(self, k, v)
        for nm in (self.g, self.psi, self.s, self.chi):
            _fn(nm)
        object.__setattr__(self, "constants", dict(self.constants))
        # nonzero flags and transposes, so hot loops skip absent terms cheaply
        for k in ("G", "B", "S1", "S2"):
            object.__setattr__(self, "_has_" + k, bool(np.any(vals[k])))
        for k in ("M", "G", "B", "S0", "S1", "S2"):
            object.__setattr__(self, "_" + k + "t", np.ascontiguousarray(vals[k].T))

    @property
    def d(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.S0.shape[1]

    @property
    def sigma_is_zero(self) -> bool:
        return not (np.any(self.S0) or np.any(self.S1) or np.any(self.S2))

    @property
    def has_interaction(self) -> bool:
        return bool(np.any(self.B)) or bool(np.any(self.S2))

    def with_params(self, **kw) -> "CoefficientSet":
        return replace(self, **kw)

    # --- vectorized evaluations; x has shape (..., d) -----------------------
    def psi_of(self, y):
        return _fn(self.psi)[0](y)

    def chi_of(self, y):
        return _fn(self.chi)[0](y)

    def mean_psi(self, x, axis=-2):
        return np.mean(self.psi_of(x), axis=axis, keepdims=True)

    def mean_chi(self, x, axis=-2):
        return np.mean(self.chi_of(x), axis=axis, keepdims=True)

    def drift(self, x, mpsi):
        """``b`` given the measure functional value ``mpsi = m_psi(mu)``."""
        out = x @ self._Mt + self.c
        if self._has_G:
            out = out + _fn(self.g)[0](x) @ self._Gt
        if self._has_B:
            out = out + mpsi @ self._Bt
        return out

    def diffuse(self, x, mchi, v):
        """``sigma(x, mu) v`` for a vector ``v`` in R^m (noise or control)."""
        out = v @ self._S0t
        if self._has_S1:
            out = out + _fn(self.s)[0](x) * (v @ self._S1t)
        if self._has_S2:
            out = out + mchi * (v @ self._S2t)
        return out

    def sigma(self, x, mchi):
        sx = _fn(self.s)[0](np.asarray(x, dtype=float))
        return (self.S0 + sx[..., :, None] * self.S1
                + np.asarray(mchi, dtype=float)[..., :, None] * self.S2)

    def jacobian(self, x):
        gp = _fn(self.g)[1](np.asarray(x, dtype=float))
        return self.M + self.G * gp[..., None, :]

    def grad_apply(self, x, z):
        """``grad b(x) z`` without forming the Jacobian."""
        out = z @ self._Mt
        if self._has_G:
            out = out + (_fn(self.g)[1](x) * z) @ self._Gt
        return out

    def lions_kernel(self, y):
        pp = _fn(self.psi)[1](np.asarray(y, dtype=float))
        return self.B * pp[..., None, :]

    def lions_apply(self, y, z):
        """``D^L b(., .)(y) z`` (independent of the base point in this family)."""
        return (_fn(self.psi)[1](y) * z) @ self._Bt


def _as_point(c, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (c.d,):
        raise InvalidArgumentError(f"point must have dimension {c.d}")
    return x


def _measure_fn(mu: EmpiricalMeasure, f):
    return mu.weights @ f(mu.points)


def _check_measure(c, mu):
    if mu.dim != c.d:
        raise InvalidArgumentError(f"measure has dimension {mu.dim}, expected {c.d}")


def eval_b(c: CoefficientSet, x, mu: EmpiricalMeasure) -> np.ndarray:
    x = _as_point(c, x)
    _check_measure(c, mu)
    return c.drift(x, _measure_fn(mu, c.psi_of))


def eval_sigma(c: CoefficientSet, x, mu: EmpiricalMeasure) -> np.ndarray:
    x = _as_point(c, x)
    _check_measure(c, mu)
    return c.sigma(x, _measure_fn(mu, c.chi_of))


def grad_b(c: CoefficientSet, x, mu: EmpiricalMeasure | None = None) -> np.ndarray:
    return c.jacobian(_as_point(c, x))


def lions_derivative_b(c: CoefficientSet, x=None, mu=None):
    """Return the kernel ``y -> D^L b(x, mu)(y) = B diag(psi'(y))``."""
    def kernel(y):
        return c.lions_kernel(np.atleast_1d(np.asarray(y, dtype=float)))
    return kernel


def mean_field_pairing(c: CoefficientSet, x, ensemble_x, ensemble_z) -> np.ndarray:
    """``(1/n) sum_j D^L b(x, mu)(X_j) Z_j`` with ``mu`` the law of ``ensemble_x``."""
    X = np.asarray(ensemble_x, dtype=float).reshape(-1, c.d)
    Z = np.asarray(ensemble_z, dtype=float).reshape(-1, c.d)
    if X.shape != Z.shape:
        raise InvalidArgumentError("ensembles must have equal length")
    return np.mean(c.lions_apply(X, Z), axis=0)


def lions_fd_check(c: CoefficientSet, X, Y, component: int = 0, h: float = 1e-2,
                   levels: int = 4):
    """Compare a Richardson-extrapolated difference quotient of
    ``f(L_{X + h Y}) = (B m_psi)_component`` with the analytic pairing
    ``E <D^L f(mu)(X), Y>``.

    Returns ``(extrapolated, analytic, kernel_norm * sqrt(E|Y|^2))``; the last
    entry bounds ``|analytic|``.
    """
    X = np.asarray(X, dtype=float).reshape(-1, c.d)
    Y = np.asarray(Y, dtype=float).reshape(-1, c.d)

    def f(pts):
        return (c.B @ np.mean(c.psi_of(pts), axis=0))[component]

    base = f(X)
    table = [[(f(X + (h / 2 ** i) * Y) - base) / (h / 2 ** i)] for i in range(levels)]
    for j in range(1, levels):
        for i in range(j, levels):
            prev, cur = table[i - 1][j - 1], table[i][j - 1]
            table[i].append(cur + (cur - prev) / (2 ** j - 1))
    extrapolated = table[-1][-1]
    analytic = float(np.mean(c.lions_apply(X, Y)[:, component]))
    kern = c.lions_kernel(X)[:, component, :]
    kernel_norm = math.sqrt(float(np.mean(np.sum(kern ** 2, axis=-1))))
    bound = kernel_norm * math.sqrt(float(np.mean(np.sum(Y ** 2, axis=-1))))
    return float(extrapolated), analytic, bound


@dataclass
class HypothesisReport:
    """Worst observed-to-declared ratio per hypothesis over random probes."""

    ratios: dict
    checks: dict
    probes: int
    radius: float
    declared: dict
    notes: list = field(default_factory=list)

    TOL = 1e-6

    @property
    def passed(self) -> bool:
        return all(r <= 1.0 + self.TOL for r in self.ratios.values())

    @property
    def flags(self) -> dict:
        return {h: bool(r <= 1.0 + self.TOL) for h, r in self.ratios.items()}

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else str(v)
        return {
            "passed": self.passed,
            "probes": self.probes,
            "probe_radius": self.radius,
            "declared": self.declared,
            "ratios": {k: num(v) for k, v in self.ratios.items()},
            "pass": self.flags,
            "checks": {k: num(v) for k, v in self.checks.items()},
            "notes": self.notes,
        }


def _ratio(lhs, L, scale):
    # observed / declared with 0/0 := 0
    if lhs <= 0:
        return 0.0
    denom = L * scale
    if denom <= 0:
        return math.inf
    return lhs / denom


def _rand_ball(rng, radius, d, size=None):
    shape = (d,) if size is None else (size, d)
    u = rng.normal(size=shape)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    r = radius * rng.random(() if size is None else (size, 1)) ** (1.0 / d)
    return u * r


def _probe_pair(rng, c, radius):
    d = c.d
    n = int(rng.integers(1, 17))
    x1 = _rand_ball(rng, radius, d)
    p1 = _rand_ball(rng, radius, d, n)
    if rng.random() < 0.5:
        # local perturbation probes approach the Lipschitz supremum
        step = 10.0 ** rng.uniform(-4, -1)
        x2 = x1 + step * rng.normal(size=d)
        p2 = p1 + step * rng.normal(size=(n, d))
        scale = radius / max(radius, np.linalg.norm(x2), np.abs(p2).max())
        x2, p2 = x2 * scale, p2 * scale
    else:
        x2 = _rand_ball(rng, radius, d)
        p2 = _rand_ball(rng, radius, d, n)
    w = np.full(n, 1.0 / n)
    return x1, EmpiricalMeasure(p1, w), x2, EmpiricalMeasure(p2, w), p1, p2


def validate_hypotheses(c: CoefficientSet, n: int, rng: np.random.Generator,
                        radius: float = 2.0) -> HypothesisReport:
    """Probe the declared hypothesis constants of ``c``.

    Probes ``(x, mu)`` are drawn in the ball of the given radius, with ``mu``
    uniform on at most 16 atoms.  Only hypotheses with a declared constant are
    evaluated.  Failure is a report outcome, never an exception.
    """
    if n < 100:
        raise InvalidArgumentError("at least 100 probes are required")
    K = c.constants
    active = [h for h in HYPOTHESES if K.get(CONSTANT_NAMES[h]) is not None]
    checks = {}

    def record(key, value):
        checks[key] = max(checks.get(key, 0.0), value)

    fro = np.linalg.norm
    for _ in range(n):
        x1, mu1, x2, mu2, p1, p2 = _probe_pair(rng, c, radius)
        b1, b2 = eval_b(c, x1, mu1), eval_b(c, x2, mu2)
        s1, s2 = eval_sigma(c, x1, mu1), eval_sigma(c, x2, mu2)
        dx = float(np.linalg.norm(x1 - x2))
        w2_ = transport(mu1, mu2).value
        m2 = math.sqrt(second_moment(mu1))
        g1, g2 = c.jacobian(x1), c.jacobian(x2)
        kern1 = c.lions_kernel(p1)
        lions_norm = math.sqrt(float(np.mean(np.sum(kern1 ** 2, axis=(-2, -1)))))
        growth = 1.0 + float(np.linalg.norm(x1)) + m2
        if "H1" in active:
            L = K["L1"]
            record("H1.b_growth", _ratio(float(np.linalg.norm(b1)), L, growth))
            record("H1.sigma_bound", _ratio(float(fro(s1)), L, 1.0))
        if "H2" in active:
            L = K["L2"]
            rhs = dx ** 2 + w2_ ** 2
            record("H2.b_monotone", _ratio(2.0 * float(np.dot(x1 - x2, b1 - b2)), L, rhs))
            record("H2.sigma_lipschitz", _ratio(float(fro(s1 - s2)) ** 2, L, rhs))
        for h, key in (("H3", "L3"), ("H3p", "L3p")):
            if h not in active:
                continue
            L = K[key]
            record(f"{h}.grad_b", _ratio(float(fro(g1)), L, 1.0))
            record(f"{h}.lions_norm", _ratio(lions_norm, L, 1.0))
            b00 = c.drift(np.zeros(c.d), c.psi_of(np.zeros(c.d)))
            record(f"{h}.b_origin", _ratio(float(np.linalg.norm(b00)), L, 1.0))
            record(f"{h}.sigma_lipschitz", _ratio(float(fro(s1 - s2)), L, dx + w2_))
            if h == "H3":
                record("H3.sigma_growth", _ratio(float(fro(s1)), L, growth))
            else:
                record("H3p.sigma_bound", _ratio(float(fro(s1)), L, 1.0))
        if "H4" in active:
            L = K["L4"]
            record("H4.grad_b_lipschitz", _ratio(float(fro(g1 - g2)), L, dx + w2_))
            # joint laws: (p1, p2) paired atom by atom, phi an independent field
            phi = rng.normal(size=p1.shape)
            pair1 = np.mean(c.lions_apply(p1, phi), axis=0)
            pair2 = np.mean(c.lions_apply(p2, phi), axis=0)
            l2xy = math.sqrt(float(np.mean(np.sum((p1 - p2) ** 2, axis=-1))))
            l2phi = math.sqrt(float(np.mean(np.sum(phi ** 2, axis=-1))))
            record("H4.lions_lipschitz", _ratio(float(np.linalg.norm(pair1 - pair2)), L,
                                                (dx + w2_ + l2xy) * l2phi))
    ratios = {h: max((v for k, v in checks.items() if k.split(".")[0] == h), default=0.0)
              for h in active}
    notes = []
    if "H4" in active:
        notes.append("H4 certified only within the parametric family: "
                     "L4 >= ||B|| * Lip(psi') bounds the pairing difference")
    return HypothesisReport(ratios, checks, n, float(radius),
                            {CONSTANT_NAMES[h]: K[CONSTANT_NAMES[h]] for h in active}, notes)


def _eye(d, v):
    return v * np.eye(d)


def _linear_reflected(d=1):
    return CoefficientSet(
        M=_eye(d, -1.0), c=np.zeros(d), G=np.zeros((d, d)), g="zero",
        B=_eye(d, 0.5), psi="id",
        S0=_eye(d, 0.4), S1=np.zeros((d, d)), s="zero", S2=np.zeros((d, d)), chi="zero",
        constants={"L1": 1.4, "L2": 2.0, "L3": 1.0, "L3p": 1.0, "L4": 0.0},
        name="linear-reflected",
    )


def _tanh_smooth(d=2):
    return CoefficientSet(
        M=_eye(d, -1.0), c=np.zeros(d), G=_eye(d, 0.5), g="tanh",
        B=_eye(d, 0.5), psi="tanh",
        S0=_eye(d, 0.3), S1=_eye(d, 0.1), s="tanh", S2=_eye(d, 0.1), chi="tanh",
        constants={"L1": 1.5, "L2": 1.0, "L3": 1.5, "L3p": 1.5, "L4": 0.5},
        name="tanh-smooth",
    )


def _clt_quadratic(d=1):
    return CoefficientSet(
        M=_eye(d, -1.0), c=np.zeros(d), G=np.zeros((d, d)), g="zero",
        B=_eye(d, 0.25), psi="square",
        S0=_eye(d, 0.4), S1=np.zeros((d, d)), s="zero", S2=np.zeros((d, d)), chi="zero",
        constants={"L1": 1.0, "L2": 2.0, "L3": 1.0, "L3p": 1.0, "L4": 0.5},
        name="clt-quadratic",
    )


def _brownian(d=1):
    return CoefficientSet(
        M=np.zeros((d, d)), c=np.zeros(d), G=np.zeros((d, d)), g="zero",
        B=np.zeros((d, d)), psi="zero",
        S0=np.eye(d), S1=np.zeros((d, d)), s="zero", S2=np.zeros((d, d)), chi="zero",
        constants={"L1": 1.0, "L2": 1.0, "L3": 1.0, "L3p": 1.0, "L4": 0.0},
        name="brownian",
    )


PRESETS = {
    "linear-reflected": (_linear_reflected,
                         {"operator": {"kind": "box", "lower": [0.0], "upper": [None]},
                          "xi": [1.0], "probe_radius": 2.0}),
    "tanh-smooth": (_tanh_smooth,
                    {"operator": {"kind": "ball", "center": [0.0, 0.0], "radius": 2.0},
                     "xi": [1.0, -0.5], "probe_radius": 3.0}),
    "clt-quadratic": (_clt_quadratic,
                      {"operator": {"kind": "box", "lower": [0.0], "upper": [None]},
                       "xi": [1.0], "probe_radius": 2.0}),
    "brownian": (_brownian,
                 {"operator": {"kind": "zero", "dim": 1}, "xi": [0.0], "probe_radius": 2.0}),
}

_MATRIX_FIELDS = ("M", "G", "B", "S0", "S1", "S2")


def preset(name: str, **overrides) -> CoefficientSet:
    """Build a shipped preset, optionally overriding fields.

    Scalars given for matrix fields are expanded to ``scalar * I``.
    ``constants`` entries are merged into the declared constants.
    """
    try:
        factory, _ = PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base = factory()
    kw = {}
    for k, v in overrides.items():
        if k == "constants":
            consts = dict(base.constants)
            consts.update(v)
            kw["constants"] = consts
        elif k in _MATRIX_FIELDS and np.ndim(v) == 0:
            kw[k] = float(v) * np.eye(base.d, base.m if k.startswith("S") else base.d)
        elif hasattr(base, k) and k not in ("name",):
            kw[k] = v
        else:
            raise InvalidArgumentError(f"unknown coefficient parameter {k!r}")
    return replace(base, **kw) if kw else base


def preset_defaults(name: str) -> dict:
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {name!r}")
    return dict(PRESETS[name][1])
