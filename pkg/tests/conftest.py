import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mvmv import monotone as mo

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def operator_zoo(d=2):
    return [
        mo.zero(d),
        mo.normal_cone_box([0.0] * d, [None] * d),
        mo.normal_cone_box([-1.0] * d, [1.0] * d),
        mo.normal_cone_ball(np.zeros(d), 1.0),
        mo.normal_cone_ball(np.linspace(-0.5, 0.5, d), 2.0),
        mo.subdifferential("abs", d, weight=0.7),
        mo.subdifferential("quadratic", weight=2.0, center=np.ones(d)),
        mo.subdifferential("indicator", lower=[-2.0] * d, upper=[0.5] * d),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
points2 = st.lists(finite, min_size=2, max_size=2).map(np.array)
lambdas = st.sampled_from([1e-3, 1e-2, 0.1, 0.5, 1.0])
zoo_index = st.integers(0, len(operator_zoo()) - 1)


def _base(**kw):
    cfg = {"preset": "linear-reflected",
           "operator": {"kind": "box", "lower": [0.0], "upper": [None]},
           "xi": 1.0, "T": 1.0, "steps": 40, "epsilon_grid": [0.1, 0.01, 0.001],
           "replicas": 70, "particles": 1000, "seed": 7}
    cfg.update(kw)
    return cfg


# one quick configuration per command; 70 replicas of 1000 particles span three
# noise blocks so worker counts actually split the work
SMALL_CONFIGS = {
    "limit": _base(),
    "simulate": _base(particles=200, epsilon=0.1, save_paths=2),
    "convergence": _base(),
    "clt": _base(preset="clt-quadratic"),
    "ldp-tail": _base(preset="brownian", operator={"kind": "zero", "dim": 1}, xi=0.0,
                      epsilon_grid=[0.2, 0.15, 0.1], target=1.0, radius=0.1),
    "mdp-equiv": _base(epsilon_grid=[0.1, 0.03, 0.01], delta=0.02),
    "rate": _base(rate={"mode": "LDP", "kind": "endpoint", "target": 1.5, "segments": 8}),
    "validate": _base(preset="tanh-smooth", operator={"kind": "zero", "dim": 2},
                      xi=[1.0, -0.5], probes=200, probe_radius=3.0),
}


def write_config(path, cfg):
    import json
    path.write_text(json.dumps(cfg, indent=2))
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
