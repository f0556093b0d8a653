import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvmv import monotone as mo
from mvmv.errors import InvalidArgumentError

from conftest import lambdas, operator_zoo, points2, zoo_index

ZOO = operator_zoo(2)


def _grid_prox_abs(x, lam, lo=-2.0, hi=2.0, h=1e-6):
    z = np.arange(lo, hi + h / 2, h)
    return z[np.argmin(np.abs(z) + (z - x) ** 2 / (2 * lam))]


def test_resolvent_zero_is_identity():
    np.testing.assert_array_equal(mo.resolvent(mo.zero(2), 0.1, [3.0, -2.0]), [3.0, -2.0])


def test_resolvent_half_line_projection():
    op = mo.normal_cone_box([0.0], [None])
    assert mo.resolvent(op, 0.5, [-1.0])[0] == 0.0


def test_resolvent_abs_matches_grid_oracle():
    op = mo.subdifferential("abs", 1)
    got = mo.resolvent(op, 1.0, [0.5])[0]
    assert got == 0.0
    assert abs(got - _grid_prox_abs(0.5, 1.0)) <= 1e-6
    for x, lam in [(1.7, 0.3), (-0.9, 0.5), (0.2, 0.1)]:
        assert abs(mo.resolvent(op, lam, [x])[0] - _grid_prox_abs(x, lam)) <= 1e-6


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_resolvent_rejects_nonpositive_lambda(lam):
    with pytest.raises(InvalidArgumentError):
        mo.resolvent(mo.zero(1), lam, [1.0])


def test_resolvent_rejects_nonfinite():
    with pytest.raises(InvalidArgumentError):
        mo.resolvent(mo.zero(1), 0.1, [np.nan])
    with pytest.raises(InvalidArgumentError):
        mo.domain_project(mo.zero(1), [np.inf])


def test_domain_project_examples():
    np.testing.assert_array_equal(mo.domain_project(mo.zero(2), [1.0, 1.0]), [1.0, 1.0])
    ball = mo.normal_cone_ball([0.0, 0.0], 1.0)
    np.testing.assert_allclose(mo.domain_project(ball, [2.0, 0.0]), [1.0, 0.0])
    box = mo.normal_cone_box([0.0, 0.0], [1.0, 1.0])
    np.testing.assert_array_equal(mo.domain_project(box, [-0.3, 0.4]), [0.0, 0.4])


def test_invalid_operators():
    with pytest.raises(InvalidArgumentError):
        mo.normal_cone_box([1.0], [0.0])
    with pytest.raises(InvalidArgumentError):
        mo.normal_cone_ball([0.0], 0.0)
    with pytest.raises(InvalidArgumentError):
        mo.subdifferential("huber", 1)


def test_graph_sample_zero(rng):
    for s in mo.graph_sample(mo.zero(2), rng, 3):
        np.testing.assert_array_equal(s.y, [0.0, 0.0])


def test_graph_sample_half_line_structure(rng):
    op = mo.normal_cone_box([0.0], [None])
    for s in mo.graph_sample(op, rng, 200):
        if s.x[0] == 0.0:
            assert s.y[0] <= 0.0
        else:
            assert s.x[0] > 0 and s.y[0] == 0.0


def test_graph_sample_abs_subgradient_inequality(rng):
    op = mo.subdifferential("abs", 1)
    z = np.linspace(-3, 3, 601)
    for s in mo.graph_sample(op, rng, 100):
        x, y = s.x[0], s.y[0]
        assert np.all(np.abs(z) >= abs(x) + y * (z - x) - 1e-12)
        if x != 0:
            assert y == np.sign(x)
        else:
            assert -1 <= y <= 1


def test_graph_sample_box_corners_use_full_cone(rng):
    op = mo.normal_cone_box([0.0, 0.0], [1.0, 1.0])
    corners = [s for s in mo.graph_sample(op, rng, 400)
               if np.all((s.x == 0) | (s.x == 1)) and np.all(s.y != 0)]
    assert corners
    ys = np.array([s.y for s in corners])
    # random positive weights on both generator rays, not a fixed selection
    assert len(np.unique(np.round(np.abs(ys[:, 0]) / np.abs(ys[:, 1]), 6))) > 5


@pytest.mark.parametrize("op", ZOO, ids=repr)
def test_graph_samples_are_members(op, rng):
    for s in mo.graph_sample(op, rng, 50):
        assert mo.in_graph(op, s.x, s.y, tol=1e-9)


@pytest.mark.parametrize("op", ZOO, ids=repr)
def test_monotone_on_graph_samples(op, rng):
    ss = mo.graph_sample(op, rng, 60)
    for a in ss:
        for b in ss:
            assert np.dot(a.x - b.x, a.y - b.y) >= -1e-10


@pytest.mark.parametrize("op", ZOO, ids=repr)
@pytest.mark.parametrize("lam", [1e-3, 0.1, 1.0])
def test_graph_consistency(op, lam, rng):
    # J_lam(x + lam y) = x characterizes y in A(x)
    for s in mo.graph_sample(op, rng, 40):
        np.testing.assert_allclose(mo.resolvent(op, lam, s.x + lam * s.y), s.x, atol=1e-9)


@given(zoo_index, lambdas, points2, points2)
def test_resolvent_nonexpansive(i, lam, x, y):
    op = ZOO[i]
    jx, jy = mo.resolvent(op, lam, x), mo.resolvent(op, lam, y)
    assert np.linalg.norm(jx - jy) <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


@given(zoo_index, lambdas, points2, points2)
def test_yosida_monotone(i, lam, x, y):
    op = ZOO[i]
    assert np.dot(mo.yosida(op, lam, x) - mo.yosida(op, lam, y), x - y) >= -1e-12 * (
        1 + np.dot(x - y, x - y) / lam)


@given(zoo_index, lambdas, points2)
def test_resolvent_lands_in_domain(i, lam, x):
    op = ZOO[i]
    j = mo.resolvent(op, lam, x)
    np.testing.assert_allclose(mo.domain_project(op, j), j, atol=1e-12)


@given(zoo_index, points2)
def test_projection_idempotent(i, x):
    op = ZOO[i]
    p = mo.domain_project(op, x)
    np.testing.assert_array_equal(mo.domain_project(op, p), p)


@given(st.floats(-5, 5), st.floats(0.01, 2))
def test_quadratic_prox_matches_grid(x, lam):
    op = mo.subdifferential("quadratic", 1, weight=1.5, center=[0.3])
    z = np.linspace(-6, 6, 240001)
    oracle = z[np.argmin(0.75 * (z - 0.3) ** 2 + (z - x) ** 2 / (2 * lam))]
    assert abs(mo.resolvent(op, lam, [x])[0] - oracle) <= 1e-4


@pytest.mark.parametrize("op", ZOO, ids=repr)
def test_config_round_trip(op):
    back = mo.from_config(mo.to_config(op), d=op.dim)
    x = np.array([0.7, -3.1])
    np.testing.assert_array_equal(mo.resolvent(back, 0.2, x), mo.resolvent(op, 0.2, x))
