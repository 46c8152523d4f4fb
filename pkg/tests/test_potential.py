import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splab.geometry import Density, GeometryError, concatenate, discretize, make_circle, make_ellipse
from splab.potential import (
    ExtrapolationError,
    PotentialSolution,
    SingularEvaluationError,
    fundamental_solution,
    greens_disk,
    normal_derivatives,
    richardson_limit,
    single_layer,
    solve_dirichlet_disk,
    wolff_potential,
)

RHO = 0.5


@pytest.fixture(scope="module")
def radial():
    disc = discretize(make_circle(RHO), 4096)
    return solve_dirichlet_disk(disc, Density.constant(disc, 1.0))


def exact(r):
    return -RHO * np.log(np.maximum(r, RHO))


# -- kernels -----------------------------------------------------------------


def test_fundamental_solution_values():
    assert fundamental_solution((1.0, 0.0))[0] == 0.0
    x = np.array([0.3, -0.2])
    assert fundamental_solution(x)[0] - fundamental_solution(2 * x)[0] == pytest.approx(math.log(2) / (2 * math.pi))
    g = fundamental_solution((0.1, 0.0))[1]
    assert np.linalg.norm(g) == pytest.approx(10 / (2 * math.pi), rel=1e-14)
    with pytest.raises(SingularEvaluationError):
        fundamental_solution((0.0, 0.0))


def test_fundamental_solution_three_dimensions():
    # Newtonian potential 1 / (4 pi r)
    v, g = fundamental_solution((0.0, 0.0, 2.0), n=3)
    assert v == pytest.approx(1 / (8 * math.pi))
    np.testing.assert_allclose(g, [0, 0, -1 / (16 * math.pi)])


def test_greens_disk_boundary_and_origin():
    y = np.array([0.3, 0.4])
    x = (1 - 1e-6) * np.array([math.cos(1.0), math.sin(1.0)])
    assert abs(greens_disk(x, y)) < 1e-4
    assert greens_disk((0.0, 0.0), y) == pytest.approx(-math.log(0.5) / (2 * math.pi), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0, 0.95), st.floats(0, 2 * math.pi), st.floats(0, 0.95), st.floats(0, 2 * math.pi)
)
def test_greens_disk_symmetric(r1, a1, r2, a2):
    x = r1 * np.array([math.cos(a1), math.sin(a1)])
    y = r2 * np.array([math.cos(a2), math.sin(a2)])
    if np.linalg.norm(x - y) < 1e-3:
        return
    assert greens_disk(x, y) == pytest.approx(greens_disk(y, x), rel=1e-12, abs=1e-12)


# -- radial oracle -----------------------------------------------------------


def test_radial_values(radial):
    assert radial.value([[0.0, 0.0]])[0] == pytest.approx(0.346574, abs=1e-6)
    assert radial.value([[0.75, 0.0]])[0] == pytest.approx(-0.5 * math.log(0.75), abs=1e-6)
    assert -0.5 * math.log(0.75) == pytest.approx(0.143841, abs=1e-6)


def test_radial_sup_error(radial):
    r = np.concatenate([np.linspace(0, RHO - 1e-3, 60), np.linspace(RHO + 1e-3, 0.99, 60)])
    a = np.linspace(0, 2 * math.pi, len(r), endpoint=False) * 3
    pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
    assert np.max(np.abs(radial.value(pts) - exact(r))) <= 1e-6


def test_free_space_single_layer_radial():
    disc = discretize(make_circle(RHO), 4096)
    q = Density.constant(disc, 1.0)
    for r in (0.0, 0.3, 0.75, 2.0):
        assert single_layer(disc, q, np.array([r, 0.1 * r])) == pytest.approx(float(exact(math.hypot(r, 0.1 * r))), abs=1e-6)


def test_radial_gradient(radial):
    g = radial.gradient([[0.75, 0.0], [0.25, 0.0]])
    np.testing.assert_allclose(g[0], [-0.5 / 0.75, 0.0], atol=1e-8)
    np.testing.assert_allclose(g[1], [0.0, 0.0], atol=1e-8)


def test_gradient_matches_finite_differences():
    disc = discretize(make_ellipse(0.6, 0.3), 1024)
    sol = PotentialSolution(disc, Density.from_function(disc, lambda p: 1 + p[:, 0] ** 2), "unit-disk")
    h = 1e-5
    for x in ([0.0, 0.0], [0.66, 0.0], [0.2, 0.36], [-0.3, -0.05]):
        x = np.array(x)
        fd = [(sol.value([x + e * h])[0] - sol.value([x - e * h])[0]) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(sol.gradient([x])[0], fd, atol=1e-5)


def test_zero_density_gives_zero():
    disc = discretize(make_circle(RHO), 256)
    sol = solve_dirichlet_disk(disc, Density.constant(disc, 0.0))
    assert np.all(sol.value([[0.1, 0.2], [0.7, 0.0]]) == 0.0)


def test_linearity_and_additivity():
    disc = discretize(make_circle(RHO), 1024)
    q = Density.from_function(disc, lambda p: 1 + p[:, 0] ** 2)
    x = np.array([[0.1, 0.2], [0.52, 0.0], [0.9, -0.1]])
    base = PotentialSolution(disc, q).value(x)
    np.testing.assert_allclose(PotentialSolution(disc, 2 * q).value(x), 2 * base, rtol=1e-13)
    halves = concatenate([disc.subset(np.arange(512)), disc.subset(np.arange(512, 1024))])
    far = x[[0, 2]]
    split = PotentialSolution(halves, Density(q.values, halves)).value(far)
    np.testing.assert_allclose(split, PotentialSolution(disc, q).value(far), atol=1e-12)


def test_curve_outside_disk_is_rejected():
    disc = discretize(make_circle(1.2), 64)
    with pytest.raises(GeometryError):
        PotentialSolution(disc, Density.constant(disc, 1.0), "unit-disk")


def test_evaluation_on_node_is_singular(radial):
    with pytest.raises(SingularEvaluationError):
        radial.value(radial.disc.nodes[:1])


def test_trace_value_continuous(radial):
    assert radial.trace_value(0.1) == pytest.approx(-RHO * math.log(RHO), abs=1e-7)


# -- normal derivatives ------------------------------------------------------


def test_richardson_limit_quadratic():
    t = 0.05 * 0.5 ** np.arange(9)
    assert richardson_limit(3.0 + 2 * t - 7 * t**2) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ExtrapolationError):
        richardson_limit(np.sin(1 / t))


def test_normal_derivatives_radial(radial):
    nd = normal_derivatives(radial, 0)
    assert nd.outer == pytest.approx(-1.0, abs=1e-4)
    assert nd.inner == pytest.approx(0.0, abs=1e-4)
    assert nd.jump == pytest.approx(-1.0, abs=1e-4)
    assert nd.pv_integral == pytest.approx(-0.5, abs=1e-3)


def test_normal_derivatives_ellipse_variable_density():
    disc = discretize(make_ellipse(0.6, 0.3), 2048)
    sol = PotentialSolution(disc, Density.from_function(disc, lambda p: 1 + p[:, 0] ** 2), "unit-disk")
    for i in (0, 300, 700):
        nd = normal_derivatives(sol, i)
        assert nd.jump == pytest.approx(-nd.q0, rel=0.01)
        assert nd.method_agreement <= 0.005


# -- Wolff potential ---------------------------------------------------------


def test_wolff_log_growth_on_curve():
    disc = discretize(make_circle(RHO), 2048)
    x = disc.nodes[0]
    d = 2.0**-12
    inc = wolff_potential(disc, x, d) - wolff_potential(disc, x, 2 * d)
    assert inc == pytest.approx(2 * math.log(2), rel=0.05)


def test_wolff_independent_of_cutoff_off_curve():
    disc = discretize(make_circle(RHO), 1024)
    x = disc.nodes[0] * (0.6 / 0.5)
    vals = [wolff_potential(disc, x, d) for d in (2.0**-5, 2.0**-8, 2.0**-11)]
    assert max(vals) - min(vals) <= 1e-14 * max(vals)

