import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splab.geometry import (
    AmbiguousProjectionError,
    CoverageError,
    DegenerateParametrizationError,
    Density,
    GeometryError,
    ball_measure,
    circle_charts,
    counterexample_arc_length,
    counterexample_ball_measure,
    counterexample_lower_bound,
    discretize,
    lipschitz_constant_estimate,
    make_circle,
    make_counterexample_curve,
    make_ellipse,
    make_graph,
    mollify_curve,
    mollify_density,
    parse_curve,
    parse_density,
    signed_distance,
    signed_distance_batch,
    surface_integral,
)
from splab.geometry import Chart


@pytest.fixture(scope="module")
def circle():
    return make_circle(0.5)


# -- curves ------------------------------------------------------------------


def test_circle_basics(circle):
    assert circle.length == pytest.approx(math.pi)
    np.testing.assert_allclose(circle(0.0)[0], [0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(circle.normal(0.0)[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(circle.curvature([0.1, 0.7]), -2.0, rtol=1e-12)


def test_clockwise_curve_still_has_outward_normals():
    from dataclasses import replace

    base = make_circle(0.5)
    cw = replace(base, gamma=lambda t: base.gamma(-t), dgamma=lambda t: -base.dgamma(-t))
    assert cw.orientation == -1
    p = cw(0.3)[0]
    assert np.dot(cw.normal(0.3)[0], p) > 0


def test_ellipse_length_matches_quadrature():
    from scipy.integrate import quad

    e = make_ellipse(0.6, 0.3)
    ref = quad(lambda t: math.hypot(0.6 * math.sin(t), 0.3 * math.cos(t)), 0, 2 * math.pi, limit=200)[0]
    assert e.length == pytest.approx(ref, rel=1e-12)


def test_counterexample_profile_value():
    c = make_counterexample_curve(0.5)
    assert c(1.0)[0, 1] == pytest.approx(2.0 / 3.0 * math.sin(1.0), rel=1e-14)
    assert c(1.0)[0, 1] == pytest.approx(0.56098, abs=5e-6)
    x = np.geomspace(1e-12, 1e-3, 50)
    assert np.all(np.abs(c(x)[:, 1]) <= x)


def test_counterexample_rejects_bad_exponent():
    with pytest.raises(GeometryError):
        make_counterexample_curve(1.0)


def test_counterexample_length_converges_as_cutoff_shrinks():
    lengths = [counterexample_arc_length(0.5, 2.0**-k, 1.0) for k in (10, 14, 18, 22, 26, 30)]
    total = counterexample_arc_length(0.5, 0.0, 1.0)
    gaps = total - np.array(lengths)
    assert np.all(gaps > 0)
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 1e-4


# -- discretization ----------------------------------------------------------


def test_discretize_circle(circle):
    disc = discretize(circle, 256)
    assert disc.total_length == pytest.approx(math.pi, abs=1e-4)
    np.testing.assert_allclose(np.sum(disc.nodes * disc.normals, axis=1), 0.5, atol=1e-12)
    fine = discretize(circle, 512)
    assert fine.max_spacing == pytest.approx(0.5 * disc.max_spacing, rel=1e-12)


def test_discretize_needs_cutoff_at_singular_end():
    c = make_counterexample_curve(0.5)
    with pytest.raises(GeometryError):
        discretize(c, 64)
    disc = discretize(c, 64, cutoff=1e-3)
    assert disc.t_lo[0] == pytest.approx(1e-3)


def test_degenerate_parametrization_is_reported():
    flat = make_graph(lambda x: 0 * x, lambda x: 0 * x, (0.0, 1.0))
    from dataclasses import replace

    stuck = replace(flat, dgamma=lambda t: np.zeros((len(t), 2)))
    with pytest.raises(DegenerateParametrizationError):
        discretize(stuck, 16)


# -- ball measure ------------------------------------------------------------


def test_ball_measure_whole_circle(circle):
    assert ball_measure(discretize(circle, 512), (0.0, 0.0), 1.0) == pytest.approx(math.pi, rel=1e-12)


def test_ball_measure_small_ball_on_curve(circle):
    disc = discretize(circle, 1024)
    r = 0.01
    exact = 2 * 0.5 * 2 * math.asin(r / (2 * 0.5))
    assert ball_measure(disc, circle(0.0)[0], r) == pytest.approx(exact, rel=1e-6)
    assert exact == pytest.approx(0.02, rel=0.01)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.02, 0.4))
def test_ball_measure_is_chord_arc(t, r):
    c = make_circle(0.5)
    disc = discretize(c, 512)
    exact = 2 * 0.5 * 2 * math.asin(r / (2 * 0.5))
    assert ball_measure(disc, c(t)[0], r) == pytest.approx(exact, rel=1e-6)


# frozen from a dense-polyline oracle in s = 1/x with an envelope tail
@pytest.mark.parametrize("k, value", [(6, 0.1082339), (8, 0.0534003)])
def test_counterexample_ball_measure_oracle(k, value):
    assert counterexample_ball_measure(0.5, 2.0**-k) == pytest.approx(value, abs=3e-6)


def test_counterexample_lower_bound():
    r = 2.0**-8
    bound = math.pi / 12 * (math.sqrt(2) * 2**8 + math.pi / 2) ** -0.5
    assert counterexample_lower_bound(0.5, r) == pytest.approx(bound, rel=1e-14)
    assert counterexample_ball_measure(0.5, r) >= bound
    assert counterexample_lower_bound(0.5, 2.0**-6) == pytest.approx(0.0272825, abs=1e-7)


# -- charts ------------------------------------------------------------------


def test_lipschitz_constant_segment():
    seg = make_graph(lambda x: 0 * x, lambda x: 0 * x, (0.0, 1.0))
    chart = Chart(np.eye(2), np.zeros(2), (0.0, 1.0), (-1.0, 1.0))
    assert lipschitz_constant_estimate(seg, [chart]) == pytest.approx(1.0)


def test_lipschitz_constant_circle_four_charts(circle):
    est = lipschitz_constant_estimate(circle, circle_charts(0.5))
    assert est == pytest.approx(4 * math.sqrt(2), rel=1e-6)


def test_lipschitz_constant_uncovered_point(circle):
    with pytest.raises(CoverageError):
        lipschitz_constant_estimate(circle, circle_charts(0.5)[:2])


def test_lipschitz_constant_counterexample_diverges():
    c = make_counterexample_curve(0.5)
    chart = Chart(np.eye(2), np.zeros(2), (0.0, 1.0), (-1.0, 1.0))
    vals = [lipschitz_constant_estimate(c.restricted(d, 1.0), [chart], samples=200000) for d in (1e-1, 1e-2, 1e-3)]
    assert vals[0] < vals[1] < vals[2]
    # slope envelope x^(a-1) / (1+a): about sqrt(10) per decade of cutoff
    assert vals[2] / vals[1] > 2.5


# -- signed distance ---------------------------------------------------------


def test_signed_distance_radial(circle):
    s = signed_distance(circle, (0.75, 0.0))
    assert s.d == pytest.approx(0.25, abs=1e-14)
    np.testing.assert_allclose(s.projection, [0.5, 0.0], atol=1e-14)
    assert signed_distance(circle, (0.2, 0.1)).d < 0


def test_signed_distance_on_curve_is_fixed_point(circle):
    p = circle(0.3)[0]
    s = signed_distance(circle, p)
    assert s.d == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(s.projection, p, atol=1e-14)


def test_signed_distance_centre_is_ambiguous(circle):
    with pytest.raises(AmbiguousProjectionError):
        signed_distance(circle, (0.0, 0.0))


def test_laplacian_of_distance_is_one_over_r(circle):
    h = 1e-4
    x = np.array([0.8, 0.0])
    pts = np.array([x, x + [h, 0], x - [h, 0], x + [0, h], x - [0, h]])
    d, _ = signed_distance_batch(circle, pts)
    lap = (d[1:].sum() - 4 * d[0]) / h**2
    assert lap == pytest.approx(1 / 0.8, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-0.3, 0.3))
def test_signed_distance_along_normal(t, s):
    e = make_ellipse(0.6, 0.3)
    # inside the reach of the ellipse (min radius of curvature b^2/a = 0.15)
    s = float(np.clip(s, -0.14, 0.3))
    p = e(t)[0] + s * e.normal(t)[0]
    assert signed_distance(e, p).d == pytest.approx(s, abs=1e-10)


# -- densities and mollification ---------------------------------------------


def test_mollify_constant_is_fixed(circle):
    disc = discretize(circle, 1024)
    q = mollify_density(Density.constant(disc, 1.0), 0.05)
    np.testing.assert_allclose(q.values, 1.0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.floats(0.01, 0.5))
def test_mollify_never_raises_sup(coeffs, eps):
    disc = discretize(make_circle(0.5), 256)
    ang = np.arctan2(disc.nodes[:, 1], disc.nodes[:, 0])
    vals = sum(c * np.cos(k * ang) for k, c in enumerate(coeffs))
    q = Density(vals, disc)
    assert mollify_density(q, eps).sup_norm <= q.sup_norm


def test_mollify_step_density_l1_bound(circle):
    disc = discretize(circle, 4096)
    q = Density(np.where(disc.nodes[:, 1] > 0, 1.0, 0.0), disc)
    for eps in (0.1, 0.05, 0.025):
        # two jumps, each smeared over a window of width 2 eps
        assert mollify_density(q, eps).l1_distance(q) <= 2 * q.sup_norm * eps * 2


def test_mollify_curve_zero_and_lipschitz_bound():
    zero = make_graph(lambda x: 0 * x, lambda x: 0 * x, (-0.5, 0.5))
    sm = mollify_curve(zero, 0.1)
    t = np.linspace(0, 1, 101)
    np.testing.assert_array_equal(sm(t)[:, 1], 0.0)
    kink = make_graph(lambda x: np.abs(x), np.sign, (-0.5, 0.5))
    for eps in (0.1, 0.01):
        diff = np.abs(mollify_curve(kink, eps)(t)[:, 1] - kink(t)[:, 1])
        assert diff.max() <= eps


def test_surface_integral_kinked_graph_converges():
    kink = make_graph(lambda x: np.abs(x - 0.25), lambda x: np.sign(x - 0.25), (-0.5, 0.5))
    exact = surface_integral(kink, lambda p: p[:, 0] ** 2, breakpoints=(0.75,))
    assert exact == pytest.approx(math.sqrt(2) / 12, rel=1e-12)
    errs = []
    for eps in 2.0 ** -np.arange(4, 8):
        sm = mollify_curve(kink, eps)
        shifts = eps * np.polynomial.legendre.leggauss(256)[0]
        bps = np.concatenate([shifts, 0.75 + shifts, 1 + shifts])
        errs.append(abs(surface_integral(sm, lambda p: p[:, 0] ** 2, breakpoints=bps) - exact))
    assert np.all(np.diff(errs) < 0)


# -- spec mini-language ------------------------------------------------------


def test_parse_curve_kinds():
    assert parse_curve("circle:rho=0.3,cx=0.1").params["cx"] == 0.1
    assert parse_curve("ellipse:a=0.6,b=0.3").params["b"] == 0.3
    assert parse_curve("graph:counterexample,alpha=0.5").singular == (0.0,)
    g = parse_curve("graph:expr,f=x**2,a=-0.5,b=0.5")
    assert g(1.0)[0, 1] == pytest.approx(0.25)
    with pytest.raises(GeometryError):
        parse_curve("square:side=1")
    with pytest.raises(GeometryError):
        parse_curve("circle:cx=0")


def test_parse_density():
    disc = discretize(make_circle(0.5), 64)
    q = parse_density("expr:1+x1**2")(disc)
    np.testing.assert_allclose(q.values, 1 + disc.nodes[:, 0] ** 2)
    assert parse_density("const:2.5")(disc).sup_norm == 2.5
    with pytest.raises(GeometryError):
        parse_density("table:q.csv")
