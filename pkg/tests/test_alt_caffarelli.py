import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splab import alt_caffarelli as ac
from splab.grid_solver import Field, Grid


def test_heaviside_ramp():
    t = np.array([-1.0, -0.05, 0.0, 0.05, 1.0])
    np.testing.assert_allclose(ac.smoothed_heaviside(t, 0.05), [0, 0, 0.5, 1, 1])
    h = 1e-7
    for x in (-0.03, 0.0, 0.02):
        fd = (ac.smoothed_heaviside(x + h, 0.05) - ac.smoothed_heaviside(x - h, 0.05)) / (2 * h)
        assert ac.smoothed_heaviside_prime(x, 0.05) == pytest.approx(fd, rel=1e-6)


def test_energy_of_constants():
    g = Grid.square(32)
    up = ac.energy(Field(g, np.full(g.shape, 0.3)), 0.05)
    assert up.bending == 0.0 and up.volume == pytest.approx(1.0)
    down = ac.energy(Field(g, np.full(g.shape, -0.3)), 0.05)
    assert down.volume == 0.0


def test_bending_of_quadratic():
    g = Grid.square(32)
    e = ac.energy(Field.from_function(g, lambda x, y: x**2), 0.05)
    interior_area = g.h**2 * np.count_nonzero(g.interior)
    assert e.bending == pytest.approx(4 * interior_area, rel=1e-8)


def test_gradient_matches_finite_differences():
    g = Grid.square(12)
    rng = np.random.default_rng(3)
    w = Field(g, np.where(g.interior, 0.01 * rng.standard_normal(g.shape), 0.01))
    grad = ac.energy_gradient(w, 0.02)
    h = 1e-7
    for j, i in ((3, 4), (6, 6), (1, 10)):
        e = np.zeros(g.shape)
        e[j, i] = h
        fd = (ac.energy(w + Field(g, e), 0.02).total - ac.energy(w - Field(g, e), 0.02).total) / (2 * h)
        assert grad[j, i] == pytest.approx(fd, rel=1e-5, abs=1e-12)


def test_stationary_state_stalls_unchanged():
    st0 = ac.initial_state(Grid.square(16), 1.0, 0.05)
    nxt = ac.descent_step(st0)
    assert nxt.stalled
    np.testing.assert_array_equal(nxt.w.values, st0.w.values)
    assert nxt.gradient_sup < ac.GRADIENT_FLOOR


def test_nan_gradient_is_rejected():
    st0 = ac.initial_state(Grid.square(8), 1.0, 0.05)
    vals = st0.w.values.copy()
    # the Laplacian of this spike is finite, its bilaplacian is not
    vals[3, 3] = 1e305
    with np.errstate(over="ignore", invalid="ignore"):
        bad = ac.make_state(Field(st0.grid, vals), 0.05, st0.boundary)
        with pytest.raises(ac.DescentError):
            ac.descent_step(bad)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.001, 0.1), st.floats(0.0, 4.0), st.integers(8, 24))
def test_energy_never_increases_and_boundary_is_pinned(u0, dip, n):
    state = ac.initial_state(Grid.square(n), u0, 0.25 * u0, dip=dip * u0)
    ring = ~state.grid.interior
    for _ in range(5):
        nxt = ac.descent_step(state)
        assert nxt.energy.total <= state.energy.total
        np.testing.assert_array_equal(nxt.w.values[ring], u0)
        state = nxt


def test_minimizer_has_closed_nondegenerate_free_boundary():
    state = ac.initial_state(Grid.square(64), 0.01, 0.0025, dip=0.02)
    e0 = state.energy.total
    state, log = ac.minimize(state, rtol=0.0)
    assert state.stalled
    assert np.all(np.diff([e0] + log.energies) < 0)
    assert state.energy.total < 0.9 * e0
    fb = ac.extract_free_boundary(state.w)
    assert fb.is_closed and fb.min_grad > 1e-6


def test_continuation_records_displacements():
    state = ac.initial_state(Grid.square(32), 0.01, 0.0025, dip=0.02)
    state, log = ac.minimize(state, rtol=1e-10, continuation=2)
    assert log.epsilons == [0.0025, 0.00125, 0.000625]
    assert len(log.displacements) == 2 and all(np.isfinite(log.displacements))


# -- free boundary -----------------------------------------------------------


def test_extract_linear_field():
    g = Grid.square(32, 2.0, (-1.0, -1.0))
    fb = ac.extract_free_boundary(Field.from_function(g, lambda x, y: x + 0 * y))
    pts = np.vstack(fb.polylines)
    np.testing.assert_allclose(pts[:, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(fb.q.values, 0.5, rtol=1e-10)
    assert not fb.is_closed


def test_extract_paraboloid():
    rho = 0.4
    g = Grid.square(128, 2.0, (-1.0, -1.0))
    fb = ac.extract_free_boundary(Field.from_function(g, lambda x, y: x**2 + y**2 - rho**2))
    assert fb.is_closed
    r = np.hypot(*np.vstack(fb.polylines).T)
    np.testing.assert_allclose(r, rho, atol=2 * g.h**2 / rho)
    np.testing.assert_allclose(fb.q.values, 1 / (4 * rho), rtol=0.01)


def test_extract_without_crossing():
    with pytest.raises(ac.ExtractionError):
        ac.extract_free_boundary(Field(Grid.square(8), np.full((9, 9), -1.0)))


def test_saddle_cells_are_linked():
    g = Grid.square(40, 2.0, (-1.0, -1.0))
    # checkerboard of four lobes, zero set through many saddle cells
    fb = ac.extract_free_boundary(Field.from_function(g, lambda x, y: np.sin(3 * x) * np.sin(3 * y) + 1e-3))
    assert len(fb.polylines) >= 2
    assert np.all(fb.disc.weights > 0)


# -- cross-check -------------------------------------------------------------


def test_cross_check_without_free_boundary():
    g = Grid.disk(32)
    cc = ac.cross_check(Field(g, np.full(g.shape, -1.0)))
    assert not cc.v2.values.any()
    assert cc.discrepancy == 0.0


def test_synthetic_oracle_is_exact_in_the_continuum():
    w, v, q = ac.radial_synthetic_w(0.5)
    assert q == pytest.approx(1 / (0.5 * math.sqrt(math.log(2))), rel=1e-14)
    h = 1e-4
    for r in (0.2, 0.7):
        lap = (w(r + h) - 2 * w(r) + w(r - h)) / h**2 + (w(r + h) - w(r - h)) / (2 * h * r)
        assert lap == pytest.approx(float(v(r)), abs=1e-6)
    # C^1 across the free boundary with |w'| = 1 / (2 q)
    dl = (w(0.5) - w(0.5 - h)) / h
    dr = (w(0.5 + h) - w(0.5)) / h
    assert dl == pytest.approx(dr, abs=1e-3)
    assert dl == pytest.approx(1 / (2 * q), rel=1e-3)


def test_synthetic_cross_check_refines():
    d = []
    for n in (128, 256):
        w, _ = ac.synthetic_state(Grid.disk(n))
        d.append(ac.cross_check(w).discrepancy)
    assert d[1] <= 5e-3
    assert d[1] < d[0]


def test_opposite_sign_convention_fails_the_cross_check():
    w, _ = ac.synthetic_state(Grid.disk(128))
    assert ac.cross_check(w, v_sign=-1.0).discrepancy > 0.1
