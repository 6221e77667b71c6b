import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critblowup import green as G
from critblowup.profiles import alpha_n, fd_laplacian, sphere_area


def random_interior(rng, n, radius, count):
    v = rng.normal(size=(count, n))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return v * radius * rng.random((count, 1)) ** (1 / n)


@pytest.fixture(scope="module")
def star_solver(tmp_path_factory):
    n = 5
    quad = np.diag([0.05, -0.05, 0.03, -0.03, 0.0])
    dom = G.DomainSpec(n, "star", linear=(0.1, 0, 0, 0, 0), quadratic=tuple(map(tuple, quad)))
    return G.GreenSolver(dom, cache_dir=str(tmp_path_factory.mktemp("star")))


# --------------------------------------------------------------------------
# fundamental solution


def test_fundamental_solution_on_unit_sphere_n5():
    x = np.array([0.0, 1.0, 0, 0, 0])
    assert G.gamma_fundamental(x) == pytest.approx(15**0.75, rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_fundamental_solution_homogeneity(n, coords):
    x = np.array(coords[:n])
    if np.linalg.norm(x) < 1e-3:
        x[0] = 1.0
    assert G.gamma_fundamental(2 * x) == pytest.approx(2.0 ** (2 - n) * G.gamma_fundamental(x), rel=1e-13)


@pytest.mark.parametrize("n", [5, 6])
def test_fundamental_solution_harmonic_away_from_origin(n, rng):
    x = rng.normal(size=(10, n))
    x += 0.5 * x / np.linalg.norm(x, axis=1)[:, None]
    lap = fd_laplacian(lambda y: G.gamma_fundamental(y, n), x, h=1e-3)
    assert np.max(np.abs(lap) / G.gamma_fundamental(x, n)) < 1e-5


def test_fundamental_solution_singular_at_origin():
    with pytest.raises(G.GreenError):
        G.gamma_fundamental(np.zeros(5))


def test_gradient_of_fundamental_solution(rng):
    x = rng.normal(size=(6, 5))
    h = 1e-6
    fd = np.stack([(G.gamma_fundamental(x + h * e) - G.gamma_fundamental(x - h * e)) / (2 * h) for e in np.eye(5)], axis=-1)
    assert np.allclose(G.gamma_gradient(x), fd, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("n", [5, 6, 7])
def test_green_constant(n):
    assert G.green_constant(n) == pytest.approx((n - 2) * sphere_area(n) * alpha_n(n), rel=1e-15)
    # flux of -grad Gamma through the unit sphere
    flux = (n - 2) * alpha_n(n) * sphere_area(n)
    assert G.green_constant(n) == pytest.approx(flux)


# --------------------------------------------------------------------------
# regular part: ball


def test_ball_centre_value_n5(unit_ball_solver):
    dom = G.DomainSpec(5)
    assert G.regular_part(dom, np.zeros(5)) == pytest.approx(15**0.75, rel=1e-15)
    assert G.regular_part(unit_ball_solver, np.zeros(5)) == pytest.approx(15**0.75, rel=1e-4)


@pytest.mark.parametrize("radius", [0.5, 2.0, 3.0])
def test_ball_centre_value_scales_with_radius(radius):
    n = 5
    dom = G.DomainSpec(n, radius=radius)
    assert G.regular_part(dom, np.zeros(n)) == pytest.approx(radius ** (2 - n) * 15**0.75, rel=1e-14)


def test_ball_centre_value_with_collocation_for_radius_two(tmp_path):
    n = 5
    solver = G.GreenSolver(G.DomainSpec(n, radius=2.0), n_sources=512, n_boundary=2048, cache_dir=str(tmp_path))
    assert G.regular_part(solver, np.zeros(n)) == pytest.approx(2.0 ** (2 - n) * 15**0.75, rel=1e-3)


def test_image_formula_matches_collocation_at_interior_points(unit_ball_solver, rng):
    dom = G.DomainSpec(5)
    for q in random_interior(rng, 5, 0.4, 20):
        assert G.regular_part(unit_ball_solver, q) == pytest.approx(G.regular_part(dom, q), rel=1e-4)


def test_collocation_H_symmetric(unit_ball_solver, rng):
    pts = random_interior(rng, 5, 0.3, 10)
    for x, y in zip(pts[:5], pts[5:]):
        assert unit_ball_solver.H(x, y) == pytest.approx(unit_ball_solver.H(y, x), rel=1e-6)


def test_image_formula_symmetric(rng):
    pts = random_interior(rng, 6, 0.9, 20)
    a = G.ball_regular_part(pts[:10], pts[10:])
    b = G.ball_regular_part(pts[10:], pts[:10])
    assert np.allclose(a, b, rtol=1e-14)


def test_collocation_H_harmonic(unit_ball_solver, rng):
    y = np.array([0.1, 0.05, 0, 0, 0])
    x = random_interior(rng, 5, 0.3, 8)
    lap = fd_laplacian(lambda z: unit_ball_solver.H(z, y), x, h=2e-3)
    assert np.max(np.abs(lap)) <= 1e-6 * np.max(np.abs(unit_ball_solver.H(x, y)))


def test_regular_part_decreases_with_ball_radius():
    values = [G.regular_part(G.DomainSpec(5, radius=r), np.zeros(5)) for r in (0.5, 1.0, 1.5, 2.0, 4.0)]
    assert np.all(np.diff(values) < 0)


@pytest.mark.parametrize("n", [5, 6])
def test_regular_part_positive_and_blows_up_toward_boundary(n):
    dom = G.DomainSpec(n)
    e = np.eye(n)[0]
    vals = [G.regular_part(dom, s * e) for s in (0.0, 0.5, 0.9, 0.99)]
    assert all(v > 0 for v in vals)
    assert np.all(np.diff(vals) > 0)


def test_ball_with_offset_centre_matches_translated_ball():
    n = 5
    c = np.array([1.0, -2.0, 0.5, 0, 0])
    q = np.array([0.2, 0.1, 0, 0, 0])
    shifted = G.DomainSpec(n, center=tuple(c), radius=1.5)
    plain = G.DomainSpec(n, radius=1.5)
    assert G.regular_part(shifted, c + q) == pytest.approx(G.regular_part(plain, q), rel=1e-14)


# --------------------------------------------------------------------------
# regular part: star-shaped


def test_star_domain_regular_part_positive(star_solver, rng):
    for q in random_interior(rng, 5, 0.4, 5):
        assert G.regular_part(star_solver, q) > 0


def test_star_domain_boundary_residual_small(star_solver):
    assert star_solver.boundary_residual(np.zeros(5)) < 1e-3


def test_star_domain_larger_than_inscribed_ball(star_solver):
    # the domain contains the ball of radius min rho, so H is below that ball's value
    inner = 0.8
    assert G.regular_part(star_solver, np.zeros(5)) < G.regular_part(G.DomainSpec(5, radius=inner), np.zeros(5))


def test_degenerate_star_domain_rejected():
    with pytest.raises(G.GreenError):
        G.DomainSpec(5, "star", linear=(1.2, 0, 0, 0, 0))


def test_domain_round_trip():
    dom = G.DomainSpec(5, "star", linear=(0.1, 0, 0, 0, 0))
    assert G.DomainSpec.from_dict(dom.to_dict()) == dom
    assert G.DomainSpec.from_dict(dom.to_dict()).content_hash() == dom.content_hash()


@pytest.mark.parametrize("kwargs", [dict(n=2), dict(n=5, radius=0.0), dict(n=5, kind="cube"), dict(n=5, center=(0.0, 0.0))])
def test_invalid_domains(kwargs):
    with pytest.raises(G.GreenError):
        G.DomainSpec(**kwargs)


# --------------------------------------------------------------------------
# gradient


def test_gradient_vanishes_at_centre(unit_ball_solver):
    assert np.allclose(G.grad_regular_part(G.DomainSpec(5), np.zeros(5)), 0.0)
    assert np.max(np.abs(G.grad_regular_part(unit_ball_solver, np.zeros(5)))) < 1e-3


@pytest.mark.parametrize("q", [[0.3, 0, 0, 0, 0], [0.1, -0.2, 0.15, 0, 0]])
def test_gradient_points_toward_q(q, unit_ball_solver):
    q = np.array(q)
    for g in (G.grad_regular_part(G.DomainSpec(5), q), G.grad_regular_part(unit_ball_solver, q)):
        assert np.dot(g, q) / (np.linalg.norm(g) * np.linalg.norm(q)) == pytest.approx(1.0, abs=1e-3)


def test_gradient_matches_finite_difference(unit_ball_solver):
    q = np.array([0.2, 0.1, -0.05, 0, 0])

    def fd(h):
        return np.array([(unit_ball_solver.H(q + h * e, q) - unit_ball_solver.H(q - h * e, q)) / (2 * h) for e in np.eye(5)])

    exact = G.grad_regular_part(unit_ball_solver, q)
    e1 = np.linalg.norm(fd(2e-2) - exact)
    e2 = np.linalg.norm(fd(1e-2) - exact)
    assert e1 / e2 == pytest.approx(4.0, rel=0.1)
    closed = G.grad_regular_part(G.DomainSpec(5), q)
    assert np.linalg.norm(exact - closed) <= 1e-4 * np.linalg.norm(closed)


def test_closed_form_gradient_matches_finite_difference():
    q = np.array([0.3, -0.2, 0.1, 0, 0])
    h = 1e-6
    fd = np.array([(G.ball_regular_part(q + h * e, q) - G.ball_regular_part(q - h * e, q)) / (2 * h) for e in np.eye(5)])
    assert np.allclose(G.ball_grad_regular_part(q), fd, rtol=1e-7)


# --------------------------------------------------------------------------
# errors


def test_query_outside_domain_rejected(unit_ball_solver):
    with pytest.raises(G.GreenError):
        G.regular_part(unit_ball_solver, np.array([1.2, 0, 0, 0, 0]))


def test_boundary_proximity_warns(unit_ball_solver):
    with pytest.warns(G.BoundaryProximityWarning):
        try:
            G.regular_part(unit_ball_solver, np.array([0.999, 0, 0, 0, 0]))
        except G.CollocationError:
            pass


def test_collocation_failure_reported(tmp_path):
    solver = G.GreenSolver(G.DomainSpec(5), n_sources=32, n_boundary=256, residual_tol=1e-8, cache_dir=str(tmp_path))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", G.BoundaryProximityWarning)
        with pytest.raises(G.CollocationError):
            G.regular_part(solver, np.array([0.5, 0, 0, 0, 0]))


def test_closed_form_refused_for_star_domain():
    dom = G.DomainSpec(5, "star", linear=(0.1, 0, 0, 0, 0))
    with pytest.raises(G.GreenError):
        G.regular_part(dom, np.zeros(5))
    with pytest.raises(G.GreenError):
        G.grad_regular_part(dom, np.zeros(5))


def test_solver_cache_reused(tmp_path):
    kw = dict(n_sources=128, n_boundary=512, cache_dir=str(tmp_path))
    a = G.GreenSolver(G.DomainSpec(5), **kw)
    files = list(tmp_path.glob("green-*.npz"))
    assert len(files) == 1
    b = G.GreenSolver(G.DomainSpec(5), **kw)
    q = np.array([0.1, 0, 0, 0, 0])
    assert G.regular_part(a, q) == G.regular_part(b, q)
    assert math.isfinite(a.cond_estimate)
