import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critblowup import acceptance
from critblowup import dynamics as Dy
from critblowup import green


@pytest.fixture(scope="module")
def centre5():
    return acceptance.ball_constants(5)


@pytest.fixture(scope="module")
def offcentre5():
    return acceptance.ball_constants(5, (0.3, 0.0, 0.0, 0.0, 0.0))


# --------------------------------------------------------------------------
# b and c_n


def test_b_for_unit_ball_centre_n5():
    H = float(green.ball_regular_part(np.zeros(5), np.zeros(5)))
    assert Dy.solve_b(H, 5) == pytest.approx(2 / (3 * 15**0.75), rel=1e-14)


@pytest.mark.parametrize("H", [0.3, 1.0, 7.5])
def test_b_closed_form_n6(H):
    assert Dy.solve_b(H, 6) == pytest.approx((1 / (2 * H)) ** 0.5, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 10.0), st.sampled_from([5, 6, 7]))
def test_b_residual_small(H, n):
    b = Dy.solve_b(H, n)
    assert b > 0
    assert Dy.b_residual(b, H, n) <= 1e-12


@pytest.mark.parametrize("H", [0.0, -1.0, float("nan")])
def test_b_requires_positive_regular_part(H):
    with pytest.raises(Dy.DynamicsError):
        Dy.solve_b(H, 5)


def test_constants_derived_fields(centre5):
    C = centre5
    base = (2 * C.c1 * C.A + C.c2) * (C.n - 2) / (2 * (C.n - 4) * C.c1)
    assert C.c_n == pytest.approx(base ** (1 / (C.n - 4)), rel=1e-15)
    assert C.c_n == pytest.approx(0.140304, rel=1e-5)
    assert C.B == 0.0
    d = C.to_dict()
    assert d["b"] == C.b and d["c_n"] == C.c_n


def test_constants_reject_nonpositive_base():
    with pytest.raises(Dy.DynamicsError):
        Dy.BlowupConstants(5, c1=-1.0, c2=1.0, A=0.0, H_qq=1.0)
    with pytest.raises(Dy.DynamicsError):
        Dy.BlowupConstants(5, c1=0.0, c2=1.0, A=0.0, H_qq=1.0)


# --------------------------------------------------------------------------
# mu0


@pytest.mark.parametrize("n,rate", [(5, -1.0), (6, -0.5), (7, -1 / 3)])
def test_mu0_power_law(n, rate):
    C = Dy.BlowupConstants(n, c1=2.0, c2=3.0, A=0.1, H_qq=1.0)
    t = np.geomspace(1, 1e6, 10)
    assert Dy.fit_loglog_slope(t, Dy.mu0(t, C)) == pytest.approx(rate, abs=1e-12)


@pytest.mark.parametrize("n", [5, 6])
def test_mu0_satisfies_its_ode(n):
    assert Dy.mu0_consistency(acceptance.ball_constants(n)) <= 1e-12


def test_mu0_requires_positive_time(centre5):
    with pytest.raises(Dy.DynamicsError):
        Dy.mu0(0.0, centre5)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.5])
def test_weighted_norm_of_mu0_power_is_one(delta, centre5):
    times = np.geomspace(1, 1e5, 30)
    norm = Dy.weighted_norm_delta(lambda t: Dy.mu0(t, centre5) ** delta, delta, centre5, times)
    assert norm == pytest.approx(1.0, rel=1e-13)


# --------------------------------------------------------------------------
# lambda


@pytest.mark.parametrize("d", [1.0, -2.5])
def test_lambda_without_forcing_n5(d):
    lam = Dy.lambda_solution(d, None, 1.0, 5)
    for t in (1.0, 3.0, 100.0):
        assert lam(t) == pytest.approx(d * t**-2.0, rel=1e-15)


@pytest.mark.parametrize("n", [5, 6, 7])
def test_lambda_unforced_slope(n):
    lam = Dy.lambda_solution(1.0, None, 1.0, n)
    t = np.geomspace(1, 1e4, 20)
    slope = Dy.fit_loglog_slope(t, [lam(x) for x in t])
    assert slope == pytest.approx(-(n - 3) / (n - 4), abs=1e-2)


@pytest.mark.parametrize("n", [5, 6])
def test_lambda_solution_satisfies_ode(n):
    C = acceptance.ball_constants(n)
    t0 = 10.0
    h = Dy.model_forcing(C, 0)
    lam = Dy.lambda_solution(0.0, h, t0, n)
    kap = Dy.lambda_exponent(n)

    def residual(step):
        worst = 0.0
        for t in np.geomspace(2 * t0, 100 * t0, 7):
            dt = step * t
            deriv = (lam(t + dt) - lam(t - dt)) / (2 * dt)
            worst = max(worst, abs(deriv + kap / t * lam(t) - h(t)) / abs(h(t)))
        return worst

    r1, r2 = residual(1e-2), residual(5e-3)
    assert r1 < 1e-3
    assert r1 / r2 == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("n", [5, 6])
@pytest.mark.parametrize("sigma", [0.25, 0.5])
def test_lambda_weighted_bound(n, sigma):
    C = acceptance.ball_constants(n)
    t0 = 10.0
    h = Dy.model_forcing(C, 0, sigma=sigma)
    times = np.geomspace(t0, 1e4 * t0, 40)
    assert Dy.weighted_norm_delta(h, n - 3 + sigma, C, times) == pytest.approx(1.0, rel=1e-12)
    lam = Dy.lambda_solution(0.0, h, t0, n)
    achieved = max(t ** ((1 + sigma) / (n - 4)) * abs(lam(t)) for t in times)
    bound = (n - 4) / (n - 4 - sigma) * C.c_n ** (n - 3 + sigma) if n - 4 > sigma else math.inf
    assert achieved <= bound * (1 + 1e-9)
    assert achieved >= 0.5 * bound


# --------------------------------------------------------------------------
# xi


@pytest.mark.parametrize("n", [5, 6])
def test_xi_fixed_at_ball_centre(n):
    C = acceptance.ball_constants(n)
    xi = Dy.xi_solution(None, C)
    for t in (1.0, 10.0, 1e4):
        assert np.all(xi(t) == 0.0)


@pytest.mark.parametrize("n", [5, 6])
def test_xi_unforced_rate(n):
    q = (0.3,) + (0.0,) * (n - 1)
    C = acceptance.ball_constants(n, q)
    xi = Dy.xi_solution(None, C, q)
    t = np.geomspace(10, 1e3, 12)
    gaps = [np.linalg.norm(xi(x) - np.asarray(q)) for x in t]
    assert Dy.fit_loglog_slope(t, gaps) == pytest.approx(-2 / (n - 4), abs=1e-2)


def test_xi_drift_points_away_from_gradient(offcentre5):
    q = np.array([0.3, 0, 0, 0, 0])
    xi = Dy.xi_solution(None, offcentre5, q)
    # with xi' = drift mu0^{n-2}, xi approaches q from the side opposite the drift
    assert np.dot(xi(10.0) - q, offcentre5.drift) < 0


@pytest.mark.parametrize("n", [5, 6])
def test_xi_forced_bound(n):
    q = (0.3,) + (0.0,) * (n - 1)
    C = acceptance.ball_constants(n, q)
    sigma = 0.5
    t0 = 10.0
    extra = {l: Dy.model_forcing(C, l, amplitude=1.0, sigma=sigma) for l in range(1, n + 1)}
    h = lambda s: np.array([extra[l](s) for l in range(1, n + 1)]) - C.drift * float(Dy.mu0(s, C)) ** (n - 2)
    assert Dy.weighted_norm_delta(h, n - 2 + sigma, C, np.geomspace(t0, 1e4 * t0, 20)) == pytest.approx(math.sqrt(n), rel=1e-12)
    xi = Dy.xi_solution(h, C, q)
    for ratio in (10, 100):
        t = ratio * t0
        bound = t ** (-2 / (n - 4)) + t ** (-(1 + sigma) / (n - 4))
        gap = np.linalg.norm(xi(t) - np.asarray(q))
        assert gap <= 10 * bound
        assert gap > 0


def test_xi_closed_form_matches_quadrature_of_drift(offcentre5):
    C = offcentre5
    n = C.n
    q = np.array([0.3, 0, 0, 0, 0])
    via_forcing = Dy.xi_solution(lambda s: C.drift * float(Dy.mu0(s, C)) ** (n - 2), Dy.BlowupConstants(n, C.c1, C.c2, C.A, C.H_qq), q)
    closed = Dy.xi_solution(None, C, q)
    for t in (10.0, 1e3):
        assert np.allclose(via_forcing(t), closed(t), rtol=1e-10, atol=0)


# --------------------------------------------------------------------------
# reduced system


def test_zero_forcing_leaves_parameters_frozen(centre5):
    sol = Dy.integrate_reduced_system(centre5, None, (10.0, 1e4))
    assert np.all(sol.lam == 0) and np.all(sol.a == 0) and np.all(sol.theta == 0) and np.all(sol.xi == 0)


@pytest.mark.parametrize("n", [5, 6])
def test_integrated_lambda_matches_closed_form(n):
    checks = [c for c in acceptance.lambda_ode() if c.label.startswith(f"n={n} forced")]
    assert checks and all(c.passed for c in checks), [c.line() for c in checks]


@pytest.mark.parametrize("n", [5, 6])
def test_integrated_lambda_unforced_slope(n):
    checks = [c for c in acceptance.lambda_ode() if c.label.startswith(f"n={n} h=0")]
    assert checks and all(c.passed for c in checks), [c.line() for c in checks]


def test_integrated_xi_matches_closed_form(offcentre5):
    C = offcentre5
    q = np.array([0.3, 0, 0, 0, 0])
    forcings = {l: Dy.model_forcing(C, l, amplitude=0.0) for l in range(1, 6)}
    sol = Dy.integrate_reduced_system(C, forcings, (10.0, 1e4), q=q, samples=40)
    closed = Dy.xi_solution(None, C, q)
    for t, row in zip(sol.times, sol.xi):
        assert np.linalg.norm(row - closed(t)) <= 1e-6 * np.linalg.norm(closed(t) - q)


def test_kelvin_rows_carry_inverse_scale(centre5):
    C = centre5
    n = C.n
    sigma = 0.5
    f = Dy.model_forcing(C, n + 2, sigma=sigma)
    sol = Dy.integrate_reduced_system(C, {n + 2: f}, (10.0, 1e4), samples=30)
    # a1 = -int_t^inf mu0^{n-3+sigma}, closed form for mu0 = c t^{-1/(n-4)}
    e = (n - 3 + sigma) / (n - 4)
    exact = -C.c_n ** (n - 3 + sigma) * sol.times ** (1 - e) / (e - 1)
    assert np.allclose(sol.a[:, 0], exact, rtol=1e-6)
    assert np.all(sol.row(n + 2) == sol.a[:, 0])


def test_achieved_norms_linear_in_forcing_size(centre5):
    C = centre5
    n = C.n
    span = (10.0, 1e4)

    def norms(amp):
        forcings = {0: Dy.model_forcing(C, 0, amplitude=amp)}
        forcings.update({r: Dy.model_forcing(C, r, amplitude=amp) for r in range(n + 1, 3 * n)})
        sol = Dy.integrate_reduced_system(C, forcings, span, samples=40)
        lam = np.max(np.abs(sol.lam) * Dy.mu0(sol.times, C) ** -1.5)
        a = np.max(np.linalg.norm(sol.a, axis=1) * Dy.mu0(sol.times, C) ** -0.5)
        return np.array([lam, a])

    ratio = norms(1.0) / norms(0.5)
    assert np.all(np.abs(ratio / 2 - 1) < 0.2)


def test_slow_forcing_tail_reported(centre5):
    with pytest.raises(Dy.StepSizeError) as info:
        Dy.integrate_reduced_system(centre5, {6: lambda t: t**-0.5}, (10.0, 100.0))
    assert info.value.t > 0


def test_invalid_span_and_row(centre5):
    with pytest.raises(Dy.DynamicsError):
        Dy.integrate_reduced_system(centre5, None, (10.0, 5.0))
    with pytest.raises(Dy.DynamicsError):
        Dy.model_forcing(centre5, 15)


def test_solution_csv_and_trajectory(centre5):
    f = Dy.model_forcing(centre5, 0)
    sol = Dy.integrate_reduced_system(centre5, {0: f}, (10.0, 1e3), samples=20)
    rows = sol.to_csv().strip().split("\n")
    assert len(rows) == 21 and len(rows[0].split(",")) == 2 + 5 + 2 + 7
    tr = sol.trajectory(centre5)
    t = float(sol.times[7])
    assert float(tr.mu(t)) == pytest.approx(centre5.b * float(Dy.mu0(t, centre5)) + sol.lam[7], rel=1e-12)


def test_from_samples_rejects_unsorted_times():
    with pytest.raises(Dy.DynamicsError):
        Dy.ParamTrajectory.from_samples(5, [1.0, 0.5], [1.0, 1.0])
