"""Blow-up constants and the reduced ODE system for the modulation parameters.

The scaling parameter is mu(t) = b mu0(t) + lambda(t) with mu0(t) = c_n t^{-1/(n-4)}.
The remaining parameters are xi (centre), a (Kelvin directions) and theta
(rotation angles).  Forcings are plain callables of time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from . import quadrature

logger = logging.getLogger(__name__)

Forcing = Callable[[float], float]


class DynamicsError(ValueError):
    """Invalid constants or inputs."""


class StepSizeError(ArithmeticError):
    """Adaptive integration could not meet tolerance."""

    def __init__(self, msg: str, t: float):
        super().__init__(f"{msg} at t={t:.6g}")
        self.t = t


# --------------------------------------------------------------------------
# constants


def solve_b(H_qq: float, n: int) -> float:
    """Positive root of H b^{n-3} = 2b/(n-2), i.e. b = (2/((n-2)H))^{1/(n-4)}."""
    if n < 5:
        raise DynamicsError("n >= 5 required")
    if not H_qq > 0:
        raise DynamicsError("H(q,q) must be positive")
    return (2.0 / ((n - 2) * H_qq)) ** (1.0 / (n - 4))


def b_residual(b: float, H_qq: float, n: int) -> float:
    """Relative residual of H b^{n-3} - 2b/(n-2)."""
    lhs = H_qq * b ** (n - 3)
    rhs = 2 * b / (n - 2)
    return abs(lhs - rhs) / abs(rhs)


def translation_coefficient(n: int, spec: quadrature.QuadratureSpec = quadrature.DEFAULT_SPEC) -> float:
    """-p int U^{p-1} y_l d_l U / int (d_l U)^2 for the bubble U.

    Integration by parts turns the numerator into int U^p.
    """
    return quadrature.integral_u_p(n, spec) / quadrature.integral_z1_squared(n, spec)


@dataclass(frozen=True)
class BlowupConstants:
    """Constants of the leading-order blow-up law.

    ``c_n`` and ``B`` are derived from (c1, c2, A); ``b`` from ``H_qq``.
    """

    n: int
    c1: float
    c2: float
    A: float
    H_qq: float
    gradH: tuple = ()
    translation_coef: float = 0.0
    c_n: float = field(init=False)
    b: float = field(init=False)
    B: float = field(init=False)

    def __post_init__(self):
        n = self.n
        if n < 5:
            raise DynamicsError("n >= 5 required")
        if self.c1 == 0:
            raise DynamicsError("c1 must be nonzero")
        base = (2 * self.c1 * self.A + self.c2) * (n - 2) / (2 * (n - 4) * self.c1)
        if not base > 0:
            raise DynamicsError(f"(2 c1 A + c2)/c1 must be positive, got base {base:.6g}")
        object.__setattr__(self, "c_n", base ** (1.0 / (n - 4)))
        object.__setattr__(self, "b", solve_b(self.H_qq, n))
        object.__setattr__(self, "B", 2 * self.A / ((n - 4) * base))
        if not self.gradH:
            object.__setattr__(self, "gradH", (0.0,) * n)
        if len(self.gradH) != n:
            raise DynamicsError("gradH has wrong dimension")

    @property
    def mu0_rate(self) -> float:
        """K in mu0' = -K mu0^{n-3}."""
        return 2 * self.c1 / ((2 * self.c1 * self.A + self.c2) * (self.n - 2))

    @property
    def drift(self) -> np.ndarray:
        """c b^{n-2} grad H(q,q), the coefficient of mu0^{n-2} in xi'."""
        return self.translation_coef * self.b ** (self.n - 2) * np.asarray(self.gradH, dtype=float)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "c1": self.c1,
            "c2": self.c2,
            "A": self.A,
            "B": self.B,
            "c_n": self.c_n,
            "b": self.b,
            "H_qq": self.H_qq,
            "gradH": list(self.gradH),
            "translation_coef": self.translation_coef,
        }


def mu0(t, constants: BlowupConstants):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DynamicsError("t must be positive")
    return constants.c_n * t ** (-1.0 / (constants.n - 4))


def mu0_dot(t, constants: BlowupConstants):
    n = constants.n
    return -mu0(t, constants) / ((n - 4) * np.asarray(t, dtype=float))


def mu0_consistency(constants: BlowupConstants, times: Sequence[float] | None = None) -> float:
    """Max relative residual of mu0' + K mu0^{n-3} at sample times."""
    ts = np.geomspace(1.0, 1e6, 25) if times is None else np.asarray(times, dtype=float)
    m = mu0(ts, constants)
    res = mu0_dot(ts, constants) + constants.mu0_rate * m ** (constants.n - 3)
    return float(np.max(np.abs(res) / np.abs(mu0_dot(ts, constants))))


def weighted_norm_delta(h: Callable, delta: float, constants: BlowupConstants, times: Sequence[float]) -> float:
    """sup over ``times`` of |mu0(t)^{-delta} h(t)|; vector-valued h uses the Euclidean norm."""
    ts = np.asarray(times, dtype=float)
    vals = np.array([np.linalg.norm(np.atleast_1d(h(t))) for t in ts])
    return float(np.max(vals * mu0(ts, constants) ** (-delta)))


# --------------------------------------------------------------------------
# trajectories


def _const(v):
    return lambda t: v


@dataclass(frozen=True)
class ParamTrajectory:
    """Time-dependent modulation parameters with their derivatives.

    All members are callables of t.  ``mu`` is the full scaling parameter;
    ``lam`` is its deviation from b mu0 when that split is meaningful.
    """

    n: int
    t0: float
    mu: Callable
    mu_dot: Callable
    xi: Callable
    xi_dot: Callable
    a: Callable
    a_dot: Callable
    theta: Callable
    theta_dot: Callable
    lam: Callable | None = None
    lam_dot: Callable | None = None
    sigma: float = 0.5
    t_end: float = math.inf

    @classmethod
    def self_similar(cls, constants: BlowupConstants, t0: float, q=None, scale: float = 1.0) -> "ParamTrajectory":
        """mu = scale * b c_n t^{-1/(n-4)}, xi = q, a = theta = 0."""
        n = constants.n
        q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
        bc = scale * constants.b * constants.c_n
        e = 1.0 / (n - 4)
        zeros2 = np.zeros(2)
        zerosr = np.zeros(2 * n - 3)
        return cls(
            n=n,
            t0=t0,
            mu=lambda t: bc * t ** (-e),
            mu_dot=lambda t: -e * bc * t ** (-e - 1),
            xi=_const(q),
            xi_dot=_const(np.zeros(n)),
            a=_const(zeros2),
            a_dot=_const(zeros2),
            theta=_const(zerosr),
            theta_dot=_const(zerosr),
            lam=_const(0.0),
            lam_dot=_const(0.0),
        )

    @classmethod
    def frozen(cls, n: int, t0: float, mu: float, xi=None) -> "ParamTrajectory":
        xi = np.zeros(n) if xi is None else np.asarray(xi, dtype=float)
        return cls(
            n=n,
            t0=t0,
            mu=_const(float(mu)),
            mu_dot=_const(0.0),
            xi=_const(xi),
            xi_dot=_const(np.zeros(n)),
            a=_const(np.zeros(2)),
            a_dot=_const(np.zeros(2)),
            theta=_const(np.zeros(2 * n - 3)),
            theta_dot=_const(np.zeros(2 * n - 3)),
        )

    @classmethod
    def power_law(
        cls,
        n: int,
        t0: float,
        mu_coef: float,
        mu_exp: float,
        q=None,
        xi_dir=None,
        xi_coef: float = 0.0,
        xi_exp: float = 1.0,
        a_coef=(0.0, 0.0),
        a_exp: float = 1.0,
    ) -> "ParamTrajectory":
        """Closed-form trajectory mu = m t^{-e}, xi = q + c t^{-f} dir, a_i = c_i t^{-g}."""
        q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
        d = np.eye(n)[0] if xi_dir is None else np.asarray(xi_dir, dtype=float)
        ac = np.asarray(a_coef, dtype=float)
        zr = np.zeros(2 * n - 3)
        return cls(
            n=n,
            t0=t0,
            mu=lambda t: mu_coef * t ** (-mu_exp),
            mu_dot=lambda t: -mu_exp * mu_coef * t ** (-mu_exp - 1),
            xi=lambda t: q + xi_coef * t ** (-xi_exp) * d,
            xi_dot=lambda t: -xi_exp * xi_coef * t ** (-xi_exp - 1) * d,
            a=lambda t: ac * t ** (-a_exp),
            a_dot=lambda t: -a_exp * ac * t ** (-a_exp - 1),
            theta=_const(zr),
            theta_dot=_const(zr),
        )

    @classmethod
    def from_samples(
        cls,
        n: int,
        times,
        mu,
        xi=None,
        a=None,
        theta=None,
        lam=None,
        sigma: float = 0.5,
    ) -> "ParamTrajectory":
        """Cubic-spline trajectory through sampled values; derivatives from the splines."""
        ts = np.asarray(times, dtype=float)
        if np.any(np.diff(ts) <= 0):
            raise DynamicsError("sample times must be strictly increasing")
        m = len(ts)

        def spline(vals, width):
            if vals is None:
                vals = np.zeros((m, width))
            vals = np.asarray(vals, dtype=float).reshape(m, -1)
            sp = CubicSpline(ts, vals, axis=0)
            der = sp.derivative()
            if vals.shape[1] == 1:
                return (lambda t: float(sp(t)[0])), (lambda t: float(der(t)[0]))
            return (lambda t: sp(t)), (lambda t: der(t))

        mu_f, mu_d = spline(mu, 1)
        xi_f, xi_d = spline(xi, n)
        a_f, a_d = spline(a, 2)
        th_f, th_d = spline(theta, 2 * n - 3)
        lam_f, lam_d = (None, None) if lam is None else spline(lam, 1)
        return cls(n, float(ts[0]), mu_f, mu_d, xi_f, xi_d, a_f, a_d, th_f, th_d, lam_f, lam_d, sigma, float(ts[-1]))

    def snapshot(self, t: float) -> dict:
        return {
            "t": t,
            "mu": float(self.mu(t)),
            "xi": np.asarray(self.xi(t), dtype=float),
            "a": np.asarray(self.a(t), dtype=float),
            "theta": np.asarray(self.theta(t), dtype=float),
        }


# --------------------------------------------------------------------------
# explicit solutions


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _log_quad(f: Callable[[float], float], a: float, b: float = math.inf, span: float = 80.0) -> float:
    """int_a^b f(s) ds via s = a e^u and 24-point Gauss-Legendre on unit panels in u.

    An infinite upper limit is truncated at u = ``span``, ample for the
    power-law forcings used here.
    """
    u_end = span if math.isinf(b) else math.log(b / a)
    if u_end <= 0:
        return 0.0
    edges = np.append(np.arange(0.0, u_end, 1.0), u_end)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        us = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
        ss = a * np.exp(us)
        vals = np.array([f(x) for x in ss], dtype=float)
        total += 0.5 * (hi - lo) * float(np.dot(_GL_WEIGHTS, vals * ss))
    return total


def lambda_exponent(n: int) -> float:
    """(1 + (n-4))/(n-4) = (n-3)/(n-4)."""
    return (n - 3) / (n - 4)


def lambda_solution(d: float, h: Forcing | None, t0: float, n: int) -> Callable[[float], float]:
    """Solution of lambda' + (n-3)/((n-4)t) lambda = h with t0^{kappa} lambda(t0) = d."""
    kap = lambda_exponent(n)

    def lam(t):
        t = float(t)
        acc = d
        if h is not None and t > t0:
            acc += _log_quad(lambda s: s**kap * h(s), t0, t)
        return t ** (-kap) * acc

    return lam


def xi_solution(h: Callable | None, constants: BlowupConstants, q=None) -> Callable[[float], np.ndarray]:
    """xi(t) = q - int_t^inf xi'(s) ds with xi' = drift mu0^{n-2} + h.

    The drift part is in closed form; h is integrated numerically.
    """
    n = constants.n
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    drift = constants.drift
    e = (n - 2) / (n - 4)

    def xi(t):
        t = float(t)
        # int_t^inf c_n^{n-2} s^{-e} ds
        tail = constants.c_n ** (n - 2) * t ** (1 - e) / (e - 1)
        out = q - drift * tail
        if h is not None:
            comps = []
            for i in range(n):
                comps.append(_log_quad(lambda s: np.atleast_1d(h(s))[i], t))
            out = out - np.asarray(comps)
        return out

    return xi


# --------------------------------------------------------------------------
# model forcings


def model_forcing(
    constants: BlowupConstants, row: int, amplitude: float = 1.0, sigma: float = 0.5, f: Forcing | None = None
) -> Forcing:
    """Forcing with the leading structure of row ``row`` of the reduced system.

    Row 0: amplitude mu0^{n-3+sigma} f.  Rows 1..n: drift_l mu0^{n-2} + amplitude mu0^{n-2+sigma} f.
    Rows n+1..3n-1: amplitude mu0^{n-2+sigma} f.
    """
    n = constants.n
    if not 0 <= row <= 3 * n - 1:
        raise DynamicsError(f"row {row} out of range")
    fn = f if f is not None else (lambda t: 1.0)
    drift = constants.drift

    if row == 0:
        return lambda t: amplitude * float(mu0(t, constants)) ** (n - 3 + sigma) * fn(t)
    if row <= n:
        dl = float(drift[row - 1])
        return lambda t: dl * float(mu0(t, constants)) ** (n - 2) + amplitude * float(mu0(t, constants)) ** (n - 2 + sigma) * fn(t)
    return lambda t: amplitude * float(mu0(t, constants)) ** (n - 2 + sigma) * fn(t)


# --------------------------------------------------------------------------
# reduced system


def _adaptive_trapezoid(
    g: Callable[[float], float], stops: np.ndarray, rtol: float, atol: float, max_steps: int = 500_000
) -> np.ndarray:
    """Integrate w' = g(t) with the trapezoid rule and step doubling.

    Steps are taken in log t and land exactly on every entry of ``stops``
    (increasing, first entry is the start).  Each accepted step keeps the
    Richardson-extrapolated value.  Returns the cumulative integral at ``stops``.
    """
    us_stop = np.log(np.asarray(stops, dtype=float))
    gu = lambda u: g(math.exp(u)) * math.exp(u)
    out = np.zeros(len(us_stop))
    u = us_stop[0]
    w = 0.0
    du = (us_stop[-1] - u) / 256
    gcur = gu(u)
    steps = 0
    scale = 0.0
    for j in range(1, len(us_stop)):
        target = us_stop[j]
        while u < target - 1e-14:
            du = min(du, target - u)
            gm = gu(u + du / 2)
            ge = gu(u + du)
            coarse = 0.5 * du * (gcur + ge)
            fine = 0.25 * du * (gcur + 2 * gm + ge)
            err = abs(fine - coarse) / 3
            scale = max(scale, abs(w + fine))
            if err <= atol + rtol * scale or du < 1e-12:
                w += fine + (fine - coarse) / 3
                u += du
                gcur = ge
                if err < 0.1 * (atol + rtol * scale):
                    du *= 2
            else:
                du /= 2
            steps += 1
            if steps > max_steps:
                raise StepSizeError("adaptive trapezoid exceeded step budget", math.exp(u))
        u = target
        out[j] = w
    return out


def _power_tail(g: Callable[[float], float], t: float) -> float:
    """int_t^inf g for g ~ C s^{-m}, with m measured from two nearby samples."""
    g1, g2 = g(t), g(2 * t)
    if g1 == 0:
        return 0.0
    if g2 == 0 or g1 * g2 < 0:
        raise StepSizeError("forcing tail is not a clean power law", t)
    m = -math.log(abs(g2 / g1)) / math.log(2)
    if m <= 1:
        raise StepSizeError(f"forcing decays too slowly for a finite tail (exponent {m:.3g})", t)
    return g1 * t / (m - 1)


@dataclass
class ReducedSolution:
    """Sampled solution of the reduced system on [t0, t1]."""

    n: int
    times: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    a: np.ndarray
    theta: np.ndarray

    def row(self, index: int) -> np.ndarray:
        if index == 0:
            return self.lam
        if index <= self.n:
            return self.xi[:, index - 1]
        k = index - self.n - 1
        # row order: theta12, a1, a2, theta1l (l=3..n), theta2l (l=3..n)
        if k == 0:
            return self.theta[:, 0]
        if k in (1, 2):
            return self.a[:, k - 1]
        return self.theta[:, k - 2]

    def to_csv(self) -> str:
        n = self.n
        head = ["t", "lambda"] + [f"xi{i+1}" for i in range(n)] + ["a1", "a2"] + [f"theta{i}" for i in range(2 * n - 3)]
        rows = [",".join(head)]
        for i, t in enumerate(self.times):
            vals = [t, self.lam[i], *self.xi[i], *self.a[i], *self.theta[i]]
            rows.append(",".join(f"{v:.12e}" for v in vals))
        return "\n".join(rows) + "\n"

    def trajectory(self, constants: BlowupConstants, sigma: float = 0.5) -> ParamTrajectory:
        mu = constants.b * mu0(self.times, constants) + self.lam
        return ParamTrajectory.from_samples(self.n, self.times, mu, self.xi, self.a, self.theta, self.lam, sigma)


def integrate_reduced_system(
    constants: BlowupConstants,
    forcings: Mapping[int, Forcing] | Sequence[Forcing | None] | None,
    t_span: tuple[float, float],
    d: float = 0.0,
    q=None,
    samples: int = 200,
    rtol: float = 1e-9,
    atol: float = 1e-300,
) -> ReducedSolution:
    """Integrate all 3n rows of the reduced parameter system.

    Row 0 (lambda) runs forward from t0 with integrating factor t^{(n-3)/(n-4)};
    lambda(t0) = d t0^{-(n-3)/(n-4)}.  The xi, a and theta rows are pinned at
    t = infinity (xi -> q, a, theta -> 0); their integrals over [t, t1] are
    computed adaptively and the tail beyond t1 from the forcing's power law.
    Rows n+1..3n-1 carry the 1/mu0 prefactor.
    """
    n = constants.n
    t0, t1 = map(float, t_span)
    if not 0 < t0 < t1:
        raise DynamicsError("need 0 < t0 < t1")
    if forcings is None:
        forcings = {}
    if not isinstance(forcings, Mapping):
        forcings = {i: f for i, f in enumerate(forcings) if f is not None}
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    times = np.geomspace(t0, t1, samples)
    kap = lambda_exponent(n)

    # lambda
    lam = d * times ** (-kap)
    if 0 in forcings:
        h = forcings[0]
        lam = (d + _adaptive_trapezoid(lambda s: s**kap * h(s), times, rtol, atol)) * times ** (-kap)

    total_rows = 3 * n
    terminal = np.zeros((samples, total_rows))
    for row in range(1, total_rows):
        if row not in forcings:
            continue
        f = forcings[row]
        g = f if row <= n else (lambda s, f=f: f(s) / float(mu0(s, constants)))
        cum = _adaptive_trapezoid(g, times, rtol, atol)
        tail = _power_tail(g, t1)
        # int_t^inf g = (W(t1) - W(t)) + tail
        terminal[:, row] = -(cum[-1] - cum + tail)

    xi = q + terminal[:, 1 : n + 1]
    theta = np.zeros((samples, 2 * n - 3))
    a = np.zeros((samples, 2))
    theta[:, 0] = terminal[:, n + 1]
    a[:, 0] = terminal[:, n + 2]
    a[:, 1] = terminal[:, n + 3]
    theta[:, 1:] = terminal[:, n + 4 :]
    return ReducedSolution(n, times, lam, xi, a, theta)


def fit_loglog_slope(t, values) -> float:
    t = np.asarray(t, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    return float(np.polyfit(np.log(t), np.log(v), 1)[0])
