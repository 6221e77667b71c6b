"""Duhamel heat potentials that cancel the slowly decaying parts of the error.

Each potential has the form

    phi(x, t) = int_{t0}^t int p(t - s, x - y) S(y, s) dy ds,

with the heat kernel p(t, x) = (4 pi t)^{-n/2} exp(-|x|^2/4t) and a source S
that is radial (dilation) or radial times a linear function (translation,
Kelvin) about xi(s).  The spatial convolution is reduced to a single radial
integral with modified Bessel kernels; the time integral runs over
log(t - s) with composite Gauss-Legendre panels.

Sign convention: phi solves phi_t = Delta phi + S.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline

from . import quadrature
from .dynamics import ParamTrajectory
from .profiles import sphere_area

logger = logging.getLogger(__name__)

KINDS = ("dilation", "translation", "kelvin")


class HeatPotentialError(ValueError):
    pass


@dataclass(frozen=True)
class HeatPotentialSpec:
    """Which potential to evaluate and how.

    ``kind`` is "dilation" (Phi^0), "translation" (Phi^1) or "kelvin"
    (Phi^{2,i}, component ``index`` in {1, 2}).  ``panel_width`` is the
    width of the log(t - s) panels and ``time_order`` the Gauss-Legendre
    order per panel.
    """

    n: int
    t0: float
    trajectory: ParamTrajectory
    kind: str = "dilation"
    D: float = 1.0
    E: float = 0.0
    index: int = 1
    panel_width: float = 0.5
    time_order: int = 10
    radial_order: int = 12
    gauss_window: float = 14.0
    tau_floor: float = 1e-10

    def __post_init__(self):
        if self.n < 5:
            raise HeatPotentialError("n >= 5 required")
        if self.kind not in KINDS:
            raise HeatPotentialError(f"unknown kind {self.kind!r}")
        if self.kind == "kelvin" and self.index not in (1, 2):
            raise HeatPotentialError("kelvin index must be 1 or 2")
        if self.t0 <= 0:
            raise HeatPotentialError("t0 must be positive")

    def refined(self) -> "HeatPotentialSpec":
        return replace(self, panel_width=self.panel_width / 2)


# --------------------------------------------------------------------------
# radial heat kernel


def _scaled_bessel(nu: float, z: np.ndarray) -> np.ndarray:
    """z^{-nu} I_nu(z) e^{-z}, with the series near z = 0."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 1e-4
    zs = z[small]
    c0 = 1.0 / (2**nu * special.gamma(nu + 1))
    out[small] = c0 * (1 + zs * zs / (4 * (nu + 1))) * np.exp(-zs)
    # ive returns nan beyond ~2^32; use the Hankel expansion there
    big = z > 1e8
    mid = ~(small | big)
    zb = z[mid]
    out[mid] = zb ** (-nu) * special.ive(nu, zb)
    zl = z[big]
    m = 4 * nu * nu
    series = 1 - (m - 1) / (8 * zl) + (m - 1) * (m - 9) / (2 * (8 * zl) ** 2)
    out[big] = zl ** (-nu) * series / np.sqrt(2 * math.pi * zl)
    return out


def radial_kernel(n: int, tau, r, rho, harmonic: int = 0) -> np.ndarray:
    """Kernel K with int p(tau, x - y) w(|y|) (e . y)^l dy = (e . x/|x|)^l int w(rho) rho^l K rho^{n-1} drho.

    harmonic 0 gives the spherical mean of the heat kernel; harmonic 1 the
    first moment.
    """
    tau = np.asarray(tau, dtype=float)
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    z = r * rho / (2 * tau)
    pref = (4 * math.pi * tau) ** (-n / 2) * (2 * math.pi) ** (n / 2) * np.exp(-((r - rho) ** 2) / (4 * tau))
    if harmonic == 0:
        return pref * _scaled_bessel(n / 2 - 1, z)
    if harmonic == 1:
        return pref * z * _scaled_bessel(n / 2, z)
    raise HeatPotentialError("harmonic must be 0 or 1")


_RAD_NODES = {}


def _gl(order: int):
    if order not in _RAD_NODES:
        _RAD_NODES[order] = np.polynomial.legendre.leggauss(order)
    return _RAD_NODES[order]


def _radial_nodes(r: float, tau: float, mu: float, window: float, order: int):
    """Gauss-Legendre nodes on the support of the Gaussian factor, refined at scale mu."""
    st = math.sqrt(tau)
    lo = max(0.0, r - window * st)
    hi = r + window * st
    cuts = {lo, hi}
    for c in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0):
        cuts.add(r - c * st)
        cuts.add(r + c * st)
    cuts.add(r)
    j = mu * 2.0 ** np.arange(-8, 40)
    cuts.update(j[(j > lo) & (j < hi)].tolist())
    edges = np.array(sorted(c for c in cuts if lo <= c <= hi))
    edges = edges[np.concatenate([[True], np.diff(edges) > 1e-14 * max(hi, 1e-300)])]
    x, w = _gl(order)
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (half[:, None] * x[None, :] + (0.5 * (a + b))[:, None]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _source_profile(kind: str, n: int, D: float, E: float, yp: np.ndarray) -> np.ndarray:
    s = yp * yp
    if kind == "dilation":
        return D * (2 - s) / (1 + s) ** (n / 2)
    if kind == "translation":
        return (1 + s) ** (-n / 2)
    return (E * s - 2 * D * (2 - s)) / (1 + s) ** (n / 2)


def _source_parts(spec: HeatPotentialSpec, s: float, x: np.ndarray):
    """(coefficient, dipole vector or None, xi, mu) for the source at time s."""
    tr = spec.trajectory
    mu = float(tr.mu(s))
    if mu <= 0:
        raise HeatPotentialError(f"mu must stay positive, got {mu} at s={s}")
    xi = np.asarray(tr.xi(s), dtype=float)
    n = spec.n
    if spec.kind == "dilation":
        return -float(tr.mu_dot(s)) / mu * mu ** (2 - n), None, xi, mu
    if spec.kind == "translation":
        return -spec.E * mu ** (-n), np.asarray(tr.xi_dot(s), dtype=float), xi, mu
    adot = float(np.asarray(tr.a_dot(s))[spec.index - 1])
    v = np.zeros(n)
    v[spec.index - 1] = 1.0
    return -adot * mu ** (1 - n), v, xi, mu


def source_term(spec: HeatPotentialSpec, x, t: float) -> float:
    """S(x, t), the right-hand side in phi_t = Delta phi + S."""
    x = np.asarray(x, dtype=float)
    coef, v, xi, mu = _source_parts(spec, t, x)
    d = x - xi
    prof = _source_profile(spec.kind, spec.n, spec.D, spec.E, np.array(np.linalg.norm(d) / mu))
    lin = 1.0 if v is None else float(v @ d)
    return float(coef * prof * lin)


def _spatial(spec: HeatPotentialSpec, x: np.ndarray, s: float, tau: float) -> float:
    """int p(tau, x - y) S(y, s) dy."""
    coef, v, xi, mu = _source_parts(spec, s, x)
    if coef == 0 or (v is not None and not np.any(v)):
        return 0.0
    d = x - xi
    r = float(np.linalg.norm(d))
    n = spec.n
    if v is None:
        harmonic, direction = 0, 1.0
    else:
        if r == 0:
            return 0.0
        harmonic, direction = 1, float(v @ d) / r
    rho, w = _radial_nodes(r, tau, mu, spec.gauss_window, spec.radial_order)
    prof = _source_profile(spec.kind, n, spec.D, spec.E, rho / mu)
    ker = radial_kernel(n, tau, r, rho, harmonic)
    val = float(np.dot(w, prof * ker * rho ** (n - 1 + harmonic)))
    return coef * direction * val


def _time_nodes(spec: HeatPotentialSpec, t: float, mu_t: float, t_lo: float | None = None):
    """Nodes and weights in tau = t - s on [tau_floor mu^2, t - t_lo]."""
    t_lo = spec.t0 if t_lo is None else t_lo
    tau_max = t - t_lo
    tau_min = spec.tau_floor * mu_t * mu_t
    if tau_max <= tau_min:
        return np.zeros(0), np.zeros(0), tau_min
    u0, u1 = math.log(tau_min), math.log(tau_max)
    m = max(1, int(math.ceil((u1 - u0) / spec.panel_width)))
    edges = np.linspace(u0, u1, m + 1)
    x, w = _gl(spec.time_order)
    half = 0.5 * np.diff(edges)
    us = (half[:, None] * x + (0.5 * (edges[:-1] + edges[1:]))[:, None]).ravel()
    ws = (half[:, None] * w).ravel()
    taus = np.exp(us)
    return taus, ws * taus, tau_min


def potential(spec: HeatPotentialSpec, x, t: float, t_lo: float | None = None, t_hi_gap: float = 0.0) -> float:
    """Evaluate the potential at (x, t).

    ``t_lo`` and ``t_hi_gap`` restrict the source times to [t_lo, t - t_hi_gap],
    which isolates pieces of the time integral.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise HeatPotentialError(f"x must have shape ({spec.n},)")
    if t < spec.t0:
        raise HeatPotentialError("t must be >= t0")
    if t == spec.t0:
        return 0.0
    mu_t = float(spec.trajectory.mu(t))
    taus, ws, tau_min = _time_nodes(spec, t, mu_t, t_lo)
    if t_hi_gap > 0:
        keep = taus >= t_hi_gap
        taus, ws = taus[keep], ws[keep]
        tau_min = 0.0
    total = 0.0
    for tau, w in zip(taus, ws):
        total += w * _spatial(spec, x, t - tau, tau)
    if tau_min > 0:
        # the first sliver [0, tau_min] where the kernel is still a delta
        total += tau_min * source_term(spec, x, t)
    return total


def phi0(spec: HeatPotentialSpec, x, t: float) -> float:
    if spec.kind != "dilation":
        spec = replace(spec, kind="dilation")
    return potential(spec, x, t)


def phi1(spec: HeatPotentialSpec, x, t: float) -> float:
    if spec.kind != "translation":
        spec = replace(spec, kind="translation")
    return potential(spec, x, t)


def phi2i(spec: HeatPotentialSpec, i: int, x, t: float) -> float:
    spec = replace(spec, kind="kelvin", index=i)
    return potential(spec, x, t)


# --------------------------------------------------------------------------
# centre evaluation through F


@lru_cache(maxsize=16)
def _f_table(n: int):
    """Spline of log F(a)/F-shape on log a for D = 1, plus the large-a coefficient."""
    a = np.geomspace(1e-4, 1e4, 321)
    vals = np.array([quadrature.F_of_a(float(x), 1.0, n) for x in a])
    return CubicSpline(np.log(a), vals * (1 + a * a) ** ((n - 2) / 2)), quadrature.F_large_a_coefficient(1.0, n)


def F_interp(a, n: int, D: float = 1.0) -> np.ndarray:
    """F(a) for source coefficient D from a cached spline."""
    spline, coef = _f_table(n)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    out = np.empty_like(a)
    lo = a < 1e-4
    hi = a > 1e4
    mid = ~(lo | hi)
    out[lo] = quadrature.F_of_a(0.0, 1.0, n)
    out[hi] = coef * a[hi] ** (2 - n)
    out[mid] = spline(np.log(a[mid])) * (1 + a[mid] ** 2) ** (-(n - 2) / 2)
    return D * out


def phi0_center(spec: HeatPotentialSpec, t: float, t_lo: float | None = None, t_hi_gap: float = 0.0) -> float:
    """Phi^0 at x = xi(t) assuming xi is constant in time; uses F(sqrt(t - s)/mu(s))."""
    if t <= spec.t0:
        return 0.0
    tr = spec.trajectory
    mu_t = float(tr.mu(t))
    taus, ws, tau_min = _time_nodes(spec, t, mu_t, t_lo)
    if t_hi_gap > 0:
        keep = taus >= t_hi_gap
        taus, ws = taus[keep], ws[keep]
        tau_min = 0.0
    ss = t - taus
    mus = np.array([float(tr.mu(s)) for s in ss])
    mdots = np.array([float(tr.mu_dot(s)) for s in ss])
    vals = -(mdots / mus) * mus ** (2 - spec.n) * F_interp(np.sqrt(taus) / mus, spec.n, spec.D)
    total = float(np.dot(ws, vals))
    if tau_min > 0:
        total += tau_min * (-(float(tr.mu_dot(t)) / mu_t) * mu_t ** (2 - spec.n) * 2 * spec.D)
    return total


def split_contributions(spec: HeatPotentialSpec, t: float, delta: float) -> tuple[float, float]:
    """(far, near) parts of Phi^0 at the centre: source times in [t0, t - delta] and [t - delta, t]."""
    far = phi0_center(spec, t, t_hi_gap=delta)
    total = phi0_center(spec, t)
    return far, total - far


def limit_value(constants) -> float:
    """B b^{4-n}, the large-time value of Phi^0 at the concentration point."""
    return constants.B * constants.b ** (4 - constants.n)


def limit_scale(constants, D: float) -> float:
    """2 b^{4-n} int s|F(s)| ds / ((n-4) c_n^{n-4}), the size of the terms that cancel in the limit."""
    n = constants.n
    mass = _abs_moment(n) * abs(D)
    return 2 * constants.b ** (4 - n) * mass / ((n - 4) * constants.c_n ** (n - 4))


@lru_cache(maxsize=8)
def _abs_moment(n: int) -> float:
    """int_0^inf s |F(s)| ds for D = 1."""
    from scipy import integrate

    coef = quadrature.F_large_a_coefficient(1.0, n)
    f = lambda s: s * abs(float(F_interp(s, n)[0]))
    total = 0.0
    edges = [0.0, 0.5, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += integrate.quad(f, lo, hi, limit=200)[0]
    total += abs(coef) * 1024.0 ** (4 - n) / (n - 4)
    return total


# --------------------------------------------------------------------------
# checks


def residual_check(spec: HeatPotentialSpec, samples, ht_rel: float = 1e-4, hx_rel: float = 0.02) -> float:
    """Max over samples of |-phi_t + Delta phi + S| / max |S| by central differences.

    ``samples`` is a list of (x, t).  Spatial steps are ``hx_rel`` mu(t),
    temporal steps ``ht_rel`` t.
    """
    worst = 0.0
    smax = 0.0
    n = spec.n
    for x, t in samples:
        x = np.asarray(x, dtype=float)
        mu = float(spec.trajectory.mu(t))
        hx = hx_rel * mu
        ht = ht_rel * t
        p0 = potential(spec, x, t)
        pt = (potential(spec, x, t + ht) - potential(spec, x, t - ht)) / (2 * ht)
        lap = 0.0
        for e in np.eye(n):
            lap += potential(spec, x + hx * e, t) + potential(spec, x - hx * e, t) - 2 * p0
        lap /= hx * hx
        src = source_term(spec, x, t)
        worst = max(worst, abs(-pt + lap + src))
        smax = max(smax, abs(src))
    if smax == 0:
        return worst
    return worst / smax


def decay_profile_check(spec: HeatPotentialSpec, t: float, radii=None, direction=None) -> tuple[float, float]:
    """Fit log|phi| against log(1 + |y|) for |y| in [5, 50]; returns (slope, amplitude)."""
    n = spec.n
    ys = np.geomspace(5, 50, 9) if radii is None else np.asarray(radii, dtype=float)
    e = np.eye(n)[spec.index - 1 if spec.kind == "kelvin" else 0] if direction is None else np.asarray(direction, dtype=float)
    mu = float(spec.trajectory.mu(t))
    xi = np.asarray(spec.trajectory.xi(t), dtype=float)
    vals = np.array([potential(spec, xi + mu * y * e, t) for y in ys])
    if np.any(vals == 0):
        raise HeatPotentialError("potential vanishes on the fit window")
    slope, icpt = np.polyfit(np.log1p(ys), np.log(np.abs(vals)), 1)
    return float(slope), float(math.exp(icpt))


def scan_csv(spec: HeatPotentialSpec, times, radii) -> str:
    """CSV rows (t, |y|, value) along the first axis."""
    lines = ["t,y,value"]
    e = np.eye(spec.n)[0]
    for t in times:
        mu = float(spec.trajectory.mu(t))
        xi = np.asarray(spec.trajectory.xi(t), dtype=float)
        for y in radii:
            v = potential(spec, xi + mu * y * e, t)
            lines.append(f"{t:.10e},{y:.10e},{v:.12e}")
    return "\n".join(lines) + "\n"
