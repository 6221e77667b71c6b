"""Scalar constants and Gram pairings of the reduction by quadrature.

Radial integrands reduce to one-dimensional integrals handled by QUADPACK
(``scipy.integrate.quad``) plus an analytic power-law tail.  Integrands built
from the tower are genuinely non-radial; they use a tensor Gauss-Legendre
rule in coordinates adapted to the (x1, x2)-plane, integrate one 2*pi/k
sector, and fold in the other sectors through the rotation action on the
kernel generators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .profiles import (
    BubbleProfile,
    KernelBasis,
    TowerProfile,
    _kernels_from,
    _scaled_bubble,
    alpha_n,
    critical_exponent,
    sphere_area,
)

logger = logging.getLogger(__name__)


class QuadratureError(ArithmeticError):
    """A quadrature did not reach its tolerance."""


class DivergenceError(QuadratureError):
    """The integrand tail is not integrable (or not cancelled)."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Tolerances for the 1-D reductions and the sector rules.

    ``radial_cutoff`` is the outer truncation radius; the remaining tail is
    added analytically from the integrand's power decay.
    """

    abs_tol: float = 1e-13
    rel_tol: float = 1e-11
    max_subdivisions: int = 200
    radial_cutoff: float = 1e4
    sector_order: int = 10

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.radial_cutoff <= 10:
            raise ValueError("radial_cutoff must exceed 10")

    def doubled(self) -> "QuadratureSpec":
        return QuadratureSpec(self.abs_tol, self.rel_tol, self.max_subdivisions, 2 * self.radial_cutoff, self.sector_order)


DEFAULT_SPEC = QuadratureSpec()


# --------------------------------------------------------------------------
# one-dimensional radial reductions


def _quad(f, a, b, spec, points=None):
    val, err = integrate.quad(
        f, a, b, epsabs=spec.abs_tol, epsrel=spec.rel_tol, limit=spec.max_subdivisions, points=points
    )
    return val, err


def _radial_breaks(cutoff: float) -> list[float]:
    breaks = [0.0, 0.25, 0.5, 1.0]
    while breaks[-1] * 2 < cutoff:
        breaks.append(breaks[-1] * 2)
    breaks.append(cutoff)
    return breaks


def radial_line_integral(g: Callable[[float], float], spec: QuadratureSpec = DEFAULT_SPEC, decay: float | None = None) -> float:
    """int_0^inf g(r) dr with a power-law tail beyond the cutoff.

    ``decay`` is the exponent m with g(r) ~ C r^{-m}; when omitted it is
    estimated from g at the cutoff and at half the cutoff.
    """
    cut = spec.radial_cutoff
    total = 0.0
    err_total = 0.0
    breaks = _radial_breaks(cut)
    for a, b in zip(breaks[:-1], breaks[1:]):
        val, err = _quad(g, a, b, spec)
        total += val
        err_total += err
    g_cut = g(cut)
    if g_cut == 0.0:
        return total
    if decay is None:
        g_half = g(cut / 2)
        if g_half == 0.0 or np.sign(g_half) != np.sign(g_cut):
            raise QuadratureError("cannot estimate tail decay: integrand changes sign near cutoff")
        decay = math.log(abs(g_half / g_cut)) / math.log(2.0)
    if decay <= 1.0 + 1e-3:
        raise DivergenceError(f"integrand decays like r^-{decay:.3f}; tail not integrable")
    tail = g_cut * cut / (decay - 1.0)
    return total + tail


def radial_integral(f: Callable[[float], float], n: int, spec: QuadratureSpec = DEFAULT_SPEC, decay: float | None = None) -> float:
    """int_{R^n} f(|y|) dy for a radial integrand.

    ``decay`` is the exponent m in f(r) r^{n-1} ~ r^{-m}.
    """
    return sphere_area(n) * radial_line_integral(lambda r: f(r) * r ** (n - 1), spec, decay)


def _z0_radial(n: int, r: float) -> float:
    s = r * r
    return 0.5 * (n - 2) * alpha_n(n) * (1 - s) * (1 + s) ** (-n / 2)


def _u_radial(n: int, r: float) -> float:
    return alpha_n(n) * (1 + r * r) ** (-(n - 2) / 2)


def _dilation_profile(n: int, r):
    """(2 - r^2)/(1 + r^2)^{n/2}, the far-field shape of the dilation kernel."""
    s = r * r
    return (2 - s) * (1 + s) ** (-n / 2)


def integral_u_p(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int U^p by radial quadrature."""
    p = critical_exponent(n)
    return radial_integral(lambda r: _u_radial(n, r) ** p, n, spec, decay=3)


def integral_u_p_exact(n: int) -> float:
    """Closed form alpha^p |S^{n-1}| B(n/2, 1)/2."""
    p = critical_exponent(n)
    return alpha_n(n) ** p * sphere_area(n) * 0.5 * special.beta(n / 2, 1.0)


def c1_identity(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """(-p int U^{p-1} Z0, (n-2)/2 int U^p) for the single bubble, both by quadrature."""
    p = critical_exponent(n)
    lhs = -p * radial_integral(lambda r: _u_radial(n, r) ** (p - 1) * _z0_radial(n, r), n, spec, decay=3)
    rhs = 0.5 * (n - 2) * integral_u_p(n, spec)
    return lhs, rhs


def integral_z0_squared(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    return radial_integral(lambda r: _z0_radial(n, r) ** 2, n, spec, decay=n - 3)


def integral_z1_squared(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int (d_1 U)^2 = (1/n) int |grad U|^2."""
    a = alpha_n(n)
    return radial_integral(lambda r: ((n - 2) * a * r * (1 + r * r) ** (-n / 2)) ** 2 / n, n, spec, decay=n - 1)


def gamma_identity(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """Both sides of the closed-form evaluation of the D-corrected dilation pairing.

    lhs = int_{R^n} (Z0 - (n-2)/2 alpha_n (2-|y|^2)/(1+|y|^2)^{n/2}) Z0 dy,
    rhs = alpha_n (n-2)/2 sqrt(pi) 2^{-n} Gamma(n/2-1)/Gamma((n+1)/2).
    """
    if n < 5:
        raise ValueError("n >= 5 required")
    a = alpha_n(n)
    c = 0.5 * (n - 2) * a

    def integrand(r):
        z0 = _z0_radial(n, r)
        return (z0 - c * _dilation_profile(n, r)) * z0

    lhs = radial_integral(integrand, n, spec, decay=n - 1)
    rhs = a * 0.5 * (n - 2) * math.sqrt(math.pi) * 2.0**-n * math.gamma(n / 2 - 1) / math.gamma((n + 1) / 2)
    return lhs, rhs


def gamma_identity_factor(n: int) -> float:
    """Ratio lhs/rhs of :func:`gamma_identity`: (n-2)/2 alpha_n |S^{n-1}|.

    The closed form on the right equals (n-2)/2 alpha_n times the 1-D integral
    int_0^inf r^{n-1}(r^2-1)/(1+r^2)^n dr, while the n-dimensional pairing
    carries a further (n-2)/2 alpha_n from the second Z0 and the sphere area.
    """
    return 0.5 * (n - 2) * alpha_n(n) * sphere_area(n)


def gamma_identity_radial(n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int_0^inf r^{n-1}(r^2-1)/(1+r^2)^n dr, the 1-D integral behind the closed form."""
    return radial_line_integral(lambda r: r ** (n - 1) * (r * r - 1) * (1 + r * r) ** (-n), spec, decay=n - 1)


# --------------------------------------------------------------------------
# F(a) and A


def _heat_radial_weight(n: int) -> float:
    return sphere_area(n) * (4 * math.pi) ** (-n / 2)


def F_of_a(a: float, D: float, n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """F(a) = int p(1,x) D (2 - a^2|x|^2)/(1 + a^2|x|^2)^{n/2} dx with p(1,x) = (4 pi)^{-n/2} e^{-|x|^2/4}."""
    if a < 0:
        raise ValueError("a must be non-negative")
    a2 = a * a

    def g(r):
        s = a2 * r * r
        return math.exp(-r * r / 4) * (2 - s) * (1 + s) ** (-n / 2) * r ** (n - 1)

    pts = [x for x in (0.5 / a, 1.0 / a, 2.0 / a, 4.0 / a) if 0 < x < 40] if a > 0 else None
    val, _ = _quad(g, 0.0, 40.0, spec, points=pts)
    return D * _heat_radial_weight(n) * val


def F_large_a_coefficient(D: float, n: int) -> float:
    """lim a^{n-2} F(a) = -D E|X|^{2-n} for X ~ p(1, .)."""
    # E|X|^{2-n} = |S^{n-1}| (4 pi)^{-n/2} int r e^{-r^2/4} dr = |S^{n-1}| (4 pi)^{-n/2} * 2
    return -D * _heat_radial_weight(n) * 2.0


def const_A(D: float, n: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """A = int_0^inf s F(s) ds with the tail from the large-s asymptote of F."""
    if n <= 4:
        raise DivergenceError("A diverges for n <= 4")
    cut = spec.radial_cutoff
    breaks = _radial_breaks(cut)
    total = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        val, _ = _quad(lambda s: s * F_of_a(s, D, n, spec), lo, hi, spec)
        total += val
    # s F(s) ~ C s^{3-n}; use the measured value at the cutoff as C
    c_eff = F_of_a(cut, D, n, spec) * cut ** (n - 2)
    total += c_eff * cut ** (4 - n) / (n - 4)
    return total


def const_A_exact(D: float, n: int) -> float:
    """Closed form of A obtained by exchanging the s and x integrals.

    int_0^inf s (2 - s^2 r^2)/(1 + s^2 r^2)^{n/2} ds = r^{-2}(2/(n-2) - 2/((n-2)(n-4)))
    and E|X|^{-2} = 1/(2(n-2)), which gives D (n-5)/((n-2)^2 (n-4)).
    """
    return D * (n - 5) / ((n - 2) ** 2 * (n - 4))


def const_B(A: float, c1: float, c2: float, n: int) -> float:
    """B = 2A/((n-4) c_n^{n-4})."""
    cn_pow = (2 * c1 * A + c2) * (n - 2) / (2 * (n - 4) * c1)
    return 2 * A / ((n - 4) * cn_pow)


# --------------------------------------------------------------------------
# sector rule for tower integrals


def _gauss_legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def _gl_panels(breaks: Sequence[float], order: int):
    x0, w0 = _gauss_legendre(order)
    nodes, weights = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b <= a:
            continue
        h = 0.5 * (b - a)
        nodes.append(a + h * (x0 + 1))
        weights.append(h * w0)
    return np.concatenate(nodes), np.concatenate(weights)


def _bump(t):
    """Smooth partition weight: 1 for t <= 1/2, 0 for t >= 1."""
    t = np.asarray(t, dtype=float)
    u = np.clip(2 * (1 - t), 0.0, 1.0)  # 1 at t = 1/2, 0 at t = 1
    with np.errstate(divide="ignore", over="ignore"):
        f1 = np.where(u > 0, np.exp(-1 / np.where(u > 0, u, 1)), 0.0)
        f2 = np.where(u < 1, np.exp(-1 / np.where(u < 1, 1 - u, 1)), 0.0)
    return f1 / (f1 + f2)


def _transverse_design(n: int) -> np.ndarray:
    """Unit vectors +-e_3..+-e_n of R^{n-2}; averages polynomials of degree <= 3 exactly."""
    m = n - 2
    eye = np.eye(m)
    return np.concatenate([eye, -eye])


@dataclass
class PlanarRule:
    """Weighted point cloud for integrals over R^n (or a sector of it).

    The rule integrates functions of (x1, x2, x') whose dependence on the
    direction of x' is polynomial of degree <= 3.
    """

    points: np.ndarray
    weights: np.ndarray

    def integrate(self, func: Callable[[np.ndarray], np.ndarray], chunk: int = 100_000) -> np.ndarray:
        acc = None
        for i in range(0, len(self.weights), chunk):
            vals = func(self.points[i : i + chunk])
            part = np.tensordot(self.weights[i : i + chunk], vals, axes=(0, 0))
            acc = part if acc is None else acc + part
        return acc


def _spherical_block(n, r_nodes, r_w, b_nodes, b_w, p_nodes, p_w, center=None, even=False):
    """Tensor nodes x = c + R (sin b cos p, sin b sin p, cos b nu) with measure weights.

    With ``even`` only +e_l directions are used, which is exact for
    integrands even under x' -> -x' and of degree <= 2 in the direction.
    """
    nus = _transverse_design(n)
    if even:
        nus = nus[: n - 2]
    area = sphere_area(n - 2)  # |S^{n-3}|
    R, B, P = np.meshgrid(r_nodes, b_nodes, p_nodes, indexing="ij")
    W = (
        r_w[:, None, None] * b_w[None, :, None] * p_w[None, None, :]
        * R ** (n - 1) * np.sin(B) * np.cos(B) ** (n - 3)
    )
    R, B, P, W = R.ravel(), B.ravel(), P.ravel(), W.ravel()
    planar = np.stack([R * np.sin(B) * np.cos(P), R * np.sin(B) * np.sin(P)], axis=1)
    if center is not None:
        planar = planar + center[None, :2]
    rho = R * np.cos(B)
    pts = np.empty((len(R) * len(nus), n))
    pts[:, :2] = np.repeat(planar, len(nus), axis=0)
    pts[:, 2:] = (rho[:, None, None] * nus[None, :, :]).reshape(-1, n - 2)
    w = np.repeat(W * area / len(nus), len(nus))
    return pts, w


def _split(lo, hi, cuts):
    pts = sorted({lo, hi} | {c for c in cuts if lo < c < hi})
    return pts


def _interval_parts(lo, hi, windows):
    """Split [lo, hi] into alternating (interval, inside-window) pieces."""
    edges = {lo, hi}
    for a, b in windows:
        edges.update(v for v in (a, b) if lo < v < hi)
    edges = sorted(edges)
    parts = []
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        inside = any(wa <= mid <= wb for wa, wb in windows)
        parts.append(((a, b), inside))
    return parts


def build_planar_rule(
    n: int,
    phi_range: tuple[float, float],
    centers: np.ndarray,
    ball_radius: float,
    order: int = 10,
    r_max: float = 1e4,
    refine_angles: Sequence[float] = (),
    even: bool = False,
    half_ball: bool = False,
) -> PlanarRule:
    """Rule for int over {phi in phi_range} x R^{n-2}, with local balls at ``centers``.

    A smooth partition of unity splits the integrand between balls of radius
    ``ball_radius`` around each centre (local spherical coordinates, graded in
    the distance to the centre) and a global spherical grid (R, beta, phi).
    The global grid is refined only in the box around the satellites, where R
    is near the centres' radius, beta near the plane and phi near
    ``refine_angles``.  Balls must lie inside the angular range; with
    ``half_ball`` each ball is the half on the counter-clockwise side of its
    centre's ray, for ranges that start on a reflection plane through the
    centre.  ``even`` selects the half transverse design.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float)) if len(centers) else np.zeros((0, n))
    o = order
    rb = ball_radius
    half = math.pi / 2
    pts_all, w_all = [], []

    # local balls
    for c in centers:
        s_breaks = [0.0]
        s = rb / 64
        while s < rb:
            s_breaks.append(s)
            s *= 2
        s_breaks.append(rb)
        s_nodes, s_w = _gl_panels(s_breaks, o)
        g_nodes, g_w = _gl_panels([0, math.pi / 4, 3 * math.pi / 8, half], o)
        if half_ball:
            # local angle psi measured from the radial direction of the centre
            c_ang = math.atan2(c[1], c[0])
            p_nodes, p_w = _gl_panels([0, math.pi / 4, math.pi / 2, 3 * math.pi / 4, math.pi], o)
            p_nodes = p_nodes + c_ang
        else:
            m = 4 * o
            p_nodes = 2 * math.pi * np.arange(m) / m
            p_w = np.full(m, 2 * math.pi / m)
        pts, w = _spherical_block(n, s_nodes, s_w, g_nodes, g_w, p_nodes, p_w, center=c, even=even)
        w = w * _bump(np.linalg.norm(pts - c, axis=1) / rb)
        pts_all.append(pts)
        w_all.append(w)

    lo, hi = phi_range
    fine_scales = (-4, -2, -1, -0.5, 0, 0.5, 1, 2, 4)
    if len(centers):
        rc = float(np.linalg.norm(centers[0, :2]))
        r_win = [(rc - 4 * rb, rc + 4 * rb)]
        b_win = [(half - 4 * rb / rc, half)]
        p_win = [(ang - 4 * rb / rc, ang + 4 * rb / rc) for ang in refine_angles]
    else:
        rc = 1.0
        r_win, b_win, p_win = [], [], []

    def panels(lo_, hi_, inside, centre, scale, coarse):
        if inside:
            cuts = [centre + m * scale for m in fine_scales]
        else:
            cuts = coarse
        return _gl_panels(_split(lo_, hi_, cuts), o)

    r_coarse = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0]
    b_coarse = [half / 2]
    span = hi - lo
    npan = max(1, int(math.ceil(span / (math.pi / 4))))
    p_coarse = [lo + span * i / npan for i in range(1, npan)]
    r_parts = _interval_parts(0.0, 4.0, r_win)
    b_parts = _interval_parts(0.0, half, b_win)
    p_parts = _interval_parts(lo, hi, p_win)
    for (ra, rb_), r_in in r_parts:
        for (ba, bb), b_in in b_parts:
            for (pa, pb), p_in in p_parts:
                fine = r_in and b_in and p_in
                r_nodes, r_w = panels(ra, rb_, fine, rc, rb, r_coarse)
                b_nodes, b_w = panels(ba, bb, fine, half, rb / rc, b_coarse)
                ang = 0.0
                if fine:
                    ang = next(a for a in refine_angles if a - 4 * rb / rc <= 0.5 * (pa + pb) <= a + 4 * rb / rc)
                p_nodes, p_w = panels(pa, pb, fine, ang, rb / rc, p_coarse)
                pts, w = _spherical_block(n, r_nodes, r_w, b_nodes, b_w, p_nodes, p_w, even=even)
                for c in centers:
                    w = w * (1 - _bump(np.linalg.norm(pts - c, axis=1) / rb))
                pts_all.append(pts)
                w_all.append(w)

    # far field: geometric shells, coarse angles
    far_breaks = [4.0]
    while far_breaks[-1] < r_max:
        far_breaks.append(far_breaks[-1] * 2)
    r_nodes, r_w = _gl_panels(far_breaks, o)
    b_nodes, b_w = _gl_panels([0, half / 2, half], o)
    p_nodes, p_w = _gl_panels([lo] + p_coarse + [hi], o)
    pts, w = _spherical_block(n, r_nodes, r_w, b_nodes, b_w, p_nodes, p_w, even=even)
    pts_all.append(pts)
    w_all.append(w)

    points = np.concatenate(pts_all)
    weights = np.concatenate(w_all)
    keep = weights != 0.0
    return PlanarRule(points[keep], weights[keep])


# --------------------------------------------------------------------------
# rotation action on generators


def generator_blocks(n: int) -> tuple[list[int], list[tuple[int, int]]]:
    """Indices fixed by the (x1, x2)-rotation and index pairs rotating as vectors."""
    fixed = [0] + list(range(3, n + 1)) + [n + 1]
    pairs = [(1, 2), (n + 2, n + 3)] + [(n + l + 1, 2 * n + l - 1) for l in range(3, n + 1)]
    return fixed, pairs


def rotation_action(n: int, angle: float) -> np.ndarray:
    """Matrix M with z(R x) = M z(x) for the rotation R by ``angle`` in the (x1, x2)-plane."""
    fixed, pairs = generator_blocks(n)
    m = np.zeros((3 * n, 3 * n))
    for i in fixed:
        m[i, i] = 1.0
    c, s = math.cos(angle), math.sin(angle)
    for i, j in pairs:
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    return m


def symmetrize_pairings(sector: np.ndarray, n: int, k: int) -> np.ndarray:
    """Fold sector pairings sum_i w r_i z_i^T into the full-space matrix.

    Equivalent to sum_{m<k} M^m S M^{mT} for the generator action M; the
    closed form uses that rotations commute with the 2x2 rotation generator
    and average symmetric traceless 2x2 blocks to zero when k >= 3.
    """
    if k < 3:
        out = np.zeros_like(sector)
        for m in range(k):
            rm = rotation_action(n, 2 * math.pi * m / k)
            out += rm @ sector @ rm.T
        return out
    fixed, pairs = generator_blocks(n)
    out = np.zeros_like(sector)
    for i in fixed:
        for j in fixed:
            out[i, j] = k * sector[i, j]
    for a in pairs:
        for b in pairs:
            blk = sector[np.ix_(a, b)]
            tr = 0.5 * (blk[0, 0] + blk[1, 1])
            an = 0.5 * (blk[1, 0] - blk[0, 1])
            out[np.ix_(a, b)] = k * np.array([[tr, -an], [an, tr]])
    return out


# --------------------------------------------------------------------------
# tower integrals


def _as_tower(profile) -> TowerProfile:
    if isinstance(profile, BubbleProfile):
        return TowerProfile.build(profile.n, 0)
    return profile


def generator_parities(n: int) -> np.ndarray:
    """Parity (+1/-1) of each generator under x_m -> -x_m, for m = 2..n (rows of the result)."""
    par = np.ones((n - 1, 3 * n))
    for row, m in enumerate(range(2, n + 1)):
        if m == 2:
            for i in (2, n + 1, n + 3) + tuple(2 * n + l - 1 for l in range(3, n + 1)):
                par[row, i] = -1
        else:
            par[row, m] = -1
            par[row, n + m + 1] = -1
            par[row, 2 * n + m - 1] = -1
    return par


def pairing_mask(n: int) -> np.ndarray:
    """1 for pairings even under every reflection x_m -> -x_m (m >= 2), else 0."""
    par = generator_parities(n)
    prod = par[:, :, None] * par[:, None, :]
    return np.all(prod > 0, axis=0).astype(float)


def tower_rule(tower: TowerProfile, order: int = 10, r_max: float = 1e4) -> tuple[PlanarRule, int]:
    """Half-sector rule for reflection-even tower integrands.

    Returns the rule over {0 <= phi <= pi/k} x {x' in the half design} and the
    factor that turns it into a full-sector integral of even integrands.
    """
    n = tower.n
    if tower.k == 0:
        rule = build_planar_rule(n, (0.0, math.pi), np.zeros((0, n)), 0.1, order, r_max, even=True)
        return rule, 2
    k = tower.k
    c = tower.centers[:1]
    rb = 0.8 * float(np.linalg.norm(c[0])) * math.sin(math.pi / k)
    rule = build_planar_rule(
        n, (0.0, math.pi / k), c, rb, order, r_max, refine_angles=(0.0,), even=True, half_ball=True
    )
    return rule, 2


def generator_rows(tower: TowerProfile, x: np.ndarray, q=None, g=None) -> tuple[np.ndarray, np.ndarray]:
    """Far-field corrected generators (rows) and kernels (columns) at x.

    Rows: z0 - D(2-|y|^2)/(1+|y|^2)^{n/2}, d_iQ - E y_i/(1+|y|^2)^{n/2}, the
    plain (x1,x2) rotation generator, the two Kelvin combinations of the
    corrected rows, and the plain (x_{1,2}, x_l) rotation generators.
    """
    n = tower.n
    if q is None:
        q, g = tower.value_and_gradient(x)
    z = _kernels_from(q, g, x, n)
    if tower.D is None or tower.E is None:
        raise ValueError("tower needs fitted far-field constants D and E")
    s = np.sum(x * x, axis=-1)
    env = (1 + s) ** (-n / 2)
    rows = z.copy()
    g0 = z[..., 0] - tower.D * (2 - s) * env
    gi = z[..., 1 : n + 1] - tower.E * x * env[..., None]
    rows[..., 0] = g0
    rows[..., 1 : n + 1] = gi
    rows[..., n + 2] = -2 * x[..., 0] * g0 + s * gi[..., 0]
    rows[..., n + 3] = -2 * x[..., 1] * g0 + s * gi[..., 1]
    return rows, z


def _sector_moments(tower: TowerProfile, order: int, r_max: float):
    """Sector-integrated outer products and the pieces needed for c1, c2.

    Pairings odd under a coordinate reflection vanish exactly and are masked;
    the even ones are integrated on the half sector and doubled.
    """
    rule, fold = tower_rule(tower, order, r_max)
    n = tower.n
    p = tower.p
    m = 3 * n

    def integrand(x):
        q, g = tower.value_and_gradient(x)
        rows, z = generator_rows(tower, x, q, g)
        out = np.empty((len(x), m * m + 2))
        out[:, : m * m] = (rows[:, :, None] * z[:, None, :]).reshape(len(x), -1)
        out[:, m * m] = -p * np.abs(q) ** (p - 1) * z[:, 0]
        out[:, m * m + 1] = rows[:, 0] * z[:, 0]
        return out

    res = fold * rule.integrate(integrand, chunk=20_000)
    outer = res[: m * m].reshape(m, m) * pairing_mask(n)
    k = max(tower.k, 1)
    return outer, k * res[m * m], k * res[m * m + 1], k


def _tail_certificate(tower: TowerProfile, radius: float = 200.0, tol: float = 1e-3) -> float:
    """Relative size of the |y|^{2-n} coefficient left in z0 - D(2-|y|^2)/(1+|y|^2)^{n/2}."""
    n = tower.n
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(32, n))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    x = dirs * radius
    q, g = tower.value_and_gradient(x)
    z0 = _kernels_from(q, g, x, n)[:, 0]
    s = radius**2
    g0 = z0 - tower.D * (2 - s) * (1 + s) ** (-n / 2)
    ratio = float(np.max(np.abs(g0)) / np.max(np.abs(z0)))
    if ratio > tol:
        raise DivergenceError(
            f"D={tower.D:.6g} leaves a |y|^(2-n) tail (relative size {ratio:.2e}); the corrected pairing does not converge absolutely at the expected rate"
        )
    return ratio


def const_c1(profile, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """c1 = -p int |Q|^{p-1} z0."""
    tower = _as_tower(profile)
    if tower.k == 0:
        return c1_identity(tower.n, spec)[0]
    _, c1, _, _ = _cached_moments(tower, spec.sector_order)
    return c1


def const_c2(profile, D: float | None = None, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """c2 = int (z0 - D (2-|y|^2)/(1+|y|^2)^{n/2}) z0 with a tail-cancellation check on D."""
    tower = _as_tower(profile)
    if D is not None:
        tower = tower.with_farfield(D, tower.E if tower.E is not None else 0.0, tower.d_k or 0.0)
    _tail_certificate(tower)
    n = tower.n
    if tower.k == 0:
        d = tower.D
        return radial_integral(lambda r: (_z0_radial(n, r) - d * _dilation_profile(n, r)) * _z0_radial(n, r), n, spec)
    _, _, c2, _ = _cached_moments(tower, spec.sector_order)
    return c2


@lru_cache(maxsize=16)
def _cached_moments_key(key, order):
    tower = TowerProfile.from_json(key)
    outer, c1, c2, k = _sector_moments(tower, order, 1e4)
    return outer, c1, c2, k


def _cached_moments(tower: TowerProfile, order: int):
    outer, c1, c2, k = _cached_moments_key(tower.to_json(), order)
    return outer.copy(), c1, c2, k


@dataclass(frozen=True)
class GramMatrix:
    """Pairings a[i, j] of corrected generator i against kernel j (3n x 3n)."""

    n: int
    k: int
    entries: np.ndarray

    def block(self, which: int) -> np.ndarray:
        """The 2x2 translation/Kelvin block for direction ``which`` in {1, 2}."""
        i, j = which, self.n + 1 + which
        return self.entries[np.ix_([i, j], [i, j])]

    def block_condition(self, which: int) -> float:
        """|det| divided by the product of the diagonal entries."""
        b = self.block(which)
        return float(abs(np.linalg.det(b)) / abs(b[0, 0] * b[1, 1]))

    def to_csv(self) -> str:
        lines = []
        for row in self.entries:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def gram_matrix(profile, k: int | None = None, spec: QuadratureSpec = DEFAULT_SPEC) -> GramMatrix:
    """Pairings int row_i z_j of corrected generators against kernels for the tower.

    Rows are the far-field corrected generators of :func:`generator_rows`.
    """
    tower = _as_tower(profile)
    if k is not None and k != tower.k:
        tower = TowerProfile.build(tower.n, k)
    outer, _, _, kk = _cached_moments(tower, spec.sector_order)
    full = symmetrize_pairings(outer, tower.n, kk) if tower.k else outer
    return GramMatrix(tower.n, tower.k, full)


# --------------------------------------------------------------------------
# satellite kernels


def satellite_kernel(tower: TowerProfile, alpha: int, l: int, x: np.ndarray) -> np.ndarray:
    """Kernels Z_{alpha l} of satellite l (1-based); l = 0 is the central bubble.

    Z_{0l} = (n-2)/2 U_l + grad U_l . (x - xi_l); Z_{1l}, Z_{2l} are the radial
    and tangential derivatives scaled by |xi_l|; Z_{al} = d_a U_l for a >= 3.
    """
    n = tower.n
    if l == 0:
        q, g = _scaled_bubble(x, n, 1.0, np.zeros(n), order=1)
        c = np.zeros(n)
        rad, th = 1.0, 0.0
    else:
        c = tower.centers[l - 1]
        q, g = _scaled_bubble(x, n, tower.zeta_k, c, order=1)
        rad = math.sqrt(1 - tower.zeta_k**2)
        th = 2 * math.pi * (l - 1) / tower.k
    if alpha == 0:
        return 0.5 * (n - 2) * q + np.sum(g * (x - c), axis=-1)
    if l == 0:
        return g[..., alpha - 1]
    if alpha == 1:
        return rad * (math.cos(th) * g[..., 0] + math.sin(th) * g[..., 1])
    if alpha == 2:
        return rad * (-math.sin(th) * g[..., 0] + math.cos(th) * g[..., 1])
    return g[..., alpha - 1]


def satellite_pairing_integral(
    tower: TowerProfile, alpha: int, l: int, beta: int, j: int, order: int = 10, r_max: float = 1e8
) -> float:
    """int Z_{alpha l} Z_{beta j} over R^n (satellite indices 1-based, 0 = central bubble).

    No tail is added; products of kernels decay like |x|^{-2(n-2)}, so the
    default ``r_max`` leaves a remainder below 1e-8 relative.
    """
    n = tower.n
    if tower.k < 2:
        raise ValueError("needs a tower with k >= 2")
    for idx in (alpha, beta):
        if not 0 <= idx <= n:
            raise IndexError(idx)
    centers = []
    angles = []
    for s in {l, j}:
        if s > 0:
            centers.append(tower.centers[s - 1])
            angles.append(2 * math.pi * (s - 1) / tower.k)
    centers = np.array(centers) if centers else np.zeros((0, n))
    # the satellite scale sets the ball size; keep balls disjoint
    rb = 0.8 * math.sin(math.pi / tower.k)
    # centre the angular window between the two satellites so neither sits on a seam
    mid = float(np.mean(angles)) if angles else 0.0
    if len(angles) == 2 and abs(angles[0] - angles[1]) > math.pi:
        mid += math.pi
    rule = build_planar_rule(n, (mid - math.pi, mid + math.pi), centers, rb, order, r_max, refine_angles=angles)

    def integrand(x):
        return satellite_kernel(tower, alpha, l, x) * satellite_kernel(tower, beta, j, x)

    return float(rule.integrate(integrand))
