"""Bubble profiles, the k-satellite tower, the transformed family Q_A and kernels.

The positive bubble is

    U(x) = alpha_n (1 + |x|^2)^{-(n-2)/2},   alpha_n = [n(n-2)]^{(n-2)/4},

which solves Delta U + U^p = 0 with p = (n+2)/(n-2).  The tower subtracts k
rescaled bubbles placed on a circle in the (x1, x2)-plane.  Everything here is
vectorised over leading axes: points are arrays of shape (..., n).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt
from scipy import optimize

logger = logging.getLogger(__name__)

ArrayLike = npt.ArrayLike

KELVIN_TOL = 1e-12


class ProfileError(ValueError):
    """Invalid profile parameters."""


class SingularKelvinError(ArithmeticError):
    """Raised when the Kelvin denominator |eta_A(x)| vanishes."""


def alpha_n(n: int) -> float:
    return float((n * (n - 2)) ** ((n - 2) / 4))


def critical_exponent(n: int) -> float:
    return (n + 2) / (n - 2)


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def _check_dim(n: int) -> None:
    if int(n) != n or n < 5:
        raise ProfileError(f"dimension n must be an integer >= 5, got {n}")


def _points(x: ArrayLike, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise ProfileError(f"points must have trailing dimension {n}, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# single scaled bubbles


def _scaled_bubble(x, n, scale, center, order=1):
    """Value (and gradient, Hessian) of scale^{-(n-2)/2} U((x - center)/scale)."""
    a = alpha_n(n)
    y = (x - center) / scale
    r2 = np.sum(y * y, axis=-1)
    base = 1.0 + r2
    amp = scale ** (-(n - 2) / 2)
    val = amp * a * base ** (-(n - 2) / 2)
    if order == 0:
        return val
    # grad_x = amp/scale * grad U(y)
    gfac = -(n - 2) * a * base ** (-n / 2) * amp / scale
    grad = gfac[..., None] * y
    if order == 1:
        return val, grad
    # Hessian of U at y: -(n-2) a [I (1+r2)^{-n/2} - n y y^T (1+r2)^{-n/2-1}]
    eye = np.eye(n)
    h1 = -(n - 2) * a * base ** (-n / 2)
    h2 = (n - 2) * n * a * base ** (-n / 2 - 1)
    hess = (h1[..., None, None] * eye + h2[..., None, None] * y[..., :, None] * y[..., None, :])
    hess = hess * (amp / scale**2)
    return val, grad, hess


@dataclass(frozen=True)
class BubbleProfile:
    """Positive radial bubble in dimension n."""

    n: int

    def __post_init__(self):
        _check_dim(self.n)

    @property
    def alpha_n(self) -> float:
        return alpha_n(self.n)

    @property
    def p(self) -> float:
        return critical_exponent(self.n)

    def value(self, x: ArrayLike) -> np.ndarray:
        x = _points(x, self.n)
        return _scaled_bubble(x, self.n, 1.0, 0.0, order=0)

    def gradient(self, x: ArrayLike) -> np.ndarray:
        x = _points(x, self.n)
        return _scaled_bubble(x, self.n, 1.0, 0.0, order=1)[1]

    def value_and_gradient(self, x: ArrayLike):
        x = _points(x, self.n)
        return _scaled_bubble(x, self.n, 1.0, 0.0, order=1)

    def hessian(self, x: ArrayLike) -> np.ndarray:
        x = _points(x, self.n)
        return _scaled_bubble(x, self.n, 1.0, 0.0, order=2)[2]

    def laplacian(self, x: ArrayLike) -> np.ndarray:
        """Exact Laplacian, equal to -U^p."""
        return -self.value(x) ** self.p

    def to_dict(self) -> dict:
        return {"kind": "bubble", "n": self.n, "alpha_n": self.alpha_n}


def eval_bubble(profile: BubbleProfile, x: ArrayLike) -> np.ndarray:
    return profile.value(x)


# --------------------------------------------------------------------------
# tower


def tower_centers(n: int, k: int, zeta: float) -> np.ndarray:
    """Satellite centres on the circle of radius sqrt(1 - zeta^2)."""
    rad = math.sqrt(1.0 - zeta * zeta)
    ang = 2.0 * math.pi * np.arange(k) / k
    c = np.zeros((k, n))
    c[:, 0] = rad * np.cos(ang)
    c[:, 1] = rad * np.sin(ang)
    return c


@dataclass(frozen=True)
class TowerProfile:
    """Leading-order sign-changing tower U - sum_j U_j.

    ``k = 0`` is accepted as the degenerate single-bubble case, which is
    convenient for comparisons; genuine towers use ``k >= 2``.

    Attributes
    ----------
    kappa : float
        Satellite scale coefficient, ``zeta_k = kappa / k**2``.
    D, E, d_k : float or None
        Far-field constants, filled in by :func:`fit_farfield_constants`.
    """

    base: BubbleProfile
    k: int
    zeta_k: float
    kappa: float = float("nan")
    D: float | None = None
    E: float | None = None
    d_k: float | None = None
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.k < 0 or self.k == 1:
            raise ProfileError("tower needs k >= 2 satellites (or k = 0)")
        if self.k > 0 and not (0.0 < self.zeta_k < 1.0):
            raise ProfileError(f"degenerate satellite scale zeta_k={self.zeta_k}")
        c = tower_centers(self.n, self.k, self.zeta_k) if self.k else np.zeros((0, self.n))
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def p(self) -> float:
        return self.base.p

    @property
    def alpha_n(self) -> float:
        return self.base.alpha_n

    @classmethod
    def build(cls, n: int, k: int, kappa: float | None = None, fit: bool = True) -> "TowerProfile":
        """Construct a tower with ``zeta_k = kappa k^-2``.

        When ``kappa`` is omitted it is chosen by minimising the equation
        residual on a ring through the satellites.
        """
        base = BubbleProfile(n)
        if k == 0:
            tower = cls(base, 0, 0.0, kappa=0.0)
        else:
            if kappa is None:
                kappa = fit_kappa(n, k)
            tower = cls(base, k, kappa / k**2, kappa=kappa)
        if fit:
            ff = fit_farfield_constants(tower)
            tower = tower.with_farfield(ff.D, ff.E, ff.d_k)
        return tower

    def with_farfield(self, D: float, E: float, d_k: float) -> "TowerProfile":
        return TowerProfile(self.base, self.k, self.zeta_k, self.kappa, float(D), float(E), float(d_k))

    def value(self, x: ArrayLike) -> np.ndarray:
        return self.value_and_gradient(x)[0]

    def gradient(self, x: ArrayLike) -> np.ndarray:
        return self.value_and_gradient(x)[1]

    def value_and_gradient(self, x: ArrayLike):
        x = _points(x, self.n)
        val, grad = _scaled_bubble(x, self.n, 1.0, 0.0, order=1)
        for c in self.centers:
            v, g = _scaled_bubble(x, self.n, self.zeta_k, c, order=1)
            val = val - v
            grad = grad - g
        return val, grad

    def hessian(self, x: ArrayLike) -> np.ndarray:
        x = _points(x, self.n)
        hess = _scaled_bubble(x, self.n, 1.0, 0.0, order=2)[2]
        for c in self.centers:
            hess = hess - _scaled_bubble(x, self.n, self.zeta_k, c, order=2)[2]
        return hess

    def laplacian(self, x: ArrayLike) -> np.ndarray:
        """Exact Laplacian of the bubble sum: -U^p + sum_j U_j^p."""
        x = _points(x, self.n)
        p = self.p
        lap = -_scaled_bubble(x, self.n, 1.0, 0.0, order=0) ** p
        for c in self.centers:
            lap = lap + _scaled_bubble(x, self.n, self.zeta_k, c, order=0) ** p
        return lap

    def residual(self, x: ArrayLike) -> np.ndarray:
        """Equation residual Delta Q + |Q|^{p-1} Q."""
        q = self.value(x)
        return self.laplacian(x) + np.abs(q) ** (self.p - 1) * q

    def to_dict(self) -> dict:
        return {
            "kind": "tower",
            "n": self.n,
            "k": self.k,
            "zeta_k": self.zeta_k,
            "kappa": self.kappa,
            "D": self.D,
            "E": self.E,
            "d_k": self.d_k,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TowerProfile":
        return cls(
            BubbleProfile(int(data["n"])),
            int(data["k"]),
            float(data["zeta_k"]),
            kappa=float(data.get("kappa", float("nan"))),
            D=data.get("D"),
            E=data.get("E"),
            d_k=data.get("d_k"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TowerProfile":
        return cls.from_dict(json.loads(text))


def eval_tower(tower: TowerProfile, x: ArrayLike) -> np.ndarray:
    return tower.value(x)


def _ring_samples(n: int, k: int, zeta: float) -> np.ndarray:
    """Points near satellite 1 at distances ~ zeta, used for the kappa fit."""
    rad = math.sqrt(1.0 - zeta * zeta)
    s = zeta * np.array([0.5, 1.0, 2.0, 4.0])
    ang = np.linspace(0.0, 2 * math.pi, 8, endpoint=False)
    pts = []
    for si in s:
        for a in ang:
            x = np.zeros(n)
            x[0] = rad + si * math.cos(a)
            x[1] = si * math.sin(a)
            pts.append(x)
        x = np.zeros(n)
        x[0] = rad
        x[2] = si
        pts.append(x)
    return np.array(pts)


def balance_kappa(n: int, k: int) -> float:
    """kappa solving U(xi_1) = sum_{j>1} U_j(xi_1), the leading-order matching."""
    a = alpha_n(n)

    def gap(log_kappa: float) -> float:
        zeta = math.exp(log_kappa) / k**2
        c = tower_centers(n, k, zeta)
        d2 = np.sum((c[1:] - c[0]) ** 2, axis=1)
        sats = zeta ** (-(n - 2) / 2) * a * (1 + d2 / zeta**2) ** (-(n - 2) / 2)
        return math.log(a * (2 - zeta**2) ** (-(n - 2) / 2)) - math.log(np.sum(sats))

    return float(math.exp(optimize.brentq(gap, math.log(1e-3), math.log(k**2 * 0.5))))


def fit_kappa(n: int, k: int, bracket: tuple[float, float] = (0.05, 20.0)) -> float:
    """Choose kappa in zeta_k = kappa k^-2 minimising the scaled residual near a satellite."""
    base = BubbleProfile(n)

    def objective(log_kappa: float) -> float:
        kap = math.exp(log_kappa)
        zeta = kap / k**2
        if zeta >= 0.5:
            return 1e30
        tower = TowerProfile(base, k, zeta, kappa=kap)
        pts = _ring_samples(n, k, zeta)
        # near a satellite the residual is p U_j^{p-1} times the background
        # mismatch; zeta^2 removes the U_j^{p-1} ~ zeta^-2 factor
        res = tower.residual(pts) * zeta**2
        return float(np.sqrt(np.mean(res**2)))

    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    grid = np.linspace(lo, hi, 41)
    vals = [objective(g) for g in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    sol = optimize.minimize_scalar(objective, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    return float(math.exp(sol.x))


# --------------------------------------------------------------------------
# kernel functions


def _kernels_from(q, grad, x, n):
    """All 3n kernel functions from Q, grad Q at points x; returns (..., 3n)."""
    z = np.empty(x.shape[:-1] + (3 * n,))
    r2 = np.sum(x * x, axis=-1)
    z0 = 0.5 * (n - 2) * q + np.sum(grad * x, axis=-1)
    z[..., 0] = z0
    z[..., 1 : n + 1] = grad
    x1, x2 = x[..., 0], x[..., 1]
    g1, g2 = grad[..., 0], grad[..., 1]
    z[..., n + 1] = -x2 * g1 + x1 * g2
    z[..., n + 2] = -2 * x1 * z0 + r2 * g1
    z[..., n + 3] = -2 * x2 * z0 + r2 * g2
    for l in range(3, n + 1):
        xl, gl = x[..., l - 1], grad[..., l - 1]
        z[..., n + l + 1] = -xl * g1 + x1 * gl
        z[..., 2 * n + l - 1] = -xl * g2 + x2 * gl
    return z


@dataclass(frozen=True)
class KernelBasis:
    """The 3n kernel generators of a profile (bubble or tower)."""

    profile: BubbleProfile | TowerProfile

    @property
    def n(self) -> int:
        return self.profile.n

    @property
    def size(self) -> int:
        return 3 * self.n

    def all(self, x: ArrayLike) -> np.ndarray:
        x = _points(x, self.n)
        q, g = self.profile.value_and_gradient(x)
        return _kernels_from(q, g, x, self.n)

    def eval(self, alpha: int, x: ArrayLike) -> np.ndarray:
        if not (0 <= alpha < self.size):
            raise IndexError(f"kernel index {alpha} outside 0..{self.size - 1}")
        return self.all(x)[..., alpha]


def eval_kernel(basis: KernelBasis, alpha: int, x: ArrayLike) -> np.ndarray:
    return basis.eval(alpha, x)


def kernel_label(alpha: int, n: int) -> str:
    """Human-readable name of generator alpha."""
    if alpha == 0:
        return "dilation"
    if 1 <= alpha <= n:
        return f"translation_{alpha}"
    if alpha == n + 1:
        return "rotation_12"
    if alpha in (n + 2, n + 3):
        return f"kelvin_{alpha - n - 1}"
    if n + 4 <= alpha <= 2 * n + 1:
        return f"rotation_1{alpha - n - 1}"
    if 2 * n + 2 <= alpha <= 3 * n - 1:
        return f"rotation_2{alpha - 2 * n + 1}"
    raise IndexError(alpha)


# --------------------------------------------------------------------------
# linearised operator


def fd_laplacian(func: Callable[[np.ndarray], np.ndarray], x: ArrayLike, h=None) -> np.ndarray:
    """Second-order centred-difference Laplacian of ``func`` at points x.

    ``h`` defaults to 1e-4 (1 + |x|) pointwise.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if h is None:
        h = 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape[:-1])
    f0 = func(x)
    acc = -2.0 * n * f0
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        step = h[..., None] * e
        acc = acc + func(x + step) + func(x - step)
    return acc / h**2


def apply_linearized(profile, phi: Callable[[np.ndarray], np.ndarray], x: ArrayLike, h=None) -> np.ndarray:
    """L(phi) = Delta phi + p |Q|^{p-1} phi with a finite-difference Laplacian."""
    x = _points(x, profile.n)
    q = profile.value(x)
    return fd_laplacian(phi, x, h) + profile.p * np.abs(q) ** (profile.p - 1) * phi(x)


def _radial_laplacian_terms(f, df, d2f, s, n, ell):
    """Laplacian of x^ell-type field f(|x|^2) times a degree-ell monomial (ell = 0, 1)."""
    return 4 * s * d2f + 2 * (n + 2 * ell) * df


def analytic_linearized_kernel(profile: BubbleProfile, alpha: int, x: ArrayLike) -> np.ndarray:
    """L(z_alpha) for the single bubble from closed-form derivatives.

    Dilation and translations are the non-trivial radial/dipole fields.  The
    rotation generators vanish identically for a radial profile and the Kelvin
    generators coincide with translations.
    """
    n = profile.n
    x = _points(x, n)
    a = profile.alpha_n
    s = np.sum(x * x, axis=-1)
    pot = profile.p * profile.value(x) ** (profile.p - 1)
    m = n / 2
    if alpha == 0:
        c = 0.5 * (n - 2) * a
        # f = c (1 - s)(1 + s)^{-m}
        f = c * (1 - s) * (1 + s) ** (-m)
        df = c * (-(1 + s) ** (-m) - m * (1 - s) * (1 + s) ** (-m - 1))
        d2f = c * (2 * m * (1 + s) ** (-m - 1) + m * (m + 1) * (1 - s) * (1 + s) ** (-m - 2))
        return _radial_laplacian_terms(f, df, d2f, s, n, 0) + pot * f
    if 1 <= alpha <= n:
        c = -(n - 2) * a
        f = c * (1 + s) ** (-m)
        df = -m * c * (1 + s) ** (-m - 1)
        d2f = m * (m + 1) * c * (1 + s) ** (-m - 2)
        xa = x[..., alpha - 1]
        return xa * (_radial_laplacian_terms(f, df, d2f, s, n, 1) + pot * f)
    if alpha in (n + 2, n + 3):
        # for the bubble -2 x_i z0 + |x|^2 d_i U collapses to d_i U
        return analytic_linearized_kernel(profile, alpha - n - 1, x)
    if 0 <= alpha < 3 * n:
        return np.zeros(x.shape[:-1])
    raise IndexError(alpha)


# --------------------------------------------------------------------------
# transformed family Q_A


def _givens(n: int, i: int, j: int, angle: float) -> np.ndarray:
    g = np.eye(n)
    c, s = math.cos(angle), math.sin(angle)
    g[i, i] = c
    g[j, j] = c
    g[i, j] = -s
    g[j, i] = s
    return g


def rotation_planes(n: int) -> list[tuple[int, int]]:
    """Zero-based planes in the order (1,2),(1,3),...,(1,n),(2,3),...,(2,n)."""
    planes = [(0, j) for j in range(1, n)]
    planes += [(1, j) for j in range(2, n)]
    return planes


def rotation_matrix(theta: Sequence[float], n: int) -> np.ndarray:
    """Ordered product of plane rotations; the (1,2) factor acts first."""
    theta = np.asarray(theta, dtype=float)
    planes = rotation_planes(n)
    if theta.shape != (len(planes),):
        raise ProfileError(f"theta must have {len(planes)} entries")
    r = np.eye(n)
    for (i, j), ang in zip(planes, theta):
        if ang != 0.0:
            r = _givens(n, i, j, ang) @ r
    return r


@dataclass(frozen=True)
class TransformParams:
    """Dilation, translation, Kelvin and rotation parameters A = (mu, xi, a, theta)."""

    mu: float
    xi: np.ndarray
    a: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        if not self.mu > 0:
            raise ProfileError("mu must be positive")
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        n = self.xi.shape[0]
        if self.a.shape != (2,) or self.theta.shape != (2 * n - 3,):
            raise ProfileError("a must have 2 entries and theta 2n-3 entries")

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    @classmethod
    def identity(cls, n: int) -> "TransformParams":
        return cls(1.0, np.zeros(n), np.zeros(2), np.zeros(2 * n - 3))

    def as_vector(self) -> np.ndarray:
        """Flatten to (mu, xi_1..xi_n, a_1, a_2, theta...)."""
        return np.concatenate([[self.mu], self.xi, self.a, self.theta])

    @classmethod
    def from_vector(cls, v: ArrayLike, n: int) -> "TransformParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), v[1 : n + 1], v[n + 1 : n + 3], v[n + 3 :])


def _transform_coords(A: TransformParams, x: np.ndarray):
    n = A.n
    y = (x - A.xi) / A.mu
    a = np.zeros(n)
    a[:2] = A.a
    y2 = np.sum(y * y, axis=-1)
    eta2 = 1.0 - 2.0 * (y @ a) + (a @ a) * y2
    if np.any(eta2 < KELVIN_TOL**2):
        raise SingularKelvinError("|eta_A(x)| below tolerance")
    w = y - a * y2[..., None]
    rot = rotation_matrix(A.theta, n)
    ytil = (w @ rot.T) / eta2[..., None]
    return y, eta2, ytil


def eval_transformed(profile, A: TransformParams, x: ArrayLike) -> np.ndarray:
    """Q_A(x) = mu^{-(n-2)/2} |eta|^{2-n} Q(R_theta(y - a|y|^2)/|eta|^2), y = (x - xi)/mu."""
    n = profile.n
    x = _points(x, n)
    _, eta2, ytil = _transform_coords(A, x)
    return A.mu ** (-(n - 2) / 2) * eta2 ** ((2 - n) / 2) * profile.value(ytil)


def laplacian_transformed(profile, A: TransformParams, x: ArrayLike) -> np.ndarray:
    """Delta Q_A from conformal covariance: mu^{-(n+2)/2} |eta|^{-(n+2)} (Delta Q)(ytil)."""
    n = profile.n
    x = _points(x, n)
    _, eta2, ytil = _transform_coords(A, x)
    return A.mu ** (-(n + 2) / 2) * eta2 ** (-(n + 2) / 2) * profile.laplacian(ytil)


# parameter index in the flat vector, and the sign s with s * d/dparam Q_A = z_alpha
def transform_generator(alpha: int, n: int) -> tuple[int, float]:
    """Which parameter generates kernel alpha, and with which sign.

    Returns ``(index, sign)`` such that ``sign * dQ_A/dA[index]`` at the
    identity equals ``z_alpha``; the index refers to
    :meth:`TransformParams.as_vector`.
    """
    a_off = n + 1
    t_off = n + 3
    if alpha == 0:
        return 0, -1.0
    if 1 <= alpha <= n:
        return alpha, -1.0
    if alpha == n + 1:
        return t_off, 1.0
    if alpha in (n + 2, n + 3):
        return a_off + alpha - n - 2, -1.0
    if n + 4 <= alpha <= 2 * n + 1:
        l = alpha - n - 1  # plane (1, l)
        return t_off + (l - 2), 1.0
    if 2 * n + 2 <= alpha <= 3 * n - 1:
        l = alpha - 2 * n + 1  # plane (2, l)
        return t_off + (n - 1) + (l - 3), 1.0
    raise IndexError(alpha)


def _default_sample_points(n: int, count: int = 12, seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(count, n))
    pts *= (rng.uniform(0.2, 2.0, size=count) / np.linalg.norm(pts, axis=1))[:, None]
    return pts


def check_transform_derivatives(profile, alpha: int, h: float = 1e-3, points=None) -> float:
    """Max |sign * central-difference dQ_A/dA - z_alpha| at sample points."""
    n = profile.n
    pts = _default_sample_points(n) if points is None else _points(points, n)
    idx, sign = transform_generator(alpha, n)
    base = TransformParams.identity(n).as_vector()
    vp, vm = base.copy(), base.copy()
    vp[idx] += h
    vm[idx] -= h
    fp = eval_transformed(profile, TransformParams.from_vector(vp, n), pts)
    fm = eval_transformed(profile, TransformParams.from_vector(vm, n), pts)
    deriv = sign * (fp - fm) / (2 * h)
    z = KernelBasis(profile).eval(alpha, pts)
    return float(np.max(np.abs(deriv - z)))


# --------------------------------------------------------------------------
# far-field constants


@dataclass(frozen=True)
class FarField:
    D: float
    E: float
    d_k: float
    annulus: tuple[float, float]


def _annulus_points(n: int, r1: float, r2: float, samples: int, seed: int = 11) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(samples, n))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    radii = np.geomspace(r1, r2, samples)
    return dirs * radii[:, None]


def fit_farfield_constants(tower, annulus=(20.0, 80.0), samples: int = 400) -> FarField:
    """Least-squares far-field constants D, E and d_k on an annulus.

    D fits z0 ~ D (2 - |y|^2)/(1+|y|^2)^{n/2} + c (1+|y|^2)^{-n/2}, E fits d_1 Q ~ E y_1/(1+|y|^2)^{n/2},
    and d_k fits |x|^{n-2} Q(x)/alpha_n - 1 ~ d_k + c/|x|^2.  Residuals are
    weighted by |y|^{n-2} so every radius counts equally.
    """
    if isinstance(tower, BubbleProfile):
        tower = TowerProfile(tower, 0, 0.0, kappa=0.0)
    r1, r2 = map(float, annulus)
    if r1 <= 0 or r2 / r1 < 1.5:
        raise ProfileError(f"annulus {annulus} too narrow for a well-conditioned fit")
    n = tower.n
    pts = _annulus_points(n, r1, r2, samples)
    q, g = tower.value_and_gradient(pts)
    z0 = _kernels_from(q, g, pts, n)[..., 0]
    s = np.sum(pts * pts, axis=-1)
    r = np.sqrt(s)
    w = r ** (n - 2)
    shape_d = (2 - s) / (1 + s) ** (n / 2)
    # the second column absorbs the |y|^-n correction so D is the pure tail coefficient
    basis = np.stack([w * shape_d, w * (1 + s) ** (-n / 2)], axis=1)
    D = float(np.linalg.lstsq(basis, w * z0, rcond=None)[0][0])
    # gradient: use all components along their own coordinate
    shape_e = pts / ((1 + s) ** (n / 2))[:, None]
    wv = (r ** (n - 1))[:, None]
    E = float(np.sum((wv * g) * (wv * shape_e)) / np.sum((wv * shape_e) ** 2))
    # defect: |x|^{n-2} Q / alpha - 1 = d + c1/|x|^2 + c2/|x|^4
    lhs = r ** (n - 2) * q / tower.alpha_n - 1.0
    mat = np.stack([np.ones_like(r), r**-2, r**-4], axis=1)
    coef, *_ = np.linalg.lstsq(mat, lhs, rcond=None)
    if np.linalg.cond(mat) > 1e12:
        raise ProfileError("far-field fit ill-conditioned")
    return FarField(D, E, float(coef[0]), (r1, r2))


def kelvin_defect(tower: TowerProfile, x: ArrayLike) -> np.ndarray:
    """|Q(x) - |x|^{2-n} Q(x/|x|^2)| at points x."""
    x = _points(x, tower.n)
    s = np.sum(x * x, axis=-1)
    return np.abs(tower.value(x) - s ** ((2 - tower.n) / 2) * tower.value(x / s[..., None]))
