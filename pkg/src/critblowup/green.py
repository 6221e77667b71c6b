"""Regular part of the Dirichlet Green function for balls and star-shaped domains.

The Green function is normalised as G(x, y) = Gamma(x - y) - H(x, y) with
Gamma(x) = alpha_n |x|^{2-n}.  Balls have the closed-form image solution;
star-shaped domains use the method of fundamental solutions: point charges
on an inflated copy of the boundary, fitted to the boundary data by
truncated-SVD least squares.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm, qmc

from .profiles import alpha_n, sphere_area

logger = logging.getLogger(__name__)


class GreenError(ValueError):
    """Invalid domain or query point."""


class CollocationError(ArithmeticError):
    """Boundary residual of the charge fit exceeds tolerance."""


class BoundaryProximityWarning(UserWarning):
    pass


def gamma_fundamental(x, n: int | None = None) -> np.ndarray:
    """Gamma(x) = alpha_n |x|^{2-n}."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] if n is None else n
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0):
        raise GreenError("fundamental solution is singular at the origin")
    return alpha_n(n) * r ** (2 - n)


def gamma_gradient(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    return (2 - n) * alpha_n(n) * r2[..., None] ** (-n / 2) * x


def green_constant(n: int) -> float:
    """c(n) in -Delta Gamma = c(n) delta."""
    return (n - 2) * sphere_area(n) * alpha_n(n)


# --------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    """A ball, or a star-shaped domain r < rho(omega) about ``center``.

    For star-shaped domains rho(omega) = radius (1 + linear . omega + omega^T quadratic omega).
    """

    n: int
    kind: str = "ball"
    center: tuple = ()
    radius: float = 1.0
    linear: tuple = ()
    quadratic: tuple = ()

    def __post_init__(self):
        if self.n < 3:
            raise GreenError("n >= 3 required")
        if self.kind not in ("ball", "star"):
            raise GreenError(f"unknown domain kind {self.kind!r}")
        if not self.radius > 0:
            raise GreenError("radius must be positive")
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.n)
        if len(self.center) != self.n:
            raise GreenError("center has wrong dimension")
        if self.kind == "star":
            omegas = _sphere_points(self.n, 512, seed=5)
            rho = self.boundary_radius(omegas)
            if np.min(rho) <= 0.1 * self.radius:
                raise GreenError("star-shaped radius function must stay bounded away from 0")

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def boundary_radius(self, omega: np.ndarray) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        rho = np.ones(omega.shape[:-1])
        if self.kind == "star":
            if self.linear:
                rho = rho + omega @ np.asarray(self.linear, dtype=float)
            if self.quadratic:
                qm = np.asarray(self.quadratic, dtype=float)
                rho = rho + np.einsum("...i,ij,...j->...", omega, qm, omega)
        return self.radius * rho

    def contains(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center_array
        r = np.linalg.norm(d, axis=-1)
        omega = d / np.where(r > 0, r, 1.0)[..., None]
        return r < self.boundary_radius(omega)

    def distance_hint(self, x) -> float:
        """Radial gap rho(omega) - |x - c|, a cheap proxy for the boundary distance."""
        d = np.asarray(x, dtype=float) - self.center_array
        r = float(np.linalg.norm(d))
        omega = d / r if r > 0 else np.eye(self.n)[0]
        return float(self.boundary_radius(omega)) - r

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "kind": self.kind,
            "center": list(self.center),
            "radius": self.radius,
            "linear": list(self.linear),
            "quadratic": [list(r) for r in self.quadratic],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            n=int(d["n"]),
            kind=d.get("kind", "ball"),
            center=tuple(d.get("center") or ()),
            radius=float(d.get("radius", 1.0)),
            linear=tuple(d.get("linear") or ()),
            quadratic=tuple(tuple(r) for r in (d.get("quadratic") or ())),
        )

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _sphere_points(n: int, count: int, seed: int) -> np.ndarray:
    """Quasi-uniform points on S^{n-1} from a scrambled Sobol sequence."""
    sob = qmc.Sobol(d=n, scramble=True, seed=seed)
    m = int(math.ceil(math.log2(count)))
    u = sob.random_base2(m)[:count]
    g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1)[:, None]


# --------------------------------------------------------------------------
# closed form for balls


def ball_regular_part(x, y, radius: float = 1.0, center=None) -> np.ndarray:
    """Image-charge H(x, y) for the ball: alpha_n (|y'| |x' - y'/|y'|^2|)^{2-n} / radius^{n-2}.

    Primed points are rescaled to the unit ball; y at the centre uses the
    limit H(x, c) = alpha_n radius^{2-n}.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[-1]
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    xs = (x - c) / radius
    ys = (y - c) / radius
    # |y|^2 |x - y/|y|^2|^2 = |x|^2 |y|^2 - 2 x.y + 1, finite at y = 0
    q = np.sum(xs * xs, -1) * np.sum(ys * ys, -1) - 2 * np.sum(xs * ys, -1) + 1.0
    return alpha_n(n) * q ** ((2 - n) / 2) * radius ** (2 - n)


def ball_grad_regular_part(q, radius: float = 1.0, center=None) -> np.ndarray:
    """Gradient of x -> H(x, q) at x = q for the ball."""
    q = np.asarray(q, dtype=float)
    n = q.shape[-1]
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    qs = (q - c) / radius
    s = np.sum(qs * qs, -1)
    return alpha_n(n) * (n - 2) * qs * (1 - s)[..., None] ** (1 - n) * radius ** (1 - n)


# --------------------------------------------------------------------------
# method of fundamental solutions


@dataclass
class GreenSolver:
    """Charge representation of H(., y) for a fixed domain.

    The SVD of the collocation matrix is computed once; each query point y
    only needs new boundary data.
    """

    domain: DomainSpec
    n_sources: int = 1536
    n_boundary: int = 6144
    inflation: float = 2.5
    svd_rtol: float = 1e-12
    residual_tol: float = 5e-2
    seed: int = 0
    cache_dir: str | None = None
    source_points: np.ndarray = field(init=False, repr=False)
    boundary_nodes: np.ndarray = field(init=False, repr=False)
    cond_estimate: float = field(init=False)

    def __post_init__(self):
        n = self.domain.n
        c = self.domain.center_array
        wb = _sphere_points(n, self.n_boundary, seed=self.seed)
        ws = _sphere_points(n, self.n_sources, seed=self.seed + 1)
        self.boundary_nodes = c + self.domain.boundary_radius(wb)[:, None] * wb
        self.source_points = c + self.inflation * self.domain.boundary_radius(ws)[:, None] * ws
        mat = gamma_fundamental(self.boundary_nodes[:, None, :] - self.source_points[None, :, :], n)
        u, s, vt = self._load_or_factor(mat)
        keep = s > self.svd_rtol * s[0]
        self._u = u[:, keep]
        self._s = s[keep]
        self._vt = vt[keep]
        self._mat = mat
        self.cond_estimate = float(s[0] / s[keep][-1])
        self.spacing = float(
            self.domain.radius * (sphere_area(n) / self.n_boundary) ** (1 / (n - 1))
        )
        logger.debug("MFS solver: %d/%d singular values kept, cond %.3g", keep.sum(), len(s), self.cond_estimate)

    @property
    def n(self) -> int:
        return self.domain.n

    def content_hash(self) -> str:
        key = {
            "domain": self.domain.to_dict(),
            "n_sources": self.n_sources,
            "n_boundary": self.n_boundary,
            "inflation": self.inflation,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def _load_or_factor(self, mat):
        path = None
        if self.cache_dir is not None:
            path = Path(self.cache_dir) / f"green-{self.content_hash()}.npz"
            if path.exists():
                with np.load(path) as z:
                    return z["u"], z["s"], z["vt"]
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, u=u, s=s, vt=vt)
        return u, s, vt

    def weights(self, y) -> np.ndarray:
        """Charge weights representing H(., y)."""
        y = np.asarray(y, dtype=float)
        if not self.domain.contains(y):
            raise GreenError("query point must lie strictly inside the domain")
        if self.domain.distance_hint(y) < self.spacing:
            warnings.warn("query point closer to the boundary than the node spacing", BoundaryProximityWarning)
        rhs = gamma_fundamental(self.boundary_nodes - y, self.n)
        w = self._vt.T @ ((self._u.T @ rhs) / self._s)
        res = np.max(np.abs(self._mat @ w - rhs)) / np.max(np.abs(rhs))
        if res > self.residual_tol:
            raise CollocationError(f"boundary residual {res:.2e} exceeds {self.residual_tol:.1e}")
        return w

    def H(self, x, y) -> np.ndarray:
        w = self.weights(y)
        x = np.asarray(x, dtype=float)
        return gamma_fundamental(x[..., None, :] - self.source_points, self.n) @ w

    def grad_H(self, x, y) -> np.ndarray:
        """Gradient in x of H(x, y)."""
        w = self.weights(y)
        x = np.asarray(x, dtype=float)
        g = gamma_gradient(x[..., None, :] - self.source_points)
        return np.einsum("...jk,j->...k", g, w)

    def boundary_residual(self, y) -> float:
        w = self.weights(y)
        rhs = gamma_fundamental(self.boundary_nodes - np.asarray(y, dtype=float), self.n)
        return float(np.max(np.abs(self._mat @ w - rhs)) / np.max(np.abs(rhs)))


def regular_part(solver, q) -> float:
    """H(q, q) for a :class:`GreenSolver` or a ball :class:`DomainSpec` (closed form)."""
    if isinstance(solver, DomainSpec):
        if solver.kind != "ball":
            raise GreenError("closed form only available for balls")
        return float(ball_regular_part(q, q, solver.radius, solver.center_array))
    val = float(solver.H(np.asarray(q, dtype=float), q))
    return val


def grad_regular_part(solver, q) -> np.ndarray:
    """Gradient of x -> H(x, q) at x = q."""
    if isinstance(solver, DomainSpec):
        if solver.kind != "ball":
            raise GreenError("closed form only available for balls")
        return ball_grad_regular_part(q, solver.radius, solver.center_array)
    return solver.grad_H(np.asarray(q, dtype=float), q)
