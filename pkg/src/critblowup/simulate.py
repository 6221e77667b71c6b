"""Radial method-of-lines solver and the error of the blow-up ansatz.

Two independent tools live here.

* A finite-volume discretisation of the radial Laplacian on a graded grid,
  stepped with a convex-splitting IMEX scheme (implicit diffusion, explicit
  focusing nonlinearity).  The scheme dissipates the discrete energy for any
  step size.
* An evaluator of S(u) = -u_t + Delta u + |u|^{p-1} u for the modulated
  ansatz, using exact spatial operators and finite differences in time,
  together with the weighted sup norms used to measure it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize, sparse, special
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import spsolve

from . import green as green_mod
from . import heatpot
from .dynamics import BlowupConstants, ParamTrajectory, fit_loglog_slope, mu0
from .profiles import (
    BubbleProfile,
    KernelBasis,
    TowerProfile,
    TransformParams,
    alpha_n,
    critical_exponent,
    eval_transformed,
    _transform_coords,
    sphere_area,
)

logger = logging.getLogger(__name__)


class SimulationError(ValueError):
    """Invalid grid, state or configuration."""


class FitInvalid(ValueError):
    """The state is not a positive bubble centred at the origin."""


# --------------------------------------------------------------------------
# grid and finite-volume operators


def _log_sinh(x):
    x = np.asarray(x, dtype=float)
    return x + np.log1p(-np.exp(-2 * x)) - math.log(2.0)


def _graded_nodes(radius: float, nodes: int, core: float, core_nodes: int) -> np.ndarray:
    """r(s) = radius sinh(k s)/sinh(k) on a uniform s-grid, k chosen to put
    ``core_nodes`` nodes inside r <= core."""
    s = np.linspace(0.0, 1.0, nodes + 1)
    s1 = core_nodes / nodes
    target = core / radius
    if s1 >= 1:
        raise SimulationError("more core nodes requested than nodes")
    if target >= s1:
        return radius * s

    def gap(k):
        return float(_log_sinh(k * s1) - _log_sinh(k)) - math.log(target)

    hi = 1.0
    while gap(hi) > 0:
        hi *= 2
        if hi > 1e6:
            raise SimulationError("cannot grade grid to resolve the core")
    k = optimize.brentq(gap, 1e-8, hi, xtol=1e-14)
    # a hair of extra grading so rounding cannot drop the last core node
    k *= 1 + 1e-9
    r = np.zeros_like(s)
    r[1:] = radius * np.exp(_log_sinh(k * s[1:]) - _log_sinh(k))
    r[-1] = radius
    return r


@dataclass(frozen=True)
class RadialGrid:
    """Nodes 0 = r_0 < ... < r_N = radius with Dirichlet data at r_N.

    Control volume i is [r_{i-1/2}, r_{i+1/2}] with face radii at midpoints;
    volumes and fluxes carry the radial weight r^{n-1} (the sphere area is
    left out and restored in :func:`energy`).
    """

    n: int
    radii: np.ndarray
    volumes: np.ndarray = field(init=False, repr=False)
    face_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if r.ndim != 1 or len(r) < 3:
            raise SimulationError("need at least three nodes")
        if r[0] != 0.0 or np.any(np.diff(r) <= 0):
            raise SimulationError("nodes must start at 0 and increase strictly")
        if self.n < 3:
            raise SimulationError("n >= 3 required")
        r.setflags(write=False)
        object.__setattr__(self, "radii", r)
        n = self.n
        faces = np.concatenate([[0.0], 0.5 * (r[1:] + r[:-1]), [r[-1]]])
        vol = (faces[1:] ** n - faces[:-1] ** n) / n
        w = faces[1:-1] ** (n - 1) / np.diff(r)
        object.__setattr__(self, "volumes", vol)
        object.__setattr__(self, "face_weights", w)

    @classmethod
    def graded(cls, n: int, radius: float = 1.0, core: float = 0.01, nodes: int = 400, core_nodes: int = 20):
        """Grid with at least ``core_nodes`` positive nodes in r <= core."""
        if not (radius > 0 and core > 0):
            raise SimulationError("radius and core must be positive")
        return cls(n, _graded_nodes(radius, nodes, core, core_nodes))

    @property
    def radius(self) -> float:
        return float(self.radii[-1])

    def core_count(self, core: float) -> int:
        return int(np.count_nonzero((self.radii > 0) & (self.radii <= core)))

    def stiffness_banded(self) -> np.ndarray:
        """Upper banded form of K on the interior nodes 0..N-1 (Dirichlet at r_N)."""
        w = self.face_weights
        m = len(self.radii) - 1
        diag = np.zeros(m)
        diag += w[:m]
        diag[1:] += w[: m - 1]
        band = np.zeros((2, m))
        band[0, 1:] = -w[: m - 1]
        band[1] = diag
        return band

    def stiffness_matrix(self, robin: float | None = None) -> sparse.csr_matrix:
        """K on all nodes 0..N; ``robin`` adds the boundary flux -R^{n-1} robin u_N."""
        w = self.face_weights
        m = len(self.radii)
        diag = np.zeros(m)
        diag[:-1] += w
        diag[1:] += w
        if robin is not None:
            diag[-1] += self.radius ** (self.n - 1) * robin
        return sparse.diags([-w, diag, -w], [-1, 0, 1], format="csr")

    def laplacian(self, u: np.ndarray, boundary_value: float = 0.0) -> np.ndarray:
        """Discrete radial Laplacian at the interior nodes."""
        u = np.asarray(u, dtype=float)
        full = np.append(u[: len(self.radii) - 1], boundary_value)
        flux = self.face_weights * np.diff(full)
        div = np.zeros(len(full) - 1)
        div += flux
        div[1:] -= flux[:-1]
        return div / self.volumes[:-1]


@dataclass(frozen=True)
class RadialField:
    """State u(r_i, t) on the interior nodes plus the boundary value."""

    grid: RadialGrid
    values: np.ndarray
    t: float = 0.0
    boundary_value: float = 0.0
    blown_up: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == self.grid.radii.shape:
            v = v[:-1]
        if v.shape != (len(self.grid.radii) - 1,):
            raise SimulationError("values must match the interior nodes")
        object.__setattr__(self, "values", v)

    @property
    def full(self) -> np.ndarray:
        return np.append(self.values, self.boundary_value)

    @classmethod
    def from_function(cls, grid: RadialGrid, func: Callable, t: float = 0.0, boundary_value: float = 0.0):
        return cls(grid, np.asarray(func(grid.radii[:-1]), dtype=float), t, boundary_value)

    def to_csv(self) -> str:
        lines = ["r,u"]
        lines += [f"{float(r)!r},{float(u)!r}" for r, u in zip(self.grid.radii, self.full)]
        return "\n".join(lines) + "\n"


def _nonlinearity(u: np.ndarray, p: float) -> np.ndarray:
    return np.abs(u) ** (p - 1) * u


def step(state: RadialField, dt: float, nonlinear: bool = True, overflow: float = 1e12) -> RadialField:
    """One convex-splitting step (M + dt K) u' = M u + dt M f(u) + boundary terms.

    The diffusion is implicit and the concave part of the energy explicit,
    so the discrete energy never increases.  A state whose maximum exceeds
    ``overflow`` is returned unchanged with ``blown_up`` set.
    """
    if not dt > 0:
        raise SimulationError("dt must be positive")
    if state.blown_up:
        return state
    grid = state.grid
    mass = grid.volumes[:-1]
    u = state.values
    rhs = mass * u
    if nonlinear:
        rhs = rhs + dt * mass * _nonlinearity(u, critical_exponent(grid.n))
    rhs[-1] += dt * grid.face_weights[-1] * state.boundary_value
    band = dt * grid.stiffness_banded()
    band[1] += mass
    new = linalg.solveh_banded(band, rhs, check_finite=False)
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > overflow:
        logger.info("overflow guard tripped at t=%.6g", state.t + dt)
        return replace(state, t=state.t + dt, blown_up=True)
    return replace(state, values=new, t=state.t + dt)


def energy(state: RadialField) -> float:
    """int (|grad u|^2/2 - |u|^{p+1}/(p+1)) over the ball, discretised."""
    grid = state.grid
    p = critical_exponent(grid.n)
    du = np.diff(state.full)
    kinetic = 0.5 * np.sum(grid.face_weights * du * du)
    potential = np.sum(grid.volumes[:-1] * np.abs(state.values) ** (p + 1)) / (p + 1)
    return float(sphere_area(grid.n) * (kinetic - potential))


def fit_mu(state: RadialField) -> float:
    """Bubble scale from the centre value, mu = (alpha_n / u(0))^{2/(n-2)}.

    Raises :class:`FitInvalid` unless u(0) > 0 is a strict maximum.
    """
    u = state.values
    if state.blown_up or not u[0] > 0 or not u[0] > np.max(u[1:], initial=-np.inf) or not u[0] > state.boundary_value:
        raise FitInvalid("state is not a positive bubble peaked at the origin")
    n = state.grid.n
    return float((alpha_n(n) / u[0]) ** (2.0 / (n - 2)))


def first_dirichlet_eigenvalue(n: int, radius: float = 1.0) -> float:
    """(j_{n/2-1,1}/radius)^2 for radial functions on the n-ball."""
    nu = n / 2 - 1
    f = lambda z: special.jv(nu, z)
    lo = max(nu, 1e-6) + 1e-9
    hi = lo + 0.5
    while f(lo) * f(hi) > 0:
        hi += 0.5
    root = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return (root / radius) ** 2


def bubble_state(grid: RadialGrid, mu: float, amplitude: float = 1.0, shift: float = 0.0, t: float = 0.0) -> RadialField:
    """amplitude * (mu^{-(n-2)/2} U(r/mu) - shift)."""
    n = grid.n
    r = grid.radii[:-1]
    u = alpha_n(n) * mu ** ((n - 2) / 2) * (mu * mu + r * r) ** (-(n - 2) / 2)
    return RadialField(grid, amplitude * (u - shift), t)


# --------------------------------------------------------------------------
# blow-up demonstration


@dataclass(frozen=True)
class DemoConfig:
    """Radial run from the bubble ansatz on a ball.

    When ``mu_initial`` is omitted it is b c_n t0^{-1/(n-4)} for the bubble
    constants and the centre of the ball.
    """

    n: int = 5
    radius: float = 1.0
    t0: float = 0.15
    t_factor: float = 10.0
    mu_initial: float | None = None
    amplitude: float = 1.0
    nodes: int = 400
    core_fraction: float = 0.05
    dt_factor: float = 0.1
    dt_max: float = 1e-3
    records: int = 41
    overflow: float = 1e12
    decay_tol: float = 1e-8
    max_steps: int = 2_000_000
    shoot_iterations: int = 0
    shoot_bracket: tuple = (1.0, 1.5)

    def __post_init__(self):
        if self.n < 5:
            raise SimulationError("dimension n >= 5 required")
        if min(self.radius, self.t0, self.dt_factor, self.dt_max, self.decay_tol) <= 0 or self.t_factor <= 1:
            raise SimulationError("radius, t0, dt_factor, dt_max, decay_tol must be positive and t_factor > 1")
        if self.nodes < 40 or self.records < 2 or self.max_steps < 1 or self.shoot_iterations < 0:
            raise SimulationError("need nodes >= 40, records >= 2, max_steps >= 1, shoot_iterations >= 0")
        if not 0 < self.core_fraction < 1 or self.amplitude < 0:
            raise SimulationError("core_fraction must lie in (0, 1) and amplitude must be non-negative")
        if self.mu_initial is not None and self.mu_initial <= 0:
            raise SimulationError("mu_initial must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DemoConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SimulationError(f"unknown demo keys {sorted(extra)}")
        d = dict(d)
        if "shoot_bracket" in d:
            d["shoot_bracket"] = tuple(d["shoot_bracket"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["shoot_bracket"] = list(self.shoot_bracket)
        return d


@dataclass
class DemoResult:
    times: np.ndarray
    mu: np.ndarray
    energy: np.ndarray
    max_abs: np.ndarray
    outcome: str
    steps: int
    slope: float
    amplitude: float = 1.0

    def to_csv(self) -> str:
        lines = ["t,mu_fit,energy,max_abs_u"]
        for row in zip(self.times, self.mu, self.energy, self.max_abs):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "outcome": self.outcome,
            "steps": self.steps,
            "loglog_slope": self.slope,
            "records": len(self.times),
            "amplitude": self.amplitude,
        }


def demo_initial_mu(config: DemoConfig) -> float:
    if config.mu_initial is not None:
        return float(config.mu_initial)
    from . import quadrature

    n = config.n
    bubble = BubbleProfile(n)
    c1 = quadrature.const_c1(bubble)
    c2 = quadrature.const_c2(bubble)
    A = quadrature.const_A_exact(quadrature._as_tower(bubble).D, n)
    H = float(green_mod.ball_regular_part(np.zeros(n), np.zeros(n), config.radius))
    const = BlowupConstants(n, c1, c2, A, H)
    return float(const.b * mu0(config.t0, const))


def run_blowup_demo(config: DemoConfig) -> DemoResult:
    """Integrate from the bubble ansatz and record (t, fitted mu, energy).

    The initial state is amplitude * (U_mu - mu^{(n-2)/2} H(., 0)) for the
    centred ball, where H(., 0) is the constant alpha_n radius^{2-n}.  With
    ``shoot_iterations`` > 0 the amplitude is first bisected inside
    ``shoot_bracket`` towards the threshold between decay and blow-up, and the
    run on the blow-up side of the final bracket is returned.
    """
    if config.shoot_iterations > 0:
        lo, hi = map(float, config.shoot_bracket)
        single = replace(config, shoot_iterations=0)
        if _run_once(replace(single, amplitude=hi)).outcome != "blowup":
            raise SimulationError("upper shooting amplitude does not blow up")
        if _run_once(replace(single, amplitude=lo)).outcome == "blowup":
            raise SimulationError("lower shooting amplitude already blows up")
        for _ in range(config.shoot_iterations):
            mid = 0.5 * (lo + hi)
            if _run_once(replace(single, amplitude=mid)).outcome == "blowup":
                hi = mid
            else:
                lo = mid
        return _run_once(replace(single, amplitude=hi))
    return _run_once(config)


def _run_once(config: DemoConfig) -> DemoResult:
    n = config.n
    mu_init = demo_initial_mu(config)
    t_end = config.t0 * config.t_factor
    grid = RadialGrid.graded(n, config.radius, core=config.core_fraction * mu_init, nodes=config.nodes)
    shift = mu_init ** ((n - 2) / 2) * alpha_n(n) * config.radius ** (2 - n)
    state = bubble_state(grid, mu_init, config.amplitude, shift, t=config.t0)
    stops = np.geomspace(config.t0, t_end, config.records)
    times, mus, energies, maxima = [], [], [], []
    outcome = "completed"
    steps = 0
    initial_max = float(np.max(np.abs(state.values)))

    def record(s):
        try:
            m = fit_mu(s)
        except FitInvalid:
            m = float("nan")
        times.append(s.t)
        mus.append(m)
        energies.append(energy(s) if not s.blown_up else float("nan"))
        maxima.append(float(np.max(np.abs(s.values))) if not s.blown_up else float("inf"))

    record(state)
    for stop in stops[1:]:
        while state.t < stop * (1 - 1e-12):
            u0 = abs(state.values[0])
            scale = (alpha_n(n) / u0) ** (2.0 / (n - 2)) if u0 > 0 else config.radius
            dt = min(config.dt_factor * scale * scale, config.dt_max, stop - state.t)
            state = step(state, dt, overflow=config.overflow)
            steps += 1
            if state.blown_up:
                outcome = "blowup"
                break
            if steps >= config.max_steps:
                raise SimulationError("step budget exhausted")
        record(state)
        if state.blown_up:
            break
        if initial_max > 0 and maxima[-1] < config.decay_tol * initial_max:
            outcome = "decay"
    if initial_max == 0:
        outcome = "zero"
    mu_arr = np.asarray(mus)
    t_arr = np.asarray(times)
    ok = np.isfinite(mu_arr)
    slope = fit_loglog_slope(t_arr[ok], mu_arr[ok]) if ok.sum() >= 3 else float("nan")
    if outcome == "completed" and not ok[-1]:
        outcome = "decay"
    return DemoResult(t_arr, mu_arr, np.asarray(energies), np.asarray(maxima), outcome, steps, slope, config.amplitude)


# --------------------------------------------------------------------------
# weighted norms


@dataclass(frozen=True)
class NormParams:
    """Exponents of the weighted norms.

    ``sigma`` in (0, n-4), ``alpha`` slightly above 2, ``varsigma`` small,
    ``rho`` small (inner radius R = t0^rho).  ``beta`` and ``nu`` are derived.
    """

    n: int
    sigma: float = 0.5
    alpha: float = 2.1
    gamma: float = 1.0
    varsigma: float = 0.1
    rho: float = 0.05
    delta: float = 1.0

    def __post_init__(self):
        n = self.n
        if n < 5:
            raise SimulationError("n >= 5 required")
        if not 0 < self.sigma < n - 4:
            raise SimulationError(f"sigma must lie in (0, {n - 4})")
        if not 2 < self.alpha < 3:
            raise SimulationError("alpha must exceed 2 by a small amount")
        if not (self.gamma > 0 and 0 < self.varsigma < 1 and 0 < self.rho < 1 and self.delta > 0):
            raise SimulationError("gamma, varsigma, rho, delta out of range")

    @property
    def beta(self) -> float:
        return (self.n - 2) / (2 * (self.n - 4)) + self.sigma / (self.n - 4)

    @property
    def nu(self) -> float:
        return 1 + self.sigma / (self.n - 2)

    def inner_radius(self, t0: float) -> float:
        return float(t0**self.rho)


NORM_KINDS = ("inner_rhs", "outer_rhs", "outer", "inner", "delta")
_ALIASES = {
    "2+alpha,nu": "inner_rhs",
    "*,gamma,2+varsigma": "outer_rhs",
    "**,beta,alpha": "outer",
    "n-2+sigma,alpha": "inner",
}


def _kind(kind: str) -> str:
    k = _ALIASES.get(kind, kind)
    if k not in NORM_KINDS:
        raise SimulationError(f"unknown norm kind {kind!r}")
    return k


def inner_time(t, constants: BlowupConstants):
    """tau(t) = int_0^t mu0^{-2}, so that mu0^{n-2} is comparable to 1/tau."""
    n = constants.n
    e = (n - 2) / (n - 4)
    return np.asarray(t, dtype=float) ** e / (e * constants.c_n**2)


def envelope(kind: str, params: NormParams, y_abs, *, t=None, mu=None, mu0=None, tau=None) -> np.ndarray:
    """The dominating profile of a weighted norm at |y| and the given scales.

    inner_rhs   tau^{-nu} / (1 + |y|^{2+alpha})
    outer_rhs   mu^{-2} t^{-gamma} / (1 + |y|^{2+varsigma})
    outer       t^{-beta} / (1 + |y|^{alpha-2})
    inner       mu0^{n-2+sigma} / (1 + |y|^alpha)
    delta       mu0^delta
    """
    k = _kind(kind)
    y = np.abs(np.asarray(y_abs, dtype=float))

    def need(v, name):
        if v is None:
            raise SimulationError(f"norm kind {k!r} needs {name}")
        return np.asarray(v, dtype=float)

    if k == "inner_rhs":
        return need(tau, "tau") ** (-params.nu) / (1 + y ** (2 + params.alpha))
    if k == "outer_rhs":
        return need(mu, "mu") ** -2 * need(t, "t") ** (-params.gamma) / (1 + y ** (2 + params.varsigma))
    if k == "outer":
        return need(t, "t") ** (-params.beta) / (1 + y ** (params.alpha - 2))
    if k == "inner":
        return need(mu0, "mu0") ** (params.n - 2 + params.sigma) / (1 + y**params.alpha)
    return need(mu0, "mu0") ** params.delta * np.ones_like(y)


def weighted_norm(field, y_abs, kind: str, params: NormParams, *, gradient=None, **scales) -> float:
    """Least M with |field| <= M * envelope on the samples.

    For the ``inner`` kind an optional ``gradient`` magnitude adds the
    (1 + |y|) |grad| part of that norm.
    """
    vals = np.abs(np.asarray(field, dtype=float))
    if gradient is not None:
        y = np.abs(np.asarray(y_abs, dtype=float))
        vals = vals + (1 + y) * np.abs(np.asarray(gradient, dtype=float))
    env = envelope(kind, params, y_abs, **scales)
    return float(np.max(vals / env))


def sampled_norm(func: Callable, kind: str, params: NormParams, radius: float, samples: int = 200, **scales):
    """Norm of func(|y|) on |y| in [0, radius] and whether it is sample-stable.

    Returns (norm, relative change when the sample count is doubled).
    """

    def at(m):
        y = np.concatenate([[0.0], np.geomspace(1e-3 * max(radius, 1e-3), radius, m - 1)])
        return weighted_norm(func(y), y, kind, params, **scales)

    coarse = at(samples)
    fine = at(2 * samples)
    return fine, abs(fine - coarse) / max(abs(fine), 1e-300)


def divergence_check(func: Callable, kind: str, params: NormParams, radii=(10.0, 100.0), samples: int = 200, growth: float = 1.5, **scales):
    """Evaluate the norm on two radii; flag divergence when it grows by more than ``growth``.

    Returns (norm at the small radius, norm at the large radius, diverging).
    """
    small, _ = sampled_norm(func, kind, params, radii[0], samples, **scales)
    large, _ = sampled_norm(func, kind, params, radii[1], samples, **scales)
    return small, large, bool(large > growth * small)


# --------------------------------------------------------------------------
# corrector p0


def _bubble_potential(n: int, r):
    p = critical_exponent(n)
    return p * (alpha_n(n) * (1 + np.asarray(r) ** 2) ** (-(n - 2) / 2)) ** (p - 1)


def _z0_bubble(n: int, r):
    s = np.asarray(r) ** 2
    return 0.5 * (n - 2) * alpha_n(n) * (1 - s) * (1 + s) ** (-n / 2)


def farfield_dilation(n: int, r, D: float):
    """z0 - D (2 - |y|^2)/(1 + |y|^2)^{n/2} for the bubble."""
    s = np.asarray(r) ** 2
    return _z0_bubble(n, r) - D * (2 - s) * (1 + s) ** (-n / 2)


def corrector_source(constants: BlowupConstants, D: float, r) -> np.ndarray:
    """q0(|y|) = p U^{p-1} c2 b^2 / ((n-4) c_n^{n-4} c1) + b^2/((n-4) c_n^{n-4}) (z0 - D(2-|y|^2)/(1+|y|^2)^{n/2})."""
    n = constants.n
    b = constants.b
    scale = b * b / ((n - 4) * constants.c_n ** (n - 4))
    return scale * (_bubble_potential(n, r) * constants.c2 / constants.c1 + farfield_dilation(n, r, D))


def corrector_gamma(constants: BlowupConstants) -> float:
    """Factor gamma in Phi = gamma mu0^{n-2} p0.

    With mu = b mu0 and mu0' = -K mu0^{n-3}, the dilation part of the error
    is exactly -mu0^{n-2} q0, so the corrector that cancels it has gamma = 1.
    """
    return 1.0


@dataclass(frozen=True)
class Corrector:
    """Radial solution p0 of Delta p0 + p U^{p-1} p0 = q0 decaying like |y|^{-2}.

    ``solvability`` is the relative size of int q0 z0 and ``multiplier``
    the Lagrange multiplier of the normalisation int p0 U^{p-1} z0 = 0;
    both vanish for a consistent source.
    """

    n: int
    radii: np.ndarray
    values: np.ndarray
    solvability: float
    multiplier: float
    constants: BlowupConstants
    D: float
    _spline: CubicSpline = field(repr=False, compare=False, default=None)

    def __call__(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        R = self.radii[-1]
        inside = self._spline(np.minimum(r, R))
        outside = self.values[-1] * (R / np.maximum(r, R)) ** 2
        return np.where(r <= R, inside, outside)

    def source(self, r) -> np.ndarray:
        return corrector_source(self.constants, self.D, r)

    def laplacian(self, r) -> np.ndarray:
        """Delta p0 = q0 - p U^{p-1} p0."""
        return self.source(r) - _bubble_potential(self.n, r) * self(r)


def solve_corrector(constants: BlowupConstants, D: float, radius: float = 2000.0, nodes: int = 4000, solvability_tol: float = 1e-3) -> Corrector:
    """Two-point boundary-value solve for p0 on [0, radius].

    The far boundary carries the decay condition p + (r/2) p' = 0.  The
    kernel direction z0 is removed with a bordered system.
    """
    n = constants.n
    grid = RadialGrid.graded(n, radius, core=1.0, nodes=nodes, core_nodes=max(20, nodes // 40))
    r = grid.radii
    faces = np.concatenate([[0.0], 0.5 * (r[1:] + r[:-1]), [r[-1]]])
    vol = (faces[1:] ** n - faces[:-1] ** n) / n
    q0 = corrector_source(constants, D, r)
    z0 = _z0_bubble(n, r)
    pair = float(np.sum(vol * q0 * z0))
    scale = float(np.sqrt(np.sum(vol * q0 * q0) * np.sum(vol * z0 * z0)))
    solvability = abs(pair) / scale
    if solvability > solvability_tol:
        raise SimulationError(f"int q0 z0 = {pair:.3e} is not small (relative {solvability:.2e})")
    K = grid.stiffness_matrix(robin=2.0 / radius)
    op = -K + sparse.diags(vol * _bubble_potential(n, r))
    c = vol * _bubble_potential(n, r) * z0
    c = c / np.linalg.norm(c)
    border = sparse.bmat([[op, sparse.csr_matrix(c[:, None])], [sparse.csr_matrix(c[None, :]), None]], format="csc")
    rhs = np.append(vol * q0, 0.0)
    sol = spsolve(border, rhs)
    p0 = sol[:-1]
    mult = float(sol[-1]) / float(np.max(np.abs(vol * q0)))
    spline = CubicSpline(r, p0, bc_type=((1, 0.0), "not-a-knot"))
    return Corrector(n, r, p0, solvability, mult, constants, D, spline)


# --------------------------------------------------------------------------
# ansatz error


def cancelling_potentials(n: int, t0: float, trajectory: ParamTrajectory, D: float, E: float, kinds=("dilation",), **options):
    """Heat-potential specs whose sources cancel the slow tails of -d_t Q_A.

    The tails of z0, grad Q and the Kelvin kernels are D (2-|y|^2)/(1+|y|^2)^{n/2},
    E y/(1+|y|^2)^{n/2} and their combination; cancelling them needs the
    source with the opposite sign to :func:`heatpot.source_term` at the fitted
    constants, hence the flipped D and E here.
    """
    specs = []
    for kind in kinds:
        if kind == "kelvin":
            for i in (1, 2):
                specs.append(heatpot.HeatPotentialSpec(n, t0, trajectory, kind, D=-D, E=-E, index=i, **options))
        else:
            specs.append(heatpot.HeatPotentialSpec(n, t0, trajectory, kind, D=-D, E=-E, **options))
    return specs


def transform_at(trajectory: ParamTrajectory, t: float) -> TransformParams:
    snap = trajectory.snapshot(t)
    return TransformParams(snap["mu"], snap["xi"], snap["a"], snap["theta"])


@dataclass
class AnsatzField:
    """The ansatz u* = Q_A + mu^{(n-2)/2}(Phi* - H(., q)) + corrector.

    Each correction is optional.  ``potentials`` is a list of heat-potential
    specs whose values are summed into Phi*; ``green`` is a ball
    :class:`~critblowup.green.DomainSpec` or a
    :class:`~critblowup.green.GreenSolver`; ``corrector`` supplies p0 together
    with mu0 through its constants.
    """

    profile: BubbleProfile | TowerProfile
    trajectory: ParamTrajectory
    potentials: Sequence[heatpot.HeatPotentialSpec] = ()
    green: object = None
    q: np.ndarray | None = None
    corrector: Corrector | None = None

    def __post_init__(self):
        n = self.profile.n
        if self.trajectory.n != n:
            raise SimulationError("trajectory and profile dimensions differ")
        self.q = np.zeros(n) if self.q is None else np.asarray(self.q, dtype=float)
        if self.corrector is not None and self.corrector.n != n:
            raise SimulationError("corrector dimension differs")
        for s in self.potentials:
            if s.trajectory is not self.trajectory:
                raise SimulationError("potentials must share the ansatz trajectory")

    @property
    def n(self) -> int:
        return self.profile.n

    def _regular_part(self, x: np.ndarray) -> np.ndarray:
        g = self.green
        if isinstance(g, green_mod.DomainSpec):
            if g.kind != "ball":
                raise SimulationError("closed-form regular part needs a ball")
            return green_mod.ball_regular_part(x, self.q, g.radius, g.center_array)
        return np.asarray(g.H(x, self.q), dtype=float)

    def _corrector_scale(self, t: float) -> float:
        c = self.corrector.constants
        return corrector_gamma(c) * float(mu0(t, c)) ** (self.n - 2)

    def profile_part(self, x: np.ndarray, t: float) -> np.ndarray:
        return eval_transformed(self.profile, transform_at(self.trajectory, t), x)

    def corrector_part(self, x: np.ndarray, t: float) -> np.ndarray:
        """mu^{-(n-2)/2} gamma mu0^{n-2} p0((x - xi)/mu)."""
        A = transform_at(self.trajectory, t)
        y = np.linalg.norm((x - A.xi) / A.mu, axis=-1)
        return A.mu ** (-(self.n - 2) / 2) * self._corrector_scale(t) * self.corrector(y)

    def regular_part(self, x: np.ndarray) -> np.ndarray:
        return self._regular_part(x)

    def potential_values(self, x: np.ndarray, t: float):
        """(sum of Phi*, sum of the heat sources) at the points."""
        phi = np.zeros(x.shape[0])
        src = np.zeros(x.shape[0])
        for spec in self.potentials:
            for i, xi in enumerate(x):
                phi[i] += heatpot.potential(spec, xi, t)
                src[i] += heatpot.source_term(spec, xi, t)
        return phi, src


def _time_derivative(f: Callable[[float], np.ndarray], t: float, rel: float = 1e-3) -> np.ndarray:
    """Fourth-order central difference with spacing rel * t."""
    h = rel * t
    return (-f(t + 2 * h) + 8 * f(t + h) - 8 * f(t - h) + f(t - 2 * h)) / (12 * h)


def _nonlinear_increment(base: np.ndarray, shift: np.ndarray, p: float) -> np.ndarray:
    """|b + s|^{p-1}(b + s) - |b|^{p-1} b without cancellation when |s| << |b|."""
    out = _nonlinearity(base + shift, p) - _nonlinearity(base, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = shift / base
    small = np.isfinite(ratio) & (np.abs(ratio) < 0.5)
    out[small] = _nonlinearity(base[small], p) * np.expm1(p * np.log1p(ratio[small]))
    return out


def profile_residual(profile, A: TransformParams, x: np.ndarray) -> np.ndarray:
    """Delta Q_A + |Q_A|^{p-1} Q_A, evaluated in the profile variable.

    Both terms scale as mu^{-(n+2)/2}|eta|^{-(n+2)}, so the residual is that
    factor times Delta Q + |Q|^{p-1} Q at the transformed point; it vanishes
    for the bubble.
    """
    n = profile.n
    _, eta2, ytil = _transform_coords(A, x)
    if isinstance(profile, BubbleProfile):
        inner = np.zeros(ytil.shape[:-1])
    else:
        inner = profile.laplacian(ytil) + _nonlinearity(profile.value(ytil), profile.p)
    return A.mu ** (-(n + 2) / 2) * eta2 ** (-(n + 2) / 2) * inner


def ansatz_error(ansatz: AnsatzField, t: float, x, rel_step: float = 1e-3) -> np.ndarray:
    """S(u*) = -u*_t + Delta u* + |u*|^{p-1} u* at points x (shape (m, n)).

    Spatial derivatives are exact: Delta Q_A by conformal covariance, H is
    harmonic, the corrector Laplacian comes from its equation, and for each
    heat potential -d_t Phi + Delta Phi = -S_Phi.  The difference of the
    nonlinear terms is formed without cancellation, so the error stays
    resolved even when it is many orders below |Q_A|^p.
    """
    n = ansatz.n
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != n:
        raise SimulationError("points have the wrong dimension")
    A = transform_at(ansatz.trajectory, t)
    m = (n - 2) / 2
    p = critical_exponent(n)
    mu_dot = float(ansatz.trajectory.mu_dot(t))
    dmu_m = m * A.mu ** (m - 1) * mu_dot
    Q = ansatz.profile_part(x, t)
    S = -_time_derivative(lambda s: ansatz.profile_part(x, s), t, rel_step)
    S = S + profile_residual(ansatz.profile, A, x)
    shift = np.zeros_like(Q)
    if ansatz.green is not None:
        H = ansatz.regular_part(x)
        shift -= A.mu**m * H
        S = S + dmu_m * H
    if ansatz.corrector is not None:
        y = np.linalg.norm((x - A.xi) / A.mu, axis=-1)
        shift += ansatz.corrector_part(x, t)
        S = S - _time_derivative(lambda s: ansatz.corrector_part(x, s), t, rel_step)
        S = S + A.mu ** (-(n + 2) / 2) * ansatz._corrector_scale(t) * ansatz.corrector.laplacian(y)
    if ansatz.potentials:
        phi, src = ansatz.potential_values(x, t)
        shift += A.mu**m * phi
        S = S - dmu_m * phi - A.mu**m * src
    return S + _nonlinear_increment(Q, shift, p)


def leading_terms(profile, trajectory: ParamTrajectory, t: float, x) -> np.ndarray:
    """First-order part of -d_t Q_A in the parameter velocities, at a = theta = 0.

    Equals mu^{-(n+2)/2} [mu mu' z0 + mu xi'.grad Q + mu^2 a'.z_kelvin
    - mu^2 theta'.z_rot] evaluated at y = (x - xi)/mu.
    """
    n = profile.n
    x = np.atleast_2d(np.asarray(x, dtype=float))
    snap = trajectory.snapshot(t)
    mu, xi = snap["mu"], snap["xi"]
    y = (x - xi) / mu
    z = KernelBasis(profile).all(y)
    mu_dot = float(trajectory.mu_dot(t))
    xi_dot = np.asarray(trajectory.xi_dot(t), dtype=float)
    a_dot = np.asarray(trajectory.a_dot(t), dtype=float)
    th_dot = np.asarray(trajectory.theta_dot(t), dtype=float)
    total = mu * mu_dot * z[:, 0] + mu * z[:, 1 : n + 1] @ xi_dot
    total += mu * mu * (z[:, n + 2 : n + 4] @ a_dot)
    rot_index = [n + 1] + list(range(n + 4, 3 * n))
    total -= mu * mu * (z[:, rot_index] @ th_dot)
    return mu ** (-(n + 2) / 2) * total


def leading_term_discrepancy(profile, trajectory: ParamTrajectory, t: float, x) -> float:
    """max |mu^{(n+2)/2} (S(Q_A) - leading terms)| over the points."""
    n = profile.n
    ans = AnsatzField(profile, trajectory)
    S = ansatz_error(ans, t, x)
    L = leading_terms(profile, trajectory, t, x)
    mu = float(trajectory.mu(t))
    return float(np.max(np.abs(S - L)) * mu ** ((n + 2) / 2))


def sample_points(n: int, mu: float, xi, radius: float, count: int = 40, seed: int = 3) -> np.ndarray:
    """Points xi + mu y with |y| log-spread on [0.05, radius] in random directions."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(count, n))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    rad = np.geomspace(0.05, radius, count)
    return np.asarray(xi, dtype=float) + mu * rad[:, None] * dirs
