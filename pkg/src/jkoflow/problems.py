"""Initial/target distributions and independent analytic oracles.

Everything here is a pure function of its arguments: samplers take an
explicit seeded generator, densities are evaluated in closed form, and the
oracles (self-similar porous-medium profile, elliptic forward map,
finite-difference flow-map Jacobian) are independent of the solver code
paths they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded

from .flow import InnerSchedule, ParticleEnsemble, integrate
from .tape import Var, exp as vexp

__all__ = [
    "GaussianMixture",
    "UniformBox",
    "TruncatedParabola",
    "ProductNormalUniform",
    "BarenblattProfile",
    "sample",
    "BarenblattParams",
    "barenblatt_density",
    "barenblatt_support_radius",
    "BayesSetup",
    "forward_map",
    "forward_map_fd_oracle",
    "phi_potential",
    "phi_potential_batch",
    "phi_grid_argmin",
    "fd_flowmap_jacobian",
]


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- distributions ------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture with shared scale sigma."""

    centers: np.ndarray
    sigma: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        w = self.weights
        w = np.full(len(c), 1.0 / len(c)) if w is None else np.asarray(w, dtype=np.float64)
        if w.shape != (len(c),) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("weights must be non-negative and sum to 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        # stable logsumexp over components
        q = -0.5 * ((X[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2) / self.sigma**2
        lw = np.log(self.weights) - 0.5 * self.d * np.log(2.0 * np.pi * self.sigma**2)
        a = q + lw
        mx = a.max(axis=1)
        return mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))

    def density(self, X: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(X))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.centers[comp] + self.sigma * rng.standard_normal((n, self.d))


@dataclass(frozen=True)
class UniformBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box bounds must satisfy lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    def density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        vol = float(np.prod(self.hi - self.lo))
        inside = np.all((X >= self.lo) & (X <= self.hi), axis=1)
        return np.where(inside, 1.0 / vol, 0.0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.d))


@dataclass(frozen=True)
class TruncatedParabola:
    """rho(x) = (3/4)(1 - |x|^2)_+ on the unit disk (d = 2)."""

    amplitude: float = 0.75

    @property
    def d(self) -> int:
        return 2

    def density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.amplitude * np.maximum(0.0, 1.0 - (X**2).sum(axis=1))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # rejection from the unit disk against the parabola's peak
        out = np.empty((0, 2))
        while len(out) < n:
            k = max(2 * (n - len(out)), 64)
            pts = rng.uniform(-1.0, 1.0, size=(k, 2))
            keep = rng.random(k) * self.amplitude < self.density(pts)
            out = np.concatenate([out, pts[keep]], axis=0)
        return out[:n]


@dataclass(frozen=True)
class ProductNormalUniform:
    """First coordinate N(0, 1), second coordinate U(lo, hi)."""

    lo: float = 90.0
    hi: float = 110.0

    @property
    def d(self) -> int:
        return 2

    def density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        pdf1 = np.exp(-0.5 * X[:, 0] ** 2) / math.sqrt(2.0 * math.pi)
        inside = (X[:, 1] >= self.lo) & (X[:, 1] <= self.hi)
        return np.where(inside, pdf1 / (self.hi - self.lo), 0.0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u1 = rng.standard_normal(n)
        u2 = rng.uniform(self.lo, self.hi, size=n)
        return np.column_stack([u1, u2])


@dataclass(frozen=True)
class BarenblattProfile:
    """The self-similar porous-medium profile at time zero.

    Needed as the initial condition of the porous-medium runs so that the
    closed-form solution at later times is the exact reference.  Sampling
    is by rejection from the supporting ball.
    """

    params: "BarenblattParams"

    @property
    def d(self) -> int:
        return self.params.d

    def density(self, X: np.ndarray) -> np.ndarray:
        return barenblatt_density(self.params, 0.0, X)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        R = barenblatt_support_radius(self.params, 0.0)
        peak = float(barenblatt_density(self.params, 0.0, np.zeros((1, self.d)))[0])
        out = np.empty((0, self.d))
        while len(out) < n:
            k = max(4 * (n - len(out)), 128)
            pts = rng.uniform(-R, R, size=(k, self.d))
            keep = rng.random(k) * peak < self.density(pts)
            out = np.concatenate([out, pts[keep]], axis=0)
        return out[:n]


def sample(dist, n: int, seed):
    """Draw n i.i.d. samples and their exact densities, deterministically."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = _as_rng(seed)
    pts = dist.sample(n, rng)
    dens = dist.density(pts)
    if np.any(dens <= 0):
        raise ValueError("sampler produced a point of zero density")
    return pts, dens


# -- porous-medium self-similar solution --------------------------------------


def _ball_surface(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _profile_mass(d: int, m: float, beta: float, C: float) -> float:
    # integral of (C - beta r^2)_+^{1/(m-1)} over R^d, radially
    R = math.sqrt(C / beta)
    val, _ = quad(lambda r: (C - beta * r * r) ** (1.0 / (m - 1.0)) * r ** (d - 1), 0.0, R, limit=200)
    return _ball_surface(d) * val


@dataclass(frozen=True)
class BarenblattParams:
    """Exponents and normalizing constant of the self-similar solution.

    alpha = d / (d(m-1) + 2), beta = (m-1) alpha / (2 d m); C is fixed by
    bisection so that the profile carries unit mass (the mass is invariant
    in time).
    """

    d: int
    m: float
    t0: float = 1e-3
    C: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.m <= 1.0:
            raise ValueError("porous-medium exponent must satisfy m > 1")
        if self.C is None:
            object.__setattr__(self, "C", self._normalize())

    @property
    def alpha(self) -> float:
        return self.d / (self.d * (self.m - 1.0) + 2.0)

    @property
    def beta(self) -> float:
        return (self.m - 1.0) * self.alpha / (2.0 * self.d * self.m)

    def _normalize(self) -> float:
        lo, hi = 1e-8, 1.0
        while _profile_mass(self.d, self.m, self.beta, hi) < 1.0:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _profile_mass(self.d, self.m, self.beta, mid) < 1.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15 * hi:
                break
        return 0.5 * (lo + hi)


def barenblatt_density(p: BarenblattParams, t: float, X) -> np.ndarray:
    """Closed-form density at time t; zero outside the supporting ball."""
    if t < 0:
        raise ValueError("time must be non-negative")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s = t + p.t0
    r2 = (X**2).sum(axis=1)
    inner = np.maximum(0.0, p.C - p.beta * r2 * s ** (-2.0 * p.alpha / p.d))
    return s ** (-p.alpha) * inner ** (1.0 / (p.m - 1.0))


def barenblatt_support_radius(p: BarenblattParams, t: float) -> float:
    """Radius where the positive part vanishes: sqrt(C/beta) (t+t0)^(alpha/d)."""
    return math.sqrt(p.C / p.beta) * (t + p.t0) ** (p.alpha / p.d)


# -- Bayesian inverse problem --------------------------------------------------


@dataclass(frozen=True)
class BayesSetup:
    """Observation and (co)variance scales of the elliptic inverse problem."""

    y: np.ndarray = field(default_factory=lambda: np.array([27.5, 79.7]))
    gamma: float = 0.1**2  # observation covariance Gamma = gamma * I2
    gamma0: float = 10.0**2  # prior covariance Gamma0 = gamma0 * I2

    def __post_init__(self):
        if self.gamma <= 0 or self.gamma0 <= 0:
            raise ValueError("covariance scales must be positive")
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))


# p_u(x) = u2 x + e^{-u1} (x/2 - x^2/2); both observation points share the
# same parabolic coefficient value.
_P25 = 0.25 / 2.0 - 0.25**2 / 2.0  # = 0.09375
_P75 = 0.75 / 2.0 - 0.75**2 / 2.0  # = 0.09375


def forward_map(u) -> np.ndarray:
    """G(u) = (p_u(0.25), p_u(0.75)) from the closed-form solution."""
    u = np.asarray(u, dtype=np.float64)
    e = math.exp(-u[0])
    return np.array([0.25 * u[1] + e * _P25, 0.75 * u[1] + e * _P75])


def forward_map_fd_oracle(u, n: int = 1000) -> np.ndarray:
    """Independent check of the forward map by a finite-difference solve.

    Discretizes -(e^{u1} p')' = 1 with p(0) = 0, p(1) = u2 on an n-interval
    grid and reads off p at x = 0.25 and 0.75.
    """
    if n % 4 != 0:
        raise ValueError("grid count must be divisible by 4")
    u = np.asarray(u, dtype=np.float64)
    h = 1.0 / n
    k = math.exp(u[0])
    # interior unknowns p_1..p_{n-1}: k (2 p_i - p_{i-1} - p_{i+1}) / h^2 = 1
    m = n - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = -k / h**2
    ab[1, :] = 2.0 * k / h**2
    ab[2, :-1] = -k / h**2
    rhs = np.ones(m)
    rhs[-1] += k / h**2 * u[1]
    p = solve_banded((1, 1), ab, rhs)
    full = np.concatenate([[0.0], p, [u[1]]])
    return np.array([full[n // 4], full[3 * n // 4]])


def phi_potential(setup: BayesSetup, u) -> float:
    """Data misfit plus prior: (1/2)|G(u)-y|^2_Gamma + (1/2)|u|^2_Gamma0,
    with |v|^2_A meaning v^T A^{-1} v."""
    u = np.asarray(u, dtype=np.float64)
    r = forward_map(u) - setup.y
    return float(0.5 * (r @ r) / setup.gamma + 0.5 * (u @ u) / setup.gamma0)


def phi_potential_batch(setup: BayesSetup, U):
    """Vectorized (and tape-compatible) potential for a batch of rows."""
    if isinstance(U, Var):
        t = U.tape
        u1 = t.reshape(t.narrow(U, 1, 0, 1), (U.shape[0],))
        u2 = t.reshape(t.narrow(U, 1, 1, 2), (U.shape[0],))
        e = vexp(-u1)
        r1 = 0.25 * u2 + _P25 * e - float(setup.y[0])
        r2 = 0.75 * u2 + _P75 * e - float(setup.y[1])
        misfit = (r1**2 + r2**2) * (0.5 / setup.gamma)
        prior = (u1**2 + u2**2) * (0.5 / setup.gamma0)
        return misfit + prior
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    e = np.exp(-U[:, 0])
    r1 = 0.25 * U[:, 1] + _P25 * e - setup.y[0]
    r2 = 0.75 * U[:, 1] + _P75 * e - setup.y[1]
    return 0.5 * (r1**2 + r2**2) / setup.gamma + 0.5 * (U**2).sum(axis=1) / setup.gamma0


def phi_grid_argmin(setup: BayesSetup, bounds=((-5.0, 0.0), (90.0, 115.0)), n: int = 400) -> np.ndarray:
    """Dense-grid minimizer of the potential, used as a convergence oracle."""
    g1 = np.linspace(bounds[0][0], bounds[0][1], n)
    g2 = np.linspace(bounds[1][0], bounds[1][1], n)
    A, B = np.meshgrid(g1, g2, indexing="ij")
    U = np.column_stack([A.ravel(), B.ravel()])
    vals = phi_potential_batch(setup, U)
    return U[int(np.argmin(vals))]


# -- flow-map Jacobian oracle --------------------------------------------------


def fd_flowmap_jacobian(net, schedule: InnerSchedule, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of x -> T(1, x) via 2d extra integrations."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    probes = np.repeat(x[None, :], 2 * d, axis=0)
    for i in range(d):
        probes[2 * i, i] += h
        probes[2 * i + 1, i] -= h
    ens = ParticleEnsemble(0, probes, np.zeros(2 * d), np.ones(2 * d))
    mapped = integrate(net, schedule, ens).positions
    J = np.empty((d, d))
    for i in range(d):
        J[:, i] = (mapped[2 * i] - mapped[2 * i + 1]) / (2.0 * h)
    return J
