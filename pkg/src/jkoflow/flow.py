"""Particle transport along the learned velocity field.

Positions z and the log-determinant co-state l evolve jointly over the
inner time interval [0, 1]:

    dz/dtau = v(tau, z),        z(0) = x,
    dl/dtau = div(v)(tau, z),   l(0) = 0,

with v = -grad_x phi and div(v) = -tr hess_x phi supplied by the potential
network.  The co-state turns determinant tracking into a scalar ODE: at
inner time 1, exp(l) equals det |dT/dx| of the flow map, so carried
densities push forward by the plain quotient rho_new = rho_old / exp(l).

Both integrators advance (z, l) with the same scheme and stage positions,
which keeps the discrete determinant consistent with the discrete map (the
composition of two integrations adds their log-determinants).  Integration
is deterministic: same network, schedule and ensemble give bit-identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ParticleEnsemble",
    "InnerSchedule",
    "step_euler",
    "step_rk4",
    "integrate",
    "push_density",
    "replay",
]

# exp overflows double precision beyond this; a log-det of this size means
# the run has lost all meaning anyway.
_LOGDET_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Particles of one outer JKO step with carried densities.

    ``step`` is the outer index n, ``positions`` an (N, d) matrix,
    ``logdets`` the accumulated per-particle log-determinants of the most
    recent map, and ``densities`` the strictly positive values of rho^n at
    the particle locations.
    """

    step: int
    positions: np.ndarray
    logdets: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("positions must be a non-empty (N, d) matrix")
        l = np.asarray(self.logdets, dtype=np.float64)
        rho = np.asarray(self.densities, dtype=np.float64)
        if l.shape != (p.shape[0],) or rho.shape != (p.shape[0],):
            raise ValueError("logdets and densities must be N-vectors")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(l)) and np.all(np.isfinite(rho))):
            raise ValueError("ensemble fields must be finite")
        if np.any(rho <= 0.0):
            raise ValueError("densities must be strictly positive")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "logdets", l)
        object.__setattr__(self, "densities", rho)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class InnerSchedule:
    """Inner time grid: n_tau steps of size dtau = 1/n_tau on [0, 1]."""

    n_tau: int
    integrator: str = "rk4"

    def __post_init__(self):
        if self.n_tau < 1:
            raise ValueError("n_tau must be >= 1")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    @property
    def dtau(self) -> float:
        return 1.0 / self.n_tau


def _checked(positions, logdets):
    if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(logdets))):
        raise ArithmeticError("integration produced non-finite positions or log-determinants")
    return positions, logdets


def step_euler(net, schedule: InnerSchedule, k: int, ens: ParticleEnsemble) -> ParticleEnsemble:
    """One forward-Euler step of the joint (z, l) system at inner index k."""
    if not 0 <= k < schedule.n_tau:
        raise ValueError(f"inner index {k} outside [0, {schedule.n_tau})")
    dtau = schedule.dtau
    V, dv = net.velocity_divergence(k * dtau, ens.positions)
    z, l = _checked(ens.positions + dtau * V, ens.logdets + dtau * dv)
    return replace(ens, positions=z, logdets=l)


def step_rk4(net, schedule: InnerSchedule, k: int, ens: ParticleEnsemble) -> ParticleEnsemble:
    """One classical RK4 step of the joint (z, l) system at inner index k."""
    if not 0 <= k < schedule.n_tau:
        raise ValueError(f"inner index {k} outside [0, {schedule.n_tau})")
    dtau = schedule.dtau
    t0 = k * dtau
    z = ens.positions
    v1, g1 = net.velocity_divergence(t0, z)
    v2, g2 = net.velocity_divergence(t0 + 0.5 * dtau, z + 0.5 * dtau * v1)
    v3, g3 = net.velocity_divergence(t0 + 0.5 * dtau, z + 0.5 * dtau * v2)
    v4, g4 = net.velocity_divergence(t0 + dtau, z + dtau * v3)
    znew = z + (dtau / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
    lnew = ens.logdets + (dtau / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    znew, lnew = _checked(znew, lnew)
    return replace(ens, positions=znew, logdets=lnew)


def push_density(ens: ParticleEnsemble) -> np.ndarray:
    """Densities at the mapped points: rho / exp(l), the exact quotient."""
    if np.any(np.abs(ens.logdets) > _LOGDET_LIMIT):
        raise OverflowError("log-determinant magnitude exceeds exp() range; aborting")
    return ens.densities / np.exp(ens.logdets)


def integrate(net, schedule: InnerSchedule, ens: ParticleEnsemble) -> ParticleEnsemble:
    """Transport an ensemble through inner time [0, 1] under one potential.

    The log-determinant co-state starts from zero (the flow map at inner
    time 0 is the identity), densities are pushed through the accumulated
    determinant at the end, and the outer step index advances by one.
    """
    cur = replace(ens, logdets=np.zeros(ens.n))
    stepper = step_euler if schedule.integrator == "euler" else step_rk4
    for k in range(schedule.n_tau):
        cur = stepper(net, schedule, k, cur)
    try:
        return ParticleEnsemble(
            step=ens.step + 1,
            positions=cur.positions,
            logdets=cur.logdets,
            densities=push_density(cur),
        )
    except ValueError as exc:
        # underflowed density quotients are a numerical divergence, not a
        # caller error
        raise ArithmeticError(f"integration produced degenerate densities: {exc}") from None


def replay(checkpoints, initial: ParticleEnsemble, schedule: InnerSchedule) -> ParticleEnsemble:
    """Push fresh step-0 samples through a chain of trained potentials.

    ``checkpoints`` lists the potentials of steps 1..n in order; densities
    chain through the per-map determinant quotients, so the result carries
    rho^n along the trajectory of each particle.
    """
    cur = initial
    for i, net in enumerate(checkpoints):
        if net is None:
            raise ValueError(f"missing checkpoint for step {i + 1}")
        cur = integrate(net, schedule, cur)
    return cur
