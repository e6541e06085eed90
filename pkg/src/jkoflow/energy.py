"""Energy functionals and the per-batch training loss.

An :class:`EnergyFunctional` composes optional internal, external and
interaction terms with a kinetic metric.  The same descriptor drives both
the taped training loss (:func:`batch_loss`) and the un-taped diagnostic
energy used to monitor dissipation across outer steps.

The training loss for a batch of N particles is

    (1/N) sum_j [ dtau sum_k kappa_j^k
                  + 2 dt ( U(rho_j^T)/rho_j^T + V(z_j^T)
                           + (1/N) sum_l W(z_j^T, z_l^T) ) ]

where z_j^k are the inner-trajectory positions, rho_j^T the terminal
densities carried through the log-determinant co-state, and kappa the
metric-specific kinetic integrand:

    plain Wasserstein     |v|^2
    nonlinear mobility    rho/M(rho) |v|^2   (rho at the current inner stage)
    Kalman-Wasserstein    v^T C(0)^{-1} v    (covariance frozen at stage 0)

With the entropy internal U(z) = z log z, the internal term simplifies to
log rho^n(x_j) - l_j^T, avoiding any density reconstruction; the general
route through the pushed density is also available and agrees to rounding.

External and interaction potentials are written against the polymorphic
helpers in :mod:`jkoflow.tape`, so one definition serves the taped and
plain numpy paths alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .flow import InnerSchedule, ParticleEnsemble
from .potential import ResNetPotential, TapedPotential
from .tape import Tape, Var, exp as vexp, log as vlog, vsum

__all__ = [
    "Metric",
    "Entropy",
    "PowerInternal",
    "EnergyFunctional",
    "KalmanState",
    "MobilityDomainError",
    "SingularCovarianceError",
    "kinetic_plain",
    "kinetic_mobility",
    "kinetic_kalman",
    "covariance_mean",
    "batch_loss",
    "TapedLoss",
    "diagnostic_energy",
    "diagnostic_energy_terms",
    "kl_internal",
]


class Metric:
    WASSERSTEIN = "wasserstein"
    NONLINEAR_MOBILITY = "nonlinear-mobility"
    KALMAN_WASSERSTEIN = "kalman-wasserstein"

    ALL = (WASSERSTEIN, NONLINEAR_MOBILITY, KALMAN_WASSERSTEIN)


class MobilityDomainError(ValueError):
    """The mobility function left its admissible range (M(rho) <= 0)."""


class SingularCovarianceError(ValueError):
    """The ensemble covariance is numerically singular or ill-conditioned."""


# -- internal energy densities -------------------------------------------------


@dataclass(frozen=True)
class Entropy:
    """U(z) = z log z.

    With ``shortcut`` the per-particle term is evaluated as
    log rho^n(x_j) - l_j, separating the known initial density from the
    accumulated log-determinant; otherwise the pushed density is formed
    first and U(rho)/rho = log rho applied to it.
    """

    shortcut: bool = True

    def u_over_rho(self, rho):
        return vlog(rho)

    def u(self, rho):
        return rho * vlog(rho)

    def taped_term(self, tape: Tape, rho_n: np.ndarray, l: Var) -> Var:
        if self.shortcut:
            return tape.sub(np.log(rho_n), l)
        rho_t = tape.mul(vexp(-l), rho_n)
        return vlog(rho_t)


@dataclass(frozen=True)
class PowerInternal:
    """U(z) = z^m / (m-1), the porous-medium internal energy (m > 1)."""

    exponent: float

    def __post_init__(self):
        if self.exponent <= 1.0:
            raise ValueError("power internal energy requires exponent > 1")

    def u_over_rho(self, rho):
        m = self.exponent
        return rho ** (m - 1.0) * (1.0 / (m - 1.0))

    def u(self, rho):
        return rho**self.exponent * (1.0 / (self.exponent - 1.0))

    def taped_term(self, tape: Tape, rho_n: np.ndarray, l: Var) -> Var:
        rho_t = tape.mul(vexp(-l), rho_n)
        return self.u_over_rho(rho_t)


@dataclass(frozen=True)
class EnergyFunctional:
    """Composable description of the energy driving one gradient flow.

    ``external`` maps a batch of positions (N, d) to per-particle values;
    ``interaction`` maps two broadcastable position arrays with trailing
    dimension d to pairwise values and must be symmetric; ``mobility``
    maps density values to M(rho) (None means M(rho) = rho, the plain
    Wasserstein mobility).
    """

    internal: Optional[object] = None
    external: Optional[Callable] = None
    interaction: Optional[Callable] = None
    mobility: Optional[Callable] = None
    metric: str = Metric.WASSERSTEIN

    def __post_init__(self):
        if self.metric not in Metric.ALL:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == Metric.NONLINEAR_MOBILITY and self.mobility is None:
            raise ValueError("nonlinear-mobility metric requires a mobility function")


# -- kinetic integrands --------------------------------------------------------


def kinetic_plain(v):
    """Squared Euclidean norm of the velocity, per row."""
    return vsum(v * v, axis=-1) if isinstance(v, Var) else np.sum(np.asarray(v) ** 2, axis=-1)


def kinetic_mobility(v, rho_at_z, M):
    """(rho / M(rho)) |v|^2 with the density at the current stage point."""
    mval = M(rho_at_z.value if isinstance(rho_at_z, Var) else np.asarray(rho_at_z))
    mvals = mval.value if isinstance(mval, Var) else np.asarray(mval)
    if np.any(mvals <= 0.0):
        raise MobilityDomainError("mobility M(rho) must be positive along the trajectory")
    if isinstance(rho_at_z, Var):
        weight = rho_at_z.tape.div(rho_at_z, M(rho_at_z))
    else:
        weight = np.asarray(rho_at_z) / np.asarray(M(rho_at_z))
    return weight * kinetic_plain(v)


def kinetic_kalman(v, Cinv: np.ndarray):
    """v^T Cinv v per row; Cinv is a constant (not taped) SPD matrix."""
    Cinv = np.asarray(Cinv, dtype=np.float64)
    if Cinv.ndim != 2 or Cinv.shape[0] != Cinv.shape[1]:
        raise ValueError("Cinv must be a square matrix")
    if not np.allclose(Cinv, Cinv.T, rtol=1e-10, atol=0) or np.any(np.linalg.eigvalsh(Cinv) <= 0):
        raise SingularCovarianceError("Cinv must be symmetric positive definite")
    if isinstance(v, Var):
        t = v.tape
        return t.sum(t.matmul(v, Cinv) * v, axis=1)
    v = np.asarray(v)
    return np.sum((v @ Cinv) * v, axis=-1)


@dataclass(frozen=True)
class KalmanState:
    """Empirical mean and covariance of an ensemble.

    ``Cinv`` is only formed when the covariance is numerically invertible
    (symmetric eigendecomposition, condition number within the configured
    bound); otherwise it is None and any kinetic evaluation that needs the
    preconditioner fails loudly.
    """

    C: np.ndarray
    m: np.ndarray
    Cinv: Optional[np.ndarray] = None

    def require_inverse(self) -> np.ndarray:
        if self.Cinv is None:
            raise SingularCovarianceError(
                "ensemble covariance is singular or ill-conditioned; no preconditioner available"
            )
        return self.Cinv


def covariance_mean(ens, cond_limit: float = 1e12) -> KalmanState:
    """Mean and 1/N-normalized covariance of the ensemble positions."""
    X = ens.positions if isinstance(ens, ParticleEnsemble) else np.asarray(ens, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("covariance needs at least two particles")
    mean = X.mean(axis=0)
    D = X - mean
    C = (D.T @ D) / X.shape[0]
    evals, evecs = np.linalg.eigh(C)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > cond_limit:
        return KalmanState(C=C, m=mean, Cinv=None)
    return KalmanState(C=C, m=mean, Cinv=(evecs / evals) @ evecs.T)


# -- the training loss ---------------------------------------------------------


@dataclass
class TapedLoss:
    """Scalar loss with its recorded tape; backward() yields d(loss)/d(theta).

    ``terminal_positions`` and ``terminal_logdets`` expose the inner
    trajectory endpoint values for consistency checks against the plain
    integration path (they are plain arrays, not taped handles).
    """

    value: float
    tape: Tape
    terminal_positions: np.ndarray = None
    terminal_logdets: np.ndarray = None

    def backward(self) -> dict:
        return self.tape.backward()


def _taped_rho(tape: Tape, rho_n: np.ndarray, l: Optional[Var]):
    """Density along the trajectory: rho^n / exp(l), taped through l."""
    if l is None:
        return rho_n
    return tape.mul(vexp(-l), rho_n)


def _interaction_matrix(tape: Tape, W, ZT: Var) -> Var:
    n = ZT.value.shape[0]
    Zj = tape.expand_dims(ZT, 1)
    Zl = tape.expand_dims(ZT, 0)
    Wm = W(Zj, Zl)
    wv = Wm.value
    if wv.shape != (n, n):
        raise ValueError("interaction must produce an (N, N) matrix of pair values")
    if not np.allclose(wv, wv.T, rtol=1e-12, atol=0.0):
        raise ValueError("interaction potential is not symmetric: W(x, y) != W(y, x)")
    return Wm


def batch_loss(
    net: ResNetPotential,
    functional: EnergyFunctional,
    ens: ParticleEnsemble,
    schedule: InnerSchedule,
    dt: float,
) -> TapedLoss:
    """Record the training loss of one batch on a fresh tape.

    The inner trajectory (positions and, when needed, the log-determinant
    co-state) is unrolled with the schedule's integrator; the kinetic
    integrand is accumulated by the left-endpoint rule on the inner grid,
    weighting each grid point with the metric's factor evaluated from the
    stage-local state.
    """
    if dt <= 0:
        raise ValueError("outer step dt must be positive")
    rho_n = ens.densities
    need_trace = functional.internal is not None or functional.metric == Metric.NONLINEAR_MOBILITY

    tape = Tape()
    tp = TapedPotential(tape, net)
    Z: Var = tape.constant(ens.positions)
    l: Optional[Var] = None  # log-determinant co-state, starts at zero

    cinv = None
    if functional.metric == Metric.KALMAN_WASSERSTEIN:
        # Frozen preconditioner: C(0)^{-1} from the batch at inner time 0,
        # treated as a constant during backward.
        cinv = covariance_mean(ens).require_inverse()

    dtau = schedule.dtau
    kinetic_sum = None
    for k in range(schedule.n_tau):
        t0 = k * dtau
        vel, kin, tr = tp.grad_trace(t0, Z, want_trace=need_trace)

        if functional.metric == Metric.WASSERSTEIN:
            kappa = kin
        elif functional.metric == Metric.NONLINEAR_MOBILITY:
            rho_k = _taped_rho(tape, rho_n, l)
            kappa = kinetic_mobility(vel, rho_k, functional.mobility)
        else:
            kappa = kinetic_kalman(vel, cinv)
        kinetic_sum = kappa if kinetic_sum is None else kinetic_sum + kappa

        # div(v) = -tr(hess phi): the co-state decreases by the trace.
        if schedule.integrator == "euler":
            Z = Z + dtau * vel
            if need_trace:
                dl = dtau * tr
                l = -dl if l is None else l - dl
        else:
            v2, _, g2 = tp.grad_trace(t0 + 0.5 * dtau, Z + (0.5 * dtau) * vel, want_trace=need_trace)
            v3, _, g3 = tp.grad_trace(t0 + 0.5 * dtau, Z + (0.5 * dtau) * v2, want_trace=need_trace)
            v4, _, g4 = tp.grad_trace(t0 + dtau, Z + dtau * v3, want_trace=need_trace)
            Z = Z + (dtau / 6.0) * (vel + 2.0 * v2 + 2.0 * v3 + v4)
            if need_trace:
                dl = (dtau / 6.0) * (tr + 2.0 * g2 + 2.0 * g3 + g4)
                l = -dl if l is None else l - dl

    per_particle = kinetic_sum * dtau

    potential_terms = None

    def accumulate(term):
        nonlocal potential_terms
        potential_terms = term if potential_terms is None else potential_terms + term

    if functional.internal is not None:
        accumulate(functional.internal.taped_term(tape, rho_n, l))
    if functional.external is not None:
        accumulate(functional.external(Z))
    if functional.interaction is not None:
        Wm = _interaction_matrix(tape, functional.interaction, Z)
        accumulate(vsum(Wm, axis=1) * (1.0 / ens.n))
    if potential_terms is not None:
        per_particle = per_particle + (2.0 * dt) * potential_terms

    out = vsum(per_particle) * (1.0 / ens.n)
    value = tape.finalize(out)
    return TapedLoss(
        value=value,
        tape=tape,
        terminal_positions=Z.value,
        terminal_logdets=None if l is None else l.value,
    )


# -- diagnostics ---------------------------------------------------------------


def diagnostic_energy_terms(functional: EnergyFunctional, ens: ParticleEnsemble) -> np.ndarray:
    """Per-particle Monte-Carlo contributions to the energy.

    e_j = U(rho_j)/rho_j + V(x_j) + (1/2N) sum_l W(x_j, x_l); the mean over
    j estimates the energy.  KL-type presets are reported up to the
    (unavailable) log-normalization constant, so only energy differences
    are meaningful there.
    """
    X = ens.positions
    terms = np.zeros(ens.n)
    if functional.internal is not None:
        terms += functional.internal.u_over_rho(ens.densities)
    if functional.external is not None:
        terms += np.asarray(functional.external(X))
    if functional.interaction is not None:
        Wm = np.asarray(functional.interaction(X[:, None, :], X[None, :, :]))
        terms += Wm.sum(axis=1) / (2.0 * ens.n)
    return terms


def diagnostic_energy(functional: EnergyFunctional, ens: ParticleEnsemble) -> float:
    """Monte-Carlo estimate of the energy at the ensemble's step."""
    return float(diagnostic_energy_terms(functional, ens).mean())


def kl_internal(rho_value, x, q) -> float:
    """Per-particle relative-entropy contribution log rho - log q(x).

    Equivalent to combining the entropy internal energy with the external
    potential V = -log q.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    qv = float(np.asarray(q.density(x))[0])
    if qv <= 0.0:
        raise ValueError("reference density vanishes at the particle")
    if rho_value <= 0.0:
        raise ValueError("particle density must be positive")
    return float(np.log(rho_value) - np.log(qv))
