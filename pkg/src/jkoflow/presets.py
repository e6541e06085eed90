"""Named experiment presets: energy functional, initial law, defaults.

The registry is keyed by preset name and binds everything a run needs
besides the numeric configuration: the energy functional (internal /
external / interaction terms, mobility, metric), the initial distribution,
the spatial dimension, default hyperparameters, and the extra
reference values embedded into the run manifest (support-ring radii for
the porous-medium flow, potential contours and the grid minimizer for the
Bayesian flow) so that downstream consumers never re-derive physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import problems
from .energy import EnergyFunctional, Entropy, Metric, PowerInternal
from .tape import Var, exp as vexp, log as vlog, vsum

__all__ = ["PresetDefinition", "register_preset", "get_preset", "preset_names"]


@dataclass(frozen=True)
class PresetDefinition:
    name: str
    d: int
    functional: EnergyFunctional
    initial: object
    defaults: dict = field(default_factory=dict)
    extras: Optional[Callable] = None  # times -> dict of manifest reference values


_REGISTRY: dict = {}


def register_preset(definition: PresetDefinition) -> None:
    _REGISTRY[definition.name] = definition


def get_preset(name: str) -> PresetDefinition:
    if name not in _REGISTRY:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(_REGISTRY))}")
    return _REGISTRY[name]


def preset_names() -> list:
    return sorted(_REGISTRY)


def mixture_log_density_op(mix: problems.GaussianMixture):
    """Tape-compatible log-density of a Gaussian mixture.

    The log-sum-exp shift uses the recorded values as a constant, which
    leaves both the value and the gradient exact.
    """

    lw = np.log(mix.weights) - 0.5 * mix.d * np.log(2.0 * np.pi * mix.sigma**2)
    inv2s = -0.5 / mix.sigma**2

    def op(X):
        if not isinstance(X, Var):
            return mix.log_density(X)
        terms = []
        for c, w in zip(mix.centers, lw):
            q = vsum((X - c) ** 2, axis=1)
            terms.append(q * inv2s + float(w))
        mx = np.max(np.stack([a.value for a in terms]), axis=0)
        acc = None
        for a in terms:
            e = vexp(a - mx)
            acc = e if acc is None else acc + e
        return vlog(acc) + mx

    return op


def _quadratic_interaction(x, y):
    """W(x, y) = |x - y|^2, the attractive pair potential."""
    return vsum((x - y) ** 2, axis=-1)


def _fokker_planck(d: int = 2) -> PresetDefinition:
    if d == 2:
        initial = problems.GaussianMixture([[1.2, 0.0], [-1.2, 0.0]], sigma=0.5)
        target = problems.GaussianMixture(
            [[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]], sigma=0.5
        )
        name = "fokker-planck-kl"
        defaults = {
            "dt": 0.025,
            "n_tau": 1,
            "integrator": "euler",
            "outer_steps": 20,
            "learning_rate": 1e-5,
            "batch_size": 1000,
            "max_iterations": 10000,
            "network_layers": 3,
            "network_width": 64,
        }
    else:
        # High-dimensional variant: the four target centers live in the
        # first two coordinates, remaining coordinates are centered at 0.
        centers2 = np.array([[2.0, 2.5], [-2.5, 2.0], [-2.0, -2.5], [2.5, -2.0]])
        centers = np.zeros((4, d))
        centers[:, :2] = centers2
        initial = problems.GaussianMixture(np.zeros((1, d)), sigma=1.0)
        target = problems.GaussianMixture(centers, sigma=0.5)
        name = f"fokker-planck-kl-{d}d"
        defaults = {
            "dt": 0.2,
            "n_tau": 1,
            "integrator": "euler",
            "outer_steps": 17,
            "learning_rate": 1e-5,
            "batch_size": 1000,
            "max_iterations": 10000,
            "network_layers": 3,
            "network_width": 64,
        }

    logq = mixture_log_density_op(target)
    functional = EnergyFunctional(
        internal=Entropy(shortcut=True),
        external=lambda X: -logq(X),
        metric=Metric.WASSERSTEIN,
    )
    defaults["preset"] = name

    def extras(times):
        return {"target_centers": np.asarray(target.centers).tolist()}

    return PresetDefinition(name, d, functional, initial, defaults, extras)


def _porous_medium(d: int = 2, m_exp: float = 2.0) -> PresetDefinition:
    params = problems.BarenblattParams(d=d, m=m_exp)
    initial = problems.BarenblattProfile(params)
    functional = EnergyFunctional(internal=PowerInternal(m_exp), metric=Metric.WASSERSTEIN)
    name = "porous-medium" if d == 2 else f"porous-medium-{d}d"
    defaults = {
        "preset": name,
        "dt": 0.001 if d == 2 else 0.0005,
        "n_tau": 2,
        "integrator": "rk4",
        "outer_steps": 10,
        "learning_rate": 1e-5 if d == 2 else 1e-6,
        "batch_size": 1000,
        "max_iterations": 10000 if d == 2 else 20000,
        "network_layers": 3,
        "network_width": 128,
    }

    def extras(times):
        return {
            "porous_exponent": m_exp,
            "support_radius": [problems.barenblatt_support_radius(params, t) for t in times],
        }

    return PresetDefinition(name, d, functional, initial, defaults, extras)


def _nonlocal_mobility() -> PresetDefinition:
    initial = problems.TruncatedParabola()
    functional = EnergyFunctional(
        interaction=_quadratic_interaction,
        mobility=lambda rho: rho * (1.0 - rho),
        metric=Metric.NONLINEAR_MOBILITY,
    )
    defaults = {
        "preset": "nonlocal-mobility",
        "dt": 0.025,
        "n_tau": 1,
        "integrator": "euler",
        "outer_steps": 8,
        "learning_rate": 1e-5,
        "batch_size": 1000,
        "max_iterations": 10000,
        "network_layers": 3,
        "network_width": 64,
    }
    return PresetDefinition("nonlocal-mobility", 2, functional, initial, defaults, None)


def _kalman_wasserstein() -> PresetDefinition:
    setup = problems.BayesSetup()
    initial = problems.ProductNormalUniform(90.0, 110.0)
    functional = EnergyFunctional(
        internal=Entropy(shortcut=True),
        external=lambda U: problems.phi_potential_batch(setup, U),
        metric=Metric.KALMAN_WASSERSTEIN,
    )
    defaults = {
        "preset": "kalman-wasserstein",
        "dt": 0.5,
        "n_tau": 1,
        "integrator": "euler",
        "outer_steps": 40,
        "learning_rate": 2e-4,
        "batch_size": 1000,
        "max_iterations": 4000,
        "network_layers": 3,
        "network_width": 32,
    }

    def extras(times):
        argmin = problems.phi_grid_argmin(setup)
        g1 = np.linspace(-6.0, 2.0, 61)
        g2 = np.linspace(85.0, 120.0, 61)
        A, B = np.meshgrid(g1, g2, indexing="ij")
        vals = problems.phi_potential_batch(setup, np.column_stack([A.ravel(), B.ravel()]))
        return {
            "phi_argmin": argmin.tolist(),
            "phi_grid": {
                "u1": g1.tolist(),
                "u2": g2.tolist(),
                "values": vals.reshape(61, 61).tolist(),
            },
        }

    return PresetDefinition("kalman-wasserstein", 2, functional, initial, defaults, extras)


register_preset(_fokker_planck(2))
register_preset(_fokker_planck(10))
register_preset(_porous_medium(2))
register_preset(_porous_medium(10))
register_preset(_nonlocal_mobility())
register_preset(_kalman_wasserstein())
