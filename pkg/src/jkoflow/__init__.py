"""Particle solver for Wasserstein-type gradient flows.

Each outer step trains a scalar potential network whose gradient field
transports the particle ensemble over an inner time interval; carried
densities follow the log-determinant co-state of the transport map.
Metric variants cover plain Wasserstein, nonlinear-mobility and
covariance-preconditioned (Kalman) kinetic terms.

Typical library use::

    from jkoflow import JKOConfig, run, config_from_preset

    cfg = config_from_preset("fokker-planck-kl", batch_size=500,
                             max_iterations=2000, outer_steps=20)
    snapshots = run(cfg, out_dir="runs/fp")
"""

from .energy import EnergyFunctional, Entropy, Metric, PowerInternal, batch_loss, diagnostic_energy
from .flow import InnerSchedule, ParticleEnsemble, integrate, push_density, replay
from .jko import JKOConfig, JKORunner, Snapshot, config_from_preset, load_config, run
from .potential import ResNetPotential, init_params, load_checkpoint, save_checkpoint
from .presets import get_preset, preset_names, register_preset

__all__ = [
    "EnergyFunctional",
    "Entropy",
    "Metric",
    "PowerInternal",
    "batch_loss",
    "diagnostic_energy",
    "InnerSchedule",
    "ParticleEnsemble",
    "integrate",
    "push_density",
    "replay",
    "JKOConfig",
    "JKORunner",
    "Snapshot",
    "config_from_preset",
    "load_config",
    "run",
    "ResNetPotential",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "get_preset",
    "preset_names",
    "register_preset",
]

__version__ = "0.1.0"
