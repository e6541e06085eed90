"""Outer driver: per-step Adam training, resampling, persistence.

Each outer step n trains a fresh (or warm-started) potential against the
batch loss of the current ensemble, stops on the relative-loss criterion
or an iteration cap, checkpoints the trained parameters, advances the
ensemble by integrating the learned transport, and persists a snapshot.

Resampling semantics: a training step always acquires its batch at
iteration 0, and again whenever ``resample_every`` iterations have passed
(``None`` means never mid-step).  A fresh acquisition draws new step-0
samples and replays them through every trained map.  When mid-step
resampling is off, the driver keeps the advanced ensemble instead of
replaying from scratch: with the same initial draw the two are the same
arithmetic, so the shortcut is exact, and replay cost stays linear in the
number of steps.

On a non-finite loss (or a mobility-range failure) the step restarts once
from its initial parameters with the learning rate halved; a second
failure aborts the run.

File layout of a persisted run directory:

    manifest.json        config echo, times, energies (+ Monte-Carlo
                         slack), loss curves, file names, preset extras
    initial.csv          the step-0 ensemble
    snapshot_###.csv     one per outer step, header
                         step,t,id,x0,...,x{d-1},logdet,density
    checkpoint_###.json  trained potential of each step

All floats are written with 17 significant digits, so identical runs
produce byte-identical files and reading a run back is lossless.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import problems
from .energy import (
    MobilityDomainError,
    batch_loss,
    diagnostic_energy_terms,
)
from .flow import InnerSchedule, ParticleEnsemble, integrate, replay
from .potential import ResNetPotential, init_params, load_checkpoint, save_checkpoint
from .presets import PresetDefinition, get_preset

__all__ = [
    "JKOConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "stopping_error",
    "Snapshot",
    "RunDivergedError",
    "JKORunner",
    "run",
    "write_snapshot",
    "read_snapshot",
    "write_manifest",
    "read_manifest",
    "load_config",
    "config_from_preset",
]

MANIFEST_VERSION = 1


class RunDivergedError(RuntimeError):
    """Training produced non-finite losses twice in one outer step."""


# -- configuration -------------------------------------------------------------


@dataclass
class JKOConfig:
    """Numeric configuration of one run; JSON config files mirror these
    fields one-for-one and unknown keys are rejected."""

    preset: str
    dt: float
    n_tau: int = 1
    integrator: str = "rk4"
    outer_steps: int = 1
    learning_rate: float = 1e-5
    tolerance: float = 1e-12
    resample_every: Optional[int] = None  # None: never resample mid-step
    batch_size: int = 1000
    max_iterations: int = 1000
    seed: int = 0
    network_layers: int = 3
    network_width: int = 64
    init_mode: str = "scaled-normal"
    reinit_each_step: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.batch_size < 1 or self.outer_steps < 1:
            raise ValueError("batch_size and outer_steps must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.resample_every is not None and self.resample_every < 1:
            raise ValueError("resample_every must be >= 1 or null")
        if self.network_layers < 2:
            raise ValueError("network_layers must be >= 2")
        if self.init_mode not in ("unit-normal", "scaled-normal"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        InnerSchedule(self.n_tau, self.integrator)  # validates both

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "JKOConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "preset" not in doc or "dt" not in doc:
            raise ValueError("config requires at least 'preset' and 'dt'")
        return cls(**doc)


def load_config(path) -> JKOConfig:
    with open(path) as fh:
        return JKOConfig.from_dict(json.load(fh))


def config_from_preset(name: str, **overrides) -> JKOConfig:
    """Config seeded from a preset's default hyperparameters."""
    doc = dict(get_preset(name).defaults)
    doc.update(overrides)
    return JKOConfig.from_dict(doc)


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter shapes."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(state: AdamState, params: dict, grads: dict, alpha: float) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("parameter, gradient and state keys must agree")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        new[k] = p - alpha * mhat / (np.sqrt(vhat) + state.eps)
    return new


def stopping_error(loss_prev: float, loss_curr: float) -> float:
    """Relative loss change; |loss_curr| when the previous loss is zero."""
    if loss_prev == 0.0:
        return abs(loss_curr)
    return abs(loss_curr - loss_prev) / abs(loss_prev)


# -- snapshots -------------------------------------------------------------------


@dataclass
class Snapshot:
    """Per-step record of the run: particles plus diagnostics."""

    step: int
    t: float
    positions: np.ndarray
    logdets: np.ndarray
    densities: np.ndarray
    energy: float
    loss_history: list = field(default_factory=list)
    checkpoint: Optional[str] = None

    def ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.step, self.positions, self.logdets, self.densities)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_snapshot(snap: Snapshot, path) -> None:
    ens = snap.ensemble()  # validates non-empty, positive densities
    d = ens.d
    cols = ",".join(f"x{i}" for i in range(d))
    lines = [f"step,t,id,{cols},logdet,density"]
    for j in range(ens.n):
        xs = ",".join(_fmt(v) for v in snap.positions[j])
        lines.append(
            f"{snap.step},{_fmt(snap.t)},{j},{xs},{_fmt(snap.logdets[j])},{_fmt(snap.densities[j])}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path) -> Snapshot:
    """Read one snapshot CSV back, pulling diagnostics from the run manifest."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if len(header) < 6 or header[:3] != ["step", "t", "id"] or header[-2:] != ["logdet", "density"]:
        raise ValueError(f"malformed snapshot header in {path.name}")
    d = len(header) - 5
    if [h for h in header[3 : 3 + d]] != [f"x{i}" for i in range(d)]:
        raise ValueError(f"malformed coordinate columns in {path.name}")
    if not rows:
        raise ValueError(f"snapshot {path.name} is empty")
    data = np.array([[float(v) for v in r] for r in rows])
    step = int(data[0, 0])
    t = float(data[0, 1])
    positions = data[:, 3 : 3 + d]
    logdets = data[:, 3 + d]
    densities = data[:, 4 + d]

    energy = math.nan
    losses: list = []
    checkpoint = None
    mpath = path.parent / "manifest.json"
    if mpath.exists():
        manifest = read_manifest(path.parent)
        energy = manifest["energies"][step]
        if step >= 1:
            losses = manifest["loss_curves"][step - 1]
            checkpoint = manifest["checkpoints"][step - 1]
    return Snapshot(step, t, positions, logdets, densities, energy, losses, checkpoint)


def write_manifest(run_dir, manifest: dict) -> None:
    with open(Path(run_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_manifest(run_dir) -> dict:
    with open(Path(run_dir) / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')!r}")
    return manifest


# -- the driver ------------------------------------------------------------------


class JKORunner:
    """Owns one run: RNG streams, checkpoints, the current ensemble."""

    def __init__(
        self,
        config: JKOConfig,
        out_dir=None,
        preset: Optional[PresetDefinition] = None,
        initial_net: Optional[ResNetPotential] = None,
    ):
        self.config = config
        self.preset = preset if preset is not None else get_preset(config.preset)
        self.schedule = InnerSchedule(config.n_tau, config.integrator)
        ss = np.random.SeedSequence(config.seed)
        init_ss, self._sample_ss = ss.spawn(2)
        self._init_rng = np.random.default_rng(init_ss)
        self.checkpoints: list = []
        self._cached: Optional[ParticleEnsemble] = None
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._initial_net = initial_net
        self.snapshots: list = []
        self._energy_slack: list = []

    # each fresh draw consumes the next spawned child stream, so draws are
    # reproducible independent of how many occurred before
    def _fresh_draw(self) -> ParticleEnsemble:
        child = self._sample_ss.spawn(1)[0]
        X, dens = problems.sample(self.preset.initial, self.config.batch_size, np.random.default_rng(child))
        return ParticleEnsemble(0, X, np.zeros(len(X)), dens)

    def resample(self, step: int, iteration: int) -> ParticleEnsemble:
        """Training batch for outer step ``step`` (an ensemble at step-1).

        With mid-step resampling disabled the cached advanced ensemble is
        returned; it equals a replay of the original draw bit for bit.
        """
        if self.config.resample_every is None and self._cached is not None:
            return self._cached
        return replay(self.checkpoints, self._fresh_draw(), self.schedule)

    def _make_net(self) -> ResNetPotential:
        cfg = self.config
        return init_params(self.preset.d, cfg.network_width, cfg.network_layers, self._init_rng, cfg.init_mode)

    def _snapshot(self, ens: ParticleEnsemble, losses: list, checkpoint: Optional[str]) -> Snapshot:
        terms = diagnostic_energy_terms(self.preset.functional, ens)
        slack = 3.0 * float(terms.std(ddof=1)) / math.sqrt(ens.n) if ens.n > 1 else 0.0
        self._energy_slack.append(slack)
        return Snapshot(
            step=ens.step,
            t=ens.step * self.config.dt,
            positions=ens.positions,
            logdets=ens.logdets,
            densities=ens.densities,
            energy=float(terms.mean()),
            loss_history=losses,
            checkpoint=checkpoint,
        )

    def _optimize(self, net: ResNetPotential, step: int, alpha: float):
        cfg = self.config
        batch = self.resample(step, 0)
        adam = adam_init(net.params())
        losses: list = []
        best_loss, best_params = math.inf, None
        prev = None
        for c in range(cfg.max_iterations):
            if c > 0 and cfg.resample_every is not None and c % cfg.resample_every == 0:
                batch = self.resample(step, c)
                prev, best_loss, best_params = None, math.inf, None
            tl = batch_loss(net, self.preset.functional, batch, self.schedule, cfg.dt)
            losses.append(tl.value)
            if tl.value < best_loss:
                best_loss, best_params = tl.value, net.params()
            if prev is not None and stopping_error(prev, tl.value) < cfg.tolerance:
                break
            prev = tl.value
            net = net.replace_params(adam_step(adam, net.params(), tl.backward(), alpha))
        if best_params is not None:
            net = net.replace_params(best_params)
        return net, losses, batch

    def _attempt(self, net: ResNetPotential, step: int, alpha: float):
        trained, losses, batch = self._optimize(net, step, alpha)
        advanced = integrate(trained, self.schedule, batch)
        return trained, losses, advanced

    def _train_step(self, net: ResNetPotential, step: int):
        """One guarded outer step: train, then advance the ensemble.

        A non-finite loss, a mobility-range failure or a log-determinant
        overflow restarts the step once from its incoming parameters with
        the learning rate halved; a second failure aborts the run.
        """
        alpha = self.config.learning_rate
        # overflow warnings are expected on the failure path; the tape's
        # finiteness checks turn them into exceptions the guard handles
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                return self._attempt(net, step, alpha)
            except (ArithmeticError, MobilityDomainError) as first:
                try:
                    return self._attempt(net, step, alpha * 0.5)
                except (ArithmeticError, MobilityDomainError) as second:
                    raise RunDivergedError(
                        f"outer step {step} diverged at learning rates {alpha:g} and {alpha * 0.5:g}: {second}"
                    ) from first

    def run(self) -> list:
        cfg = self.config
        if self.out_dir is not None:
            os.makedirs(self.out_dir, exist_ok=True)

        net = self._initial_net if self._initial_net is not None else self._make_net()
        ens0 = self._fresh_draw()
        self._cached = ens0
        self.snapshots = [self._snapshot(ens0, [], None)]
        if self.out_dir is not None:
            write_snapshot(self.snapshots[0], self.out_dir / "initial.csv")

        for n in range(1, cfg.outer_steps + 1):
            if cfg.reinit_each_step and n > 1:
                net = self._make_net()
            net, losses, advanced = self._train_step(net, n)
            self.checkpoints.append(net)
            self._cached = advanced

            cp_name = None
            if self.out_dir is not None:
                cp_name = f"checkpoint_{n:03d}.json"
                save_checkpoint(net, self.out_dir / cp_name)
            snap = self._snapshot(advanced, losses, cp_name)
            self.snapshots.append(snap)
            if self.out_dir is not None:
                write_snapshot(snap, self.out_dir / f"snapshot_{n:03d}.csv")

        if self.out_dir is not None:
            write_manifest(self.out_dir, self.manifest())
        return self.snapshots

    def manifest(self) -> dict:
        cfg = self.config
        times = [s.t for s in self.snapshots]
        doc = {
            "format_version": MANIFEST_VERSION,
            "preset": self.preset.name,
            "d": self.preset.d,
            "config": cfg.to_dict(),
            "times": times,
            "energies": [s.energy for s in self.snapshots],
            "energy_mc_slack": list(self._energy_slack),
            "loss_curves": [s.loss_history for s in self.snapshots[1:]],
            "snapshots": ["initial.csv"] + [f"snapshot_{n:03d}.csv" for n in range(1, len(self.snapshots))],
            "checkpoints": [s.checkpoint or f"checkpoint_{n:03d}.json" for n, s in enumerate(self.snapshots[1:], start=1)],
        }
        if self.preset.extras is not None:
            doc["extras"] = self.preset.extras(times)
        return doc


def run(config: JKOConfig, out_dir=None, preset: Optional[PresetDefinition] = None, initial_net=None) -> list:
    """Execute a configured run; returns the list of snapshots."""
    return JKORunner(config, out_dir=out_dir, preset=preset, initial_net=initial_net).run()


def load_run_checkpoints(run_dir) -> list:
    """Trained potentials of a persisted run, in step order."""
    manifest = read_manifest(run_dir)
    return [load_checkpoint(Path(run_dir) / name) for name in manifest["checkpoints"]]
