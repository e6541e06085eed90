"""Figure generation from solver run exports.

Reads only the run directory's external files (``manifest.json``,
``energy.csv``, ``trajectories.csv``) and renders the standard figure
kinds: density-colored particle scatters per time, 3-d trajectories,
energy-decay curves, support-ring overlays, potential-contour overlays and
side profiles of density versus one coordinate.

No physics happens here: ring radii, contour grids and reference points
are read from the manifest, where the solver embedded them.  Inputs are
never modified, and the output filename is a hash of the spec, so a
rendered figure is reproducible and cache-friendly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = (
    "scatter-density",
    "trajectories-3d",
    "energy-curve",
    "support-ring-overlay",
    "contour-overlay",
    "side-profile",
)


class ExportError(ValueError):
    """Missing or malformed export inputs."""


@dataclass(frozen=True)
class FigureSpec:
    """What to draw and from which run directory."""

    kind: str
    run_dir: str
    steps: tuple = ()  # empty: evenly spaced selection
    max_particles: int = 2000
    cmap: str = "viridis"
    ring_color: str = "green"
    dpi: int = 130
    fmt: str = "png"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; known: {', '.join(KINDS)}")
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))

    def digest(self) -> str:
        doc = {k: getattr(self, k) for k in ("kind", "run_dir", "steps", "max_particles", "cmap", "ring_color", "dpi", "fmt")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RenderResult:
    path: Path
    meta: dict = field(default_factory=dict)


# -- input readers ------------------------------------------------------------


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise ExportError(f"no manifest.json in {run_dir}")
    with open(path) as fh:
        return json.load(fh)


def _read_energy(run_dir: Path) -> np.ndarray:
    path = run_dir / "energy.csv"
    if not path.exists():
        raise ExportError(f"no energy.csv in {run_dir} (run `jkoflow export <dir> energy` first)")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "t", "energy"]:
        raise ExportError("energy.csv does not match the export schema")
    if len(rows) == 1:
        raise ExportError("energy.csv is empty")
    return np.array([[float(v) for v in r] for r in rows[1:]])


def _read_trajectories(run_dir: Path) -> dict:
    path = run_dir / "trajectories.csv"
    if not path.exists():
        raise ExportError(f"no trajectories.csv in {run_dir} (run `jkoflow export <dir> trajectories` first)")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ExportError("trajectories.csv is empty")
    header = rows[0]
    if header[:3] != ["id", "step", "t"] or header[-2:] != ["logdet", "density"]:
        raise ExportError("trajectories.csv does not match the export schema")
    if len(rows) == 1:
        raise ExportError("trajectories.csv has no data rows")
    d = len(header) - 5
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {
        "d": d,
        "ids": data[:, 0].astype(int),
        "steps": data[:, 1].astype(int),
        "t": data[:, 2],
        "x": data[:, 3 : 3 + d],
        "density": data[:, 4 + d],
    }


def _select_steps(all_steps: np.ndarray, wanted: tuple, count: int = 5) -> list:
    uniq = sorted(set(int(s) for s in all_steps))
    if wanted:
        missing = [s for s in wanted if s not in uniq]
        if missing:
            raise ExportError(f"steps {missing} not present in the export")
        return list(wanted)
    if len(uniq) <= count:
        return uniq
    idx = np.linspace(0, len(uniq) - 1, count).round().astype(int)
    return [uniq[i] for i in idx]


# -- renderers ----------------------------------------------------------------


def _scatter_density(spec: FigureSpec, run_dir: Path, manifest: dict):
    tr = _read_trajectories(run_dir)
    steps = _select_steps(tr["steps"], spec.steps)
    fig, axes = plt.subplots(1, len(steps), figsize=(3.0 * len(steps), 3.2), squeeze=False)
    vmin, vmax = float(tr["density"].min()), float(tr["density"].max())
    for ax, s in zip(axes[0], steps):
        m = tr["steps"] == s
        x = tr["x"][m][: spec.max_particles]
        rho = tr["density"][m][: spec.max_particles]
        sc = ax.scatter(x[:, 0], x[:, 1] if tr["d"] > 1 else 0 * x[:, 0], c=rho, s=4, cmap=spec.cmap, vmin=vmin, vmax=vmax)
        ax.set_title(f"t = {tr['t'][m][0]:g}")
        ax.set_aspect("equal")
    fig.colorbar(sc, ax=axes[0], shrink=0.8, label="density")
    return fig, {"steps": steps}


def _trajectories_3d(spec: FigureSpec, run_dir: Path, manifest: dict):
    tr = _read_trajectories(run_dir)
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    ids = np.unique(tr["ids"])[: min(spec.max_particles, 200)]
    for i in ids:
        m = tr["ids"] == i
        order = np.argsort(tr["steps"][m])
        x = tr["x"][m][order]
        t = tr["t"][m][order]
        ax.plot(x[:, 0], x[:, 1] if tr["d"] > 1 else 0 * t, t, lw=0.5, alpha=0.5)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_zlabel("t")
    return fig, {"particles": len(ids)}


def _energy_curve(spec: FigureSpec, run_dir: Path, manifest: dict):
    table = _read_energy(run_dir)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(table[:, 1], table[:, 2], marker="o", ms=3)
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    ax.set_title("energy over outer steps")
    return fig, {"points": table.shape[0]}


def _support_ring_overlay(spec: FigureSpec, run_dir: Path, manifest: dict):
    radii = manifest.get("extras", {}).get("support_radius")
    if radii is None:
        raise ExportError("manifest carries no support_radius values (not a porous-medium run?)")
    tr = _read_trajectories(run_dir)
    steps = _select_steps(tr["steps"], spec.steps)
    fig, axes = plt.subplots(1, len(steps), figsize=(3.0 * len(steps), 3.2), squeeze=False)
    drawn = []
    for ax, s in zip(axes[0], steps):
        m = tr["steps"] == s
        x = tr["x"][m][: spec.max_particles]
        rho = tr["density"][m][: spec.max_particles]
        ax.scatter(x[:, 0], x[:, 1], c=rho, s=4, cmap=spec.cmap)
        R = float(radii[s])
        drawn.append(R)
        ax.add_patch(plt.Circle((0, 0), R, fill=False, color=spec.ring_color, lw=1.5))
        ax.set_title(f"t = {tr['t'][m][0]:g}")
        ax.set_aspect("equal")
        lim = 1.3 * max(R, float(np.abs(x).max()) if len(x) else R)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
    return fig, {"steps": steps, "ring_radius": drawn}


def _contour_overlay(spec: FigureSpec, run_dir: Path, manifest: dict):
    grid = manifest.get("extras", {}).get("phi_grid")
    if grid is None:
        raise ExportError("manifest carries no potential grid (not a Bayesian-flow run?)")
    tr = _read_trajectories(run_dir)
    last = int(tr["steps"].max())
    m = tr["steps"] == last
    fig, ax = plt.subplots(figsize=(5, 4.2))
    U1, U2 = np.meshgrid(np.asarray(grid["u1"]), np.asarray(grid["u2"]), indexing="ij")
    vals = np.asarray(grid["values"])
    cs = ax.contour(U1, U2, vals, levels=30, linewidths=0.6, cmap="coolwarm")
    ax.scatter(tr["x"][m][:, 0], tr["x"][m][:, 1], s=5, c="black", alpha=0.6)
    argmin = manifest.get("extras", {}).get("phi_argmin")
    if argmin is not None:
        ax.plot(argmin[0], argmin[1], marker="*", ms=12, color=spec.ring_color)
    ax.set_xlabel("u1")
    ax.set_ylabel("u2")
    ax.set_title(f"final particles at t = {tr['t'][m][0]:g}")
    return fig, {"final_step": last}


def _side_profile(spec: FigureSpec, run_dir: Path, manifest: dict):
    tr = _read_trajectories(run_dir)
    steps = _select_steps(tr["steps"], spec.steps, count=4)
    fig, axes = plt.subplots(1, len(steps), figsize=(3.0 * len(steps), 2.8), squeeze=False, sharey=True)
    for ax, s in zip(axes[0], steps):
        m = tr["steps"] == s
        ax.scatter(tr["x"][m][:, 0], tr["density"][m], s=3, alpha=0.6)
        ax.set_title(f"t = {tr['t'][m][0]:g}")
        ax.set_xlabel("x0")
    axes[0][0].set_ylabel("density")
    return fig, {"steps": steps}


_RENDERERS = {
    "scatter-density": _scatter_density,
    "trajectories-3d": _trajectories_3d,
    "energy-curve": _energy_curve,
    "support-ring-overlay": _support_ring_overlay,
    "contour-overlay": _contour_overlay,
    "side-profile": _side_profile,
}


def render(spec: FigureSpec, out_dir=None) -> RenderResult:
    """Render one figure; returns the written path and drawing metadata."""
    run_dir = Path(spec.run_dir)
    manifest = _read_manifest(run_dir)
    fig, meta = _RENDERERS[spec.kind](spec, run_dir, manifest)
    out_base = Path(out_dir) if out_dir is not None else run_dir / "figures"
    out_base.mkdir(parents=True, exist_ok=True)
    path = out_base / f"{spec.kind}-{spec.digest()}.{spec.fmt}"
    fig.savefig(path, dpi=spec.dpi, bbox_inches="tight")
    plt.close(fig)
    return RenderResult(path=path, meta=meta)
