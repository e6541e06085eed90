"""Command-line entry point: run presets, verify oracles, export data.

Verbs:
    run     <config.json> [--out DIR] [--seed N] [--set key=value ...]
    verify  <suite> [--d D] [--ntau N] [--seed N]
    export  <run-dir> <what> [--out DIR]
    info

Every failure exits nonzero after a single diagnostic line of the form
``jkoflow: error: <message>`` on stderr.  Identical config and seed
produce byte-identical run output.  The JKOFLOW_OUT environment variable
overrides the default base directory for run output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, flow, jko, potential, problems
from .presets import get_preset, preset_names

ERROR_PREFIX = "jkoflow: error:"


def _fail(message: str) -> int:
    sys.stderr.write(f"{ERROR_PREFIX} {message}\n")
    return 1


def _set_threads(n: int | None) -> None:
    # Best-effort BLAS thread cap; harmless when unavailable.
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except Exception:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# -- run -------------------------------------------------------------------------


def _parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ValueError(f"override {item!r} must have the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if key not in jko.JKOConfig.__dataclass_fields__:
        raise ValueError(f"override names unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def cmd_run(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    for item in args.set or []:
        key, value = _parse_override(item)
        doc[key] = value
    config = jko.JKOConfig.from_dict(doc)

    if args.out is not None:
        out_dir = Path(args.out)
    else:
        base = Path(os.environ.get("JKOFLOW_OUT", "runs"))
        out_dir = base / Path(args.config).stem

    snaps = jko.run(config, out_dir=out_dir)
    for s in snaps:
        print(f"step {s.step:3d}  t={s.t:.6g}  energy={s.energy:.10g}")
    print(f"wrote {len(snaps) - 1} snapshots + manifest to {out_dir}")
    return 0


# -- verify ----------------------------------------------------------------------


def _report(name: str, err: float, tol: float) -> bool:
    ok = err < tol
    print(f"{'PASS' if ok else 'FAIL'}  {name}: error {err:.3e} vs tolerance {tol:.1e}")
    return ok


def _verify_grad(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    worst_g = worst_h = worst_s = 0.0
    for L, d, m in [(2, 1, 8), (2, 2, 8), (3, 2, 8), (3, 10, 8)]:
        net = potential.init_params(d, m, L, rng, "unit-normal")
        x = rng.standard_normal(d)
        tau = rng.random()
        g = potential.input_gradient(net, tau, x)
        H = potential.input_hessian(net, tau, x)
        fd_g = np.zeros(d + 1)
        h = 1e-6
        for i in range(d + 1):
            def f(delta, i=i):
                if i < d:
                    xp = x.copy()
                    xp[i] += delta
                    return potential.forward(net, tau, xp)
                return potential.forward(net, tau + delta, x)

            fd_g[i] = (f(h) - f(-h)) / (2 * h)
        worst_g = max(worst_g, float(np.max(np.abs(g - fd_g) / np.maximum(1.0, np.abs(g)))))
        fd_h = np.zeros((d + 1, d + 1))
        for i in range(d + 1):
            if i < d:
                xp = x.copy()
                xp[i] += h
                xm = x.copy()
                xm[i] -= h
                gp = potential.input_gradient(net, tau, xp)
                gm = potential.input_gradient(net, tau, xm)
            else:
                gp = potential.input_gradient(net, tau + h, x)
                gm = potential.input_gradient(net, tau - h, x)
            fd_h[:, i] = (gp - gm) / (2 * h)
        worst_h = max(worst_h, float(np.max(np.abs(H - fd_h) / np.maximum(1.0, np.abs(H)))))
        worst_s = max(worst_s, float(np.max(np.abs(H - H.T))))
    ok = _report("input gradient vs finite differences", worst_g, 1e-6)
    ok &= _report("input Hessian vs finite differences", worst_h, 1e-5)
    ok &= _report("Hessian symmetry", worst_s, 1e-12)
    return ok


def _verify_jacobi(seed: int, d: int, ntau: int) -> bool:
    rng = np.random.default_rng(seed)
    net = potential.init_params(d, 16, 3, rng, "scaled-normal")
    sched = flow.InnerSchedule(ntau, "rk4")
    worst = 0.0
    for _ in range(5):
        x = rng.standard_normal(d) * 0.5
        ens = flow.ParticleEnsemble(0, x[None, :], np.zeros(1), np.ones(1))
        l = flow.integrate(net, sched, ens).logdets[0]
        J = problems.fd_flowmap_jacobian(net, sched, x, h=1e-5)
        worst = max(worst, abs(l - math.log(abs(np.linalg.det(J)))))
    return _report(f"change-of-variables identity (d={d}, n_tau={ntau})", worst, 1e-3)


def _verify_barenblatt(seed: int) -> bool:
    from scipy.integrate import quad

    p = problems.BarenblattParams(d=2, m=2.0)
    worst = 0.0
    for t in (0.0, 0.005, 0.01):
        R = problems.barenblatt_support_radius(p, t)
        mass, _ = quad(
            lambda r, t=t: 2.0 * math.pi * r * problems.barenblatt_density(p, t, np.array([[r, 0.0]]))[0],
            0.0,
            R,
            limit=200,
        )
        worst = max(worst, abs(mass - 1.0))
    ok = _report("self-similar profile mass conservation", worst, 1e-6)
    # support radius against bisection on the density's zero crossing
    lo, hi = 0.0, 2.0 * problems.barenblatt_support_radius(p, 0.0)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if problems.barenblatt_density(p, 0.0, np.array([[mid, 0.0]]))[0] > 0.0:
            lo = mid
        else:
            hi = mid
    err = abs(0.5 * (lo + hi) - problems.barenblatt_support_radius(p, 0.0))
    ok &= _report("support radius vs bisection", err, 1e-10)
    return ok


def _verify_forward_map(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        u = np.array([rng.uniform(-3, 1), rng.uniform(80, 120)])
        exact = problems.forward_map(u)
        approx = problems.forward_map_fd_oracle(u, n=1000)
        worst = max(worst, float(np.max(np.abs(exact - approx))))
    return _report("elliptic forward map vs finite-difference solve", worst, 1e-5)


_SUITES = {
    "grad": lambda args: _verify_grad(args.seed),
    "jacobi": lambda args: _verify_jacobi(args.seed, args.d, args.ntau),
    "barenblatt": lambda args: _verify_barenblatt(args.seed),
    "forward-map": lambda args: _verify_forward_map(args.seed),
}


def cmd_verify(args) -> int:
    names = list(_SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        ok &= _SUITES[name](args)
    return 0 if ok else 1


# -- export ----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = jko.read_manifest(run_dir)
    out_dir = Path(args.out) if args.out else run_dir
    os.makedirs(out_dir, exist_ok=True)
    what = list(("energy", "loss", "trajectories")) if args.what == "all" else [args.what]
    written = []

    if "energy" in what:
        lines = ["step,t,energy"]
        for n in range(1, len(manifest["times"])):
            lines.append(f"{n},{_fmt(manifest['times'][n])},{_fmt(manifest['energies'][n])}")
        (out_dir / "energy.csv").write_text("\n".join(lines) + "\n")
        written.append("energy.csv")

    if "loss" in what:
        lines = ["step,iteration,loss"]
        for n, curve in enumerate(manifest["loss_curves"], start=1):
            for i, v in enumerate(curve):
                lines.append(f"{n},{i},{_fmt(v)}")
        (out_dir / "loss.csv").write_text("\n".join(lines) + "\n")
        written.append("loss.csv")

    if "trajectories" in what:
        d = manifest["d"]
        cols = ",".join(f"x{i}" for i in range(d))
        lines = [f"id,step,t,{cols},logdet,density"]
        for name in manifest["snapshots"]:
            snap = jko.read_snapshot(run_dir / name)
            for j in range(snap.positions.shape[0]):
                xs = ",".join(_fmt(v) for v in snap.positions[j])
                lines.append(
                    f"{j},{snap.step},{_fmt(snap.t)},{xs},{_fmt(snap.logdets[j])},{_fmt(snap.densities[j])}"
                )
        (out_dir / "trajectories.csv").write_text("\n".join(lines) + "\n")
        written.append("trajectories.csv")

    print(f"exported {', '.join(written)} to {out_dir}")
    return 0


# -- info ------------------------------------------------------------------------


def cmd_info(args) -> int:
    print(f"jkoflow {__version__}")
    print("\npresets:")
    for name in preset_names():
        p = get_preset(name)
        print(f"  {name} (d={p.d}, metric={p.functional.metric})")
    print("\nconfig keys:")
    for name, f in jko.JKOConfig.__dataclass_fields__.items():
        print(f"  {name}")
    print("\nenvironment: JKOFLOW_OUT overrides the default output base directory")
    print("flags: --config/--out/--seed/--set key=value (repeatable)/--threads")
    return 0


# -- entry -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jkoflow", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread cap (best effort)")
    sub = ap.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute a configured run")
    p_run.add_argument("config", nargs="?", default=None, help="config JSON path")
    p_run.add_argument("--config", dest="config_flag", default=None, help="config JSON path")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p_run.set_defaults(func=cmd_run)

    p_ver = sub.add_parser("verify", help="run an oracle verification suite")
    p_ver.add_argument("suite", choices=sorted(_SUITES) + ["all"])
    p_ver.add_argument("--d", type=int, default=2)
    p_ver.add_argument("--ntau", type=int, default=64)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.set_defaults(func=cmd_verify)

    p_exp = sub.add_parser("export", help="export tidy CSVs from a run directory")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("what", choices=["energy", "loss", "trajectories", "all"])
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(func=cmd_export)

    p_info = sub.add_parser("info", help="show presets, config schema and flags")
    p_info.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _set_threads(args.threads)
    if args.verb == "run":
        args.config = args.config_flag or args.config
        if args.config is None:
            return _fail("run requires a config path (positional or --config)")
    try:
        return args.func(args)
    except Exception as exc:  # uniform single-line diagnostics for scripting
        return _fail(str(exc) or type(exc).__name__)


if __name__ == "__main__":
    sys.exit(main())
