"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line with the measured quantity.  The four
flow criteria execute the committed desk-scale preset configs end to end
(minutes each); the derivative/identity/reduction criteria run in seconds.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from jkoflow import energy as en
from jkoflow import jko
from jkoflow import potential as pot
from jkoflow import problems
from jkoflow.flow import InnerSchedule, ParticleEnsemble, integrate
from jkoflow.presets import get_preset

PRESETS = Path(__file__).resolve().parents[1] / "presets"

pytestmark = pytest.mark.acceptance


def report(name: str, ok: bool, detail: str) -> bool:
    print(f"\nACCEPT {'pass' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def desk_config(name: str, **overrides) -> jko.JKOConfig:
    doc = json.loads((PRESETS / name).read_text())
    doc.update(overrides)
    return jko.JKOConfig.from_dict(doc)


@pytest.fixture(scope="session")
def fp_runs(tmp_path_factory):
    """The Fokker-Planck desk run, executed twice for the determinism gate."""
    cfg = desk_config("fokker-planck-2d-desk.json")
    dirs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"fp_{tag}") / "run"
        jko.run(cfg, out_dir=out)
        dirs.append(out)
    return cfg, dirs


@pytest.fixture(scope="session")
def porous_run(tmp_path_factory):
    cfg = desk_config("porous-medium-2d-desk.json")
    out = tmp_path_factory.mktemp("porous") / "run"
    snaps = jko.run(cfg, out_dir=out)
    return cfg, out, snaps


@pytest.fixture(scope="session")
def kalman_run(tmp_path_factory):
    cfg = desk_config("kalman-wasserstein-2d-desk.json")
    out = tmp_path_factory.mktemp("kalman") / "run"
    snaps = jko.run(cfg, out_dir=out)
    return cfg, out, snaps


@pytest.fixture(scope="session")
def mobility_run(tmp_path_factory):
    cfg = desk_config("nonlocal-mobility-2d-desk.json")
    out = tmp_path_factory.mktemp("mobility") / "run"
    snaps = jko.run(cfg, out_dir=out)
    return cfg, out, snaps


class TestDerivativeFormulas:
    def test_gradients_hessians_and_parameter_gradients(self):
        rng = np.random.default_rng(2024)
        combos = [(L, d, m) for L in (2, 3) for d in (1, 2, 10) for m in (8, 64)]
        worst_g = worst_h = worst_s = 0.0
        pairs = 0
        while pairs < 200:
            L, d, m = combos[pairs % len(combos)]
            net = pot.init_params(d, m, L, rng, "scaled-normal")
            x = rng.standard_normal(d)
            tau = rng.random()
            g = pot.input_gradient(net, tau, x)
            h = 1e-6
            for i in range(d + 1):
                if i < d:
                    xp, xm = x.copy(), x.copy()
                    xp[i] += h
                    xm[i] -= h
                    fd = (pot.forward(net, tau, xp) - pot.forward(net, tau, xm)) / (2 * h)
                else:
                    fd = (pot.forward(net, tau + h, x) - pot.forward(net, tau - h, x)) / (2 * h)
                worst_g = max(worst_g, abs(g[i] - fd) / max(1.0, abs(g[i])))
            H = pot.input_hessian(net, tau, x)
            worst_s = max(worst_s, float(np.max(np.abs(H - H.T))))
            for i in range(d + 1):
                if i < d:
                    xp, xm = x.copy(), x.copy()
                    xp[i] += h
                    xm[i] -= h
                    col = (pot.input_gradient(net, tau, xp) - pot.input_gradient(net, tau, xm)) / (2 * h)
                else:
                    col = (pot.input_gradient(net, tau + h, x) - pot.input_gradient(net, tau - h, x)) / (2 * h)
                worst_h = max(worst_h, float(np.max(np.abs(H[:, i] - col) / np.maximum(1.0, np.abs(H[:, i])))))
            pairs += 1

        # parameter gradients of the batch loss on 20 random coordinates
        rng2 = np.random.default_rng(7)
        net = pot.init_params(2, 8, 3, rng2, "scaled-normal")
        X = rng2.standard_normal((10, 2))
        ens = ParticleEnsemble(0, X, np.zeros(10), 0.2 + rng2.random(10))
        fun = get_preset("fokker-planck-kl").functional
        sched = InnerSchedule(1, "euler")
        tl = en.batch_loss(net, fun, ens, sched, 0.025)
        grads = tl.backward()
        params = net.params()
        worst_p = 0.0
        hh = 1e-5
        names = list(params)
        for _ in range(20):
            name = names[rng2.integers(0, len(names))]
            idx = tuple(rng2.integers(0, s) for s in params[name].shape)
            mod = {k: v.copy() for k, v in params.items()}
            mod[name][idx] += hh
            fp = en.batch_loss(net.replace_params(mod), fun, ens, sched, 0.025).value
            mod[name][idx] -= 2 * hh
            fm = en.batch_loss(net.replace_params(mod), fun, ens, sched, 0.025).value
            fd = (fp - fm) / (2 * hh)
            worst_p = max(worst_p, abs(grads[name][idx] - fd) / max(1.0, abs(grads[name][idx])))

        ok = worst_g < 1e-6 and worst_h < 1e-5 and worst_s < 1e-12 and worst_p < 1e-5
        assert report(
            "derivative formulas (200 nets)",
            ok,
            f"grad {worst_g:.2e}<1e-6, hess {worst_h:.2e}<1e-5, sym {worst_s:.2e}<1e-12, theta {worst_p:.2e}<1e-5",
        )


class TestJacobiIdentity:
    def test_change_of_variables_and_refinement_order(self):
        rng = np.random.default_rng(99)
        net = pot.init_params(2, 16, 3, rng, "scaled-normal")
        x = rng.standard_normal(2) * 0.5

        def err_at(ntau):
            sched = InnerSchedule(ntau, "rk4")
            ens = ParticleEnsemble(0, x[None, :], np.zeros(1), np.ones(1))
            l = integrate(net, sched, ens).logdets[0]
            J = problems.fd_flowmap_jacobian(net, sched, x, h=1e-5)
            return abs(l - math.log(abs(np.linalg.det(J))))

        e64 = err_at(64)
        ntaus = np.array([8, 16, 32, 64], dtype=float)
        errs = np.array([err_at(int(n)) for n in ntaus])
        slope = -np.polyfit(np.log(ntaus), np.log(errs), 1)[0]
        ok = e64 < 1e-3 and 3.5 <= slope <= 4.5
        assert report(
            "change-of-variables identity",
            ok,
            f"|l - log det J| = {e64:.2e} < 1e-3 at n_tau=64; refinement order {slope:.2f} in [3.5, 4.5]",
        )


class TestMetricReductions:
    def test_mobility_and_kalman_reductions(self):
        sched = InnerSchedule(2, "euler")
        worst_mob = 0.0
        for trial in range(100):
            r = np.random.default_rng(trial)
            net = pot.init_params(2, 6, 2, r, "scaled-normal")
            X = r.standard_normal((8, 2))
            ens = ParticleEnsemble(0, X, np.zeros(8), 0.2 + r.random(8))
            lw = en.batch_loss(net, en.EnergyFunctional(internal=en.Entropy()), ens, sched, 0.01).value
            lm = en.batch_loss(
                net,
                en.EnergyFunctional(
                    internal=en.Entropy(), mobility=lambda rho: rho, metric=en.Metric.NONLINEAR_MOBILITY
                ),
                ens,
                sched,
                0.01,
            ).value
            worst_mob = max(worst_mob, abs(lm - lw))

        setup = problems.BayesSetup()
        phi = lambda U: problems.phi_potential_batch(setup, U)
        worst_kal = 0.0
        saved = en.covariance_mean
        en.covariance_mean = lambda e, cond_limit=1e12: en.KalmanState(np.eye(2), np.zeros(2), np.eye(2))
        try:
            for trial in range(100):
                r = np.random.default_rng(500 + trial)
                net = pot.init_params(2, 6, 2, r, "scaled-normal")
                X = np.column_stack([r.standard_normal(8), r.uniform(90, 110, 8)])
                ens = ParticleEnsemble(0, X, np.zeros(8), 0.2 + r.random(8))
                lw = en.batch_loss(
                    net, en.EnergyFunctional(internal=en.Entropy(), external=phi), ens, sched, 0.01
                ).value
                lk = en.batch_loss(
                    net,
                    en.EnergyFunctional(
                        internal=en.Entropy(), external=phi, metric=en.Metric.KALMAN_WASSERSTEIN
                    ),
                    ens,
                    sched,
                    0.01,
                ).value
                worst_kal = max(worst_kal, abs(lk - lw) / max(1.0, abs(lw)))
        finally:
            en.covariance_mean = saved

        ok = worst_mob < 1e-12 and worst_kal < 1e-12
        assert report(
            "metric reductions (100 ensembles each)",
            ok,
            f"mobility-vs-plain {worst_mob:.2e} < 1e-12; kalman-vs-plain {worst_kal:.2e} < 1e-12",
        )


class TestFokkerPlanckDesk:
    def test_energy_dissipation_and_target_approach(self, fp_runs):
        cfg, (run_a, _) = fp_runs
        manifest = jko.read_manifest(run_a)
        E = manifest["energies"]
        slack = manifest["energy_mc_slack"]
        assert len(E) == cfg.outer_steps + 1
        worst_rise = max(E[n + 1] - E[n] - max(slack[n], slack[n + 1]) for n in range(cfg.outer_steps))
        diss_ok = worst_rise <= 0.0

        centers = np.asarray(manifest["extras"]["target_centers"])
        dists = []
        for name in manifest["snapshots"]:
            snap = jko.read_snapshot(run_a / name)
            dmin = np.linalg.norm(snap.positions[:, None, :] - centers[None], axis=2).min(axis=1)
            dists.append(float(dmin.mean()))
        last10 = dists[cfg.outer_steps - 10 :]
        mono_ok = all(b < a for a, b in zip(last10, last10[1:]))

        ok = diss_ok and mono_ok
        assert report(
            "Fokker-Planck desk run",
            ok,
            f"energy non-increasing within slack (worst excess {worst_rise:.3e}); "
            f"mean target distance monotone over last 10 steps ({last10[0]:.3f} -> {last10[-1]:.3f})",
        )


class TestPorousMediumDesk:
    def test_support_ring_and_carried_density(self, porous_run):
        cfg, out, snaps = porous_run
        p = problems.BarenblattParams(d=2, m=2.0)
        worst_out = 0.0
        worst_rel = 0.0
        for s in snaps:
            R = problems.barenblatt_support_radius(p, s.t)
            r = np.linalg.norm(s.positions, axis=1)
            worst_out = max(worst_out, float(np.mean(r > 1.05 * R)))
            inner = r < 0.8 * R
            if inner.sum():
                ref = problems.barenblatt_density(p, s.t, s.positions[inner])
                worst_rel = max(worst_rel, float(np.max(np.abs(s.densities[inner] - ref) / ref)))
        ok = worst_out <= 0.05 and worst_rel <= 0.20
        assert report(
            "porous-medium desk run",
            ok,
            f"outside 1.05R fraction {worst_out * 100:.1f}% <= 5%; "
            f"carried density within {worst_rel * 100:.1f}% <= 20% inside 0.8R",
        )


class TestKalmanWassersteinDesk:
    def test_mean_convergence_and_entropy_decay(self, kalman_run):
        cfg, out, snaps = kalman_run
        manifest = jko.read_manifest(out)
        argmin = np.asarray(manifest["extras"]["phi_argmin"])
        final_mean = snaps[-1].positions.mean(axis=0)
        dist = float(np.linalg.norm(final_mean - argmin))

        E = manifest["energies"]
        slack = manifest["energy_mc_slack"]
        worst_rise = max(E[n + 1] - E[n] - max(slack[n], slack[n + 1]) for n in range(cfg.outer_steps))
        ok = dist <= 1.0 and worst_rise <= 0.0
        assert report(
            "Kalman-Wasserstein desk run",
            ok,
            f"final mean distance to grid argmin {dist:.3f} <= 1.0; "
            f"relative entropy non-increasing within slack (worst excess {worst_rise:.3e})",
        )


class TestNonlinearMobilityDesk:
    def test_density_cap_and_flattening(self, mobility_run):
        cfg, out, snaps = mobility_run
        max_rho = max(float(s.densities.max()) for s in snaps)
        iqrs = [float(np.subtract(*np.percentile(s.densities, [75, 25]))) for s in snaps]
        shrink_ok = iqrs[-1] < iqrs[len(iqrs) // 2] < iqrs[0]
        ok = max_rho <= 1.05 and shrink_ok
        assert report(
            "nonlinear-mobility desk run",
            ok,
            f"max carried density {max_rho:.3f} <= 1.05; "
            f"density IQR shrinks {iqrs[0]:.3f} -> {iqrs[len(iqrs) // 2]:.3f} -> {iqrs[-1]:.3f}",
        )


class TestDeterminism:
    def test_identical_seeds_byte_identical_outputs(self, fp_runs):
        _, (run_a, run_b) = fp_runs
        names_a = sorted(p.name for p in run_a.iterdir())
        names_b = sorted(p.name for p in run_b.iterdir())
        same = names_a == names_b and all(
            (run_a / n).read_bytes() == (run_b / n).read_bytes() for n in names_a
        )
        assert report(
            "determinism",
            same,
            f"{len(names_a)} files byte-identical across two seeded runs",
        )
