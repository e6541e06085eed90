"""Distributions and oracles: samplers, self-similar profile, forward map."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2

from jkoflow import problems
from jkoflow.flow import InnerSchedule
from jkoflow import potential as pot


class TestSamplers:
    def test_single_gaussian_clt_bound(self):
        dist = problems.GaussianMixture([[1.0, -2.0]], sigma=0.5)
        n = 20_000
        pts, dens = problems.sample(dist, n, 0)
        err = np.linalg.norm(pts.mean(axis=0) - [1.0, -2.0])
        assert err < 3.0 * 0.5 / math.sqrt(n) * 2  # two coordinates

    def test_truncated_parabola_support_and_density(self):
        dist = problems.TruncatedParabola()
        pts, dens = problems.sample(dist, 5000, 1)
        r2 = (pts**2).sum(axis=1)
        assert np.all(r2 < 1.0)
        assert np.allclose(dens, 0.75 * (1.0 - r2), atol=0)

    def test_product_normal_uniform_bounds(self):
        dist = problems.ProductNormalUniform(90.0, 110.0)
        pts, dens = problems.sample(dist, 4000, 2)
        assert np.all((pts[:, 1] >= 90.0) & (pts[:, 1] <= 110.0))
        assert np.all(dens > 0)

    def test_uniform_box(self):
        dist = problems.UniformBox([0.0, 1.0], [2.0, 3.0])
        pts, dens = problems.sample(dist, 1000, 3)
        assert np.all((pts >= [0.0, 1.0]) & (pts <= [2.0, 3.0]))
        assert np.allclose(dens, 0.25, atol=0)

    def test_determinism(self):
        dist = problems.GaussianMixture([[0.0, 0.0]], sigma=1.0)
        a, _ = problems.sample(dist, 100, 7)
        b, _ = problems.sample(dist, 100, 7)
        assert np.array_equal(a, b)

    def test_mixture_weights_validation(self):
        with pytest.raises(ValueError):
            problems.GaussianMixture([[0.0]], sigma=1.0, weights=[0.5])

    def test_barenblatt_profile_support(self):
        p = problems.BarenblattParams(d=2, m=2.0)
        dist = problems.BarenblattProfile(p)
        pts, dens = problems.sample(dist, 2000, 5)
        R0 = problems.barenblatt_support_radius(p, 0.0)
        assert np.all((pts**2).sum(axis=1) < R0**2)
        assert np.allclose(dens, problems.barenblatt_density(p, 0.0, pts), atol=0)

    @pytest.mark.parametrize(
        "dist",
        [
            problems.GaussianMixture([[1.2, 0.0], [-1.2, 0.0]], sigma=0.5),
            problems.TruncatedParabola(),
            problems.ProductNormalUniform(90.0, 110.0),
        ],
        ids=["mixture", "parabola", "product"],
    )
    def test_chi_squared_goodness_of_fit(self, dist):
        # bin a large sample by density-weighted cells: compare observed
        # counts on a grid against closed-form cell probabilities
        n = 100_000
        pts, _ = problems.sample(dist, n, 11)
        lo = pts.min(axis=0) - 1e-9
        hi = pts.max(axis=0) + 1e-9
        bins = 8
        H, ex, ey = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
        # cell probabilities by midpoint quadrature on a fine subgrid;
        # normalized over the box because a profile need not carry unit
        # mass (the sampler draws the normalized shape)
        sub = 20
        probs = np.zeros((bins, bins))
        for i in range(bins):
            for j in range(bins):
                xs = np.linspace(ex[i], ex[i + 1], sub + 1)[:-1] + (ex[i + 1] - ex[i]) / (2 * sub)
                ys = np.linspace(ey[j], ey[j + 1], sub + 1)[:-1] + (ey[j + 1] - ey[j]) / (2 * sub)
                XX, YY = np.meshgrid(xs, ys, indexing="ij")
                vals = dist.density(np.column_stack([XX.ravel(), YY.ravel()]))
                probs[i, j] = vals.mean() * (ex[i + 1] - ex[i]) * (ey[j + 1] - ey[j])
        probs /= probs.sum()
        mask = probs * n >= 10
        obs = H[mask]
        exp = probs[mask] * n
        stat = float(((obs - exp) ** 2 / exp).sum())
        dof = int(mask.sum() - 1)
        pval = float(chi2.sf(stat, dof))
        assert pval > 1e-3


class TestBarenblatt:
    def test_exponents_d2_m2(self):
        p = problems.BarenblattParams(d=2, m=2.0)
        assert p.alpha == pytest.approx(0.5, abs=0)
        assert p.beta == pytest.approx(1.0 / 16.0, abs=0)

    def test_normalization_analytic_d2_m2(self):
        # for d=2, m=2 the mass integral gives C = sqrt(1/(8 pi))
        p = problems.BarenblattParams(d=2, m=2.0)
        assert p.C == pytest.approx(math.sqrt(1.0 / (8.0 * math.pi)), rel=1e-10)

    def test_zero_outside_support(self):
        p = problems.BarenblattParams(d=2, m=2.0)
        R = problems.barenblatt_support_radius(p, 0.3)
        vals = problems.barenblatt_density(p, 0.3, np.array([[1.01 * R, 0.0], [0.0, 2.0 * R]]))
        assert np.array_equal(vals, [0.0, 0.0])

    @pytest.mark.parametrize("t", [0.0, 0.005, 0.01])
    def test_mass_conserved(self, t):
        p = problems.BarenblattParams(d=2, m=2.0)
        R = problems.barenblatt_support_radius(p, t)
        mass, _ = quad(
            lambda r: 2 * math.pi * r * problems.barenblatt_density(p, t, np.array([[r, 0.0]]))[0],
            0.0,
            R,
            limit=200,
        )
        assert abs(mass - 1.0) < 1e-6

    def test_quadrature_normalization_other_m(self):
        p = problems.BarenblattParams(d=3, m=3.0)
        R = problems.barenblatt_support_radius(p, 0.0)
        mass, _ = quad(
            lambda r: 4 * math.pi * r**2 * problems.barenblatt_density(p, 0.0, np.array([[r, 0.0, 0.0]]))[0],
            0.0,
            R,
            limit=200,
        )
        assert abs(mass - 1.0) < 1e-8

    def test_support_radius_monotone_and_bisection(self):
        p = problems.BarenblattParams(d=2, m=2.0)
        ts = np.linspace(0, 0.02, 9)
        Rs = [problems.barenblatt_support_radius(p, t) for t in ts]
        assert all(b > a for a, b in zip(Rs, Rs[1:]))
        lo, hi = 0.0, 2.0 * Rs[0]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if problems.barenblatt_density(p, 0.0, np.array([[mid, 0.0]]))[0] > 0:
                lo = mid
            else:
                hi = mid
        assert abs(0.5 * (lo + hi) - Rs[0]) < 1e-10

    def test_rejects_bad_exponent(self):
        with pytest.raises(ValueError):
            problems.BarenblattParams(d=2, m=1.0)


class TestForwardMap:
    def test_value_at_origin(self):
        out = problems.forward_map([0.0, 0.0])
        assert np.allclose(out, [0.09375, 0.09375], atol=0)

    def test_large_u1_limit(self):
        out = problems.forward_map([40.0, 3.0])
        assert np.allclose(out, [0.75, 2.25], atol=1e-12)

    def test_affine_in_u2(self):
        base = problems.forward_map([0.7, 100.0])
        shifted = problems.forward_map([0.7, 100.0 + 2.0])
        assert np.allclose(shifted - base, [0.5, 1.5], atol=1e-12)

    def test_fd_boundary_value_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            u = np.array([rng.uniform(-3, 1), rng.uniform(80, 120)])
            exact = problems.forward_map(u)
            fd = problems.forward_map_fd_oracle(u, n=1000)
            assert np.max(np.abs(exact - fd)) < 1e-5

    def test_batch_matches_single(self):
        U = np.array([[0.3, 95.0], [-1.0, 105.0]])
        setup = problems.BayesSetup()
        vals = problems.phi_potential_batch(setup, U)
        for j in range(2):
            assert vals[j] == pytest.approx(problems.phi_potential(setup, U[j]), rel=1e-14)


class TestPhiPotential:
    def test_at_zero_only_misfit(self):
        setup = problems.BayesSetup()
        r = problems.forward_map([0.0, 0.0]) - setup.y
        assert problems.phi_potential(setup, [0.0, 0.0]) == pytest.approx(
            0.5 * float(r @ r) / setup.gamma, rel=1e-14
        )

    def test_nonnegative(self):
        setup = problems.BayesSetup()
        rng = np.random.default_rng(1)
        U = np.column_stack([rng.uniform(-5, 5, 200), rng.uniform(50, 150, 200)])
        assert np.all(problems.phi_potential_batch(setup, U) >= 0.0)

    def test_grid_argmin_location(self):
        setup = problems.BayesSetup()
        argmin = problems.phi_grid_argmin(setup)
        # solving G(u) = y exactly gives u2 = 104.4, u1 = -ln(1.4/0.09375)
        assert np.linalg.norm(argmin - [-2.704, 104.4]) < 0.15

    def test_taped_phi_matches_numpy(self):
        from jkoflow import tape as tp

        setup = problems.BayesSetup()
        U = np.array([[0.2, 98.0], [-2.0, 107.0]])

        def f(t, p):
            return t.sum(problems.phi_potential_batch(setup, p["U"]))

        value, tape = tp.record_scalar(f, {"U": U})
        assert value == pytest.approx(float(problems.phi_potential_batch(setup, U).sum()), rel=1e-14)
        grads = tape.backward()
        h = 1e-6
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            Up = U.copy()
            Up[idx] += h
            Um = U.copy()
            Um[idx] -= h
            fd = (problems.phi_potential_batch(setup, Up).sum() - problems.phi_potential_batch(setup, Um).sum()) / (2 * h)
            assert abs(grads["U"][idx] - fd) / max(1.0, abs(fd)) < 1e-6


class TestFlowmapJacobian:
    def test_zero_net_identity(self):
        J = problems.fd_flowmap_jacobian(pot.zero_potential(2), InnerSchedule(4), np.zeros(2))
        assert np.allclose(J, np.eye(2), atol=1e-12)

    def test_affine_velocity_field(self):
        class Linear:
            def __init__(self, A):
                self.A = A

            def velocity_divergence(self, tau, X):
                return X @ self.A.T, np.full(X.shape[0], np.trace(self.A))

        import scipy.linalg as sla

        A = np.array([[0.2, 0.1], [-0.3, 0.4]])
        J = problems.fd_flowmap_jacobian(Linear(A), InnerSchedule(64), np.array([0.3, 0.7]), h=1e-5)
        assert np.allclose(J, sla.expm(A), atol=1e-7)

    def test_det_matches_integrated_logdet(self):
        from jkoflow.flow import ParticleEnsemble, integrate

        rng = np.random.default_rng(4)
        net = pot.init_params(2, 8, 3, rng, "scaled-normal")
        sched = InnerSchedule(32)
        x = rng.standard_normal(2) * 0.5
        J = problems.fd_flowmap_jacobian(net, sched, x, h=1e-5)
        out = integrate(net, sched, ParticleEnsemble(0, x[None], np.zeros(1), np.ones(1)))
        assert abs(math.exp(out.logdets[0]) - abs(np.linalg.det(J))) < 1e-3

    def test_bad_h(self):
        with pytest.raises(ValueError):
            problems.fd_flowmap_jacobian(pot.zero_potential(2), InnerSchedule(1), np.zeros(2), h=0.0)
