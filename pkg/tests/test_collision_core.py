import unittest

import numpy as np

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.collision_core import CoercivityError, CollisionOperator, KernelConfig, angular_cross_section, \
    apply_L, assemble_operator, compute_nu, estimate_coercivity, fit_nu_bounds, gamma_bilinear, gamma_gain, \
    gamma_loss, linearized_matrix, max_quadratic_form, null_space_identity_residual, null_space_spectrum, \
    reference_gain, sphere_rule, _streamed_gain
from PyVPBLab.velocity_space import build_grid
from tests.fixtures import COARSE, random_vector, small_operator, tiny_operator


class CollisionCoreTestSuite(unittest.TestCase):

    def brute_force_loss(self, op, f, g, i):
        grid, config = op.grid, op.config
        rule = sphere_rule(config.n_theta, config.n_phi)
        partners = np.delete(np.arange(grid.size), i)
        speed = np.linalg.norm(grid.nodes[i] - grid.nodes[partners], axis=1)
        angular = np.sum(config.c_q * np.abs(rule.cos_theta) * rule.weights)
        total = np.sum(grid.quad_weights[partners] * grid.sqrt_maxwellian[partners] * speed ** config.gamma
                       * f[partners])
        return float(g[i] * angular * total)

    def test_angular_integral(self):
        rule = sphere_rule(16, 4)
        self.assertAlmostEqual(rule.weights.sum() / (4.0 * np.pi), 1.0, places=12)
        total = angular_cross_section(KernelConfig(), rule).sum()
        self.assertLess(abs(total / (2.0 * np.pi) - 1.0), 1e-2)

    def test_collision_frequency_at_origin(self):
        grid = build_grid(6.0, 25)
        config = KernelConfig(gamma=-1.0, n_theta=16, n_phi=4)
        nu0 = compute_nu(grid, config, np.zeros((1, 3)))[0]
        angular = angular_cross_section(config, sphere_rule(16, 4)).sum()
        self.assertLess(abs(nu0 / (angular * np.sqrt(2.0 / np.pi)) - 1.0), 3e-2)
        self.assertLess(abs(nu0 / 5.0133 - 1.0), 4e-2)

    def test_collision_frequency_decays(self):
        op = small_operator()
        center = op.grid.size // 2
        self.assertTrue(np.all(op.nu > 0))
        self.assertGreater(op.nu[center], op.nu[0])
        low, high = fit_nu_bounds(op)
        self.assertTrue(0 < low <= high)

    def test_K_is_symmetric_in_quadrature_metric(self):
        op = small_operator()
        WK = op.grid.quad_weights[:, None] * op.K
        self.assertLess(np.linalg.norm(WK - WK.T) / np.linalg.norm(WK), 1e-12)
        for key in ("symmetrization_residual", "clipped_fraction", "null_space_leakage", "config_hash"):
            self.assertIn(key, op.metadata)

    def test_L_is_self_adjoint_and_conservative(self):
        op = small_operator()
        grid = op.grid
        u = random_vector(grid, 1)
        v = random_vector(grid, 2)
        Lu, Lv = apply_L(op, u), apply_L(op, v)
        scale = np.sqrt(grid.norm_sq(u) * grid.norm_sq(Lv))
        self.assertLess(abs(grid.inner(u, Lv) - grid.inner(Lu, v)), 1e-11 * scale)
        invariants = apply_L(op, grid.invariant_basis.T)
        self.assertLess(np.abs(invariants).max(), 1e-10 * np.abs(op.K).max())
        moments = (Lu * grid.quad_weights) @ grid.invariant_basis
        self.assertLess(np.abs(moments).max(), 1e-12 * np.abs(Lu).max())

    def test_dense_matrix_matches_apply(self):
        op = small_operator()
        u = random_vector(op.grid, 4)
        np.testing.assert_allclose(linearized_matrix(op) @ u, apply_L(op, u), atol=1e-11 * np.abs(u).max())

    def test_gain_matches_brute_force(self):
        op = tiny_operator()
        f = random_vector(op.grid, 5)
        g = random_vector(op.grid, 6)
        gain = gamma_gain(op, f, g)
        loss = gamma_loss(op, f, g)
        for i in (0, op.grid.size // 2, 97):
            self.assertAlmostEqual(gain[i], reference_gain(op, f, g, i), delta=1e-10 * np.abs(gain).max())
            self.assertAlmostEqual(loss[i], self.brute_force_loss(op, f, g, i), delta=1e-10 * np.abs(loss).max())

    def test_stored_and_streamed_gain_agree(self):
        op = tiny_operator()
        self.assertIsNotNone(op.gain_stencil)
        F = np.stack([random_vector(op.grid, 7), random_vector(op.grid, 8)])
        G = np.stack([random_vector(op.grid, 9), random_vector(op.grid, 10)])
        np.testing.assert_allclose(op.gain_stencil.apply(F, G), _streamed_gain(op, F, G),
                                   atol=1e-12 * np.abs(op.gain_stencil.apply(F, G)).max())

    def test_gamma_is_bilinear_and_orthogonal_to_invariants(self):
        op = tiny_operator()
        grid = op.grid
        f, g, h = (random_vector(grid, s) for s in (11, 12, 13))
        left = gamma_bilinear(op, 2.0 * f + g, h)
        right = 2.0 * gamma_bilinear(op, f, h) + gamma_bilinear(op, g, h)
        np.testing.assert_allclose(left, right, atol=1e-12 * np.abs(left).max())
        batch = gamma_bilinear(op, np.stack([f, g]), np.stack([g, h]))
        self.assertEqual(batch.shape, (2, grid.size))
        moments = (batch * grid.quad_weights) @ grid.invariant_basis
        self.assertLess(np.abs(moments).max(), 1e-12 * np.abs(batch).max())
        with self.assertRaises(ValueError):
            gamma_bilinear(op, f, np.stack([g, h]))

    def test_coercivity_of_pure_loss(self):
        op = small_operator()
        loss_only = CollisionOperator(grid=op.grid, config=op.config, nu=op.nu, K=np.zeros_like(op.K), metadata={})
        self.assertAlmostEqual(estimate_coercivity(loss_only), 1.0, places=8)
        reversed_sign = CollisionOperator(grid=op.grid, config=op.config, nu=op.nu, K=2.0 * np.diag(op.nu),
                                          metadata={})
        with self.assertRaises(CoercivityError) as context:
            estimate_coercivity(reversed_sign)
        self.assertAlmostEqual(context.exception.kappa0, -1.0, places=8)

    def test_null_space_spectrum(self):
        op = small_operator()
        raw = null_space_spectrum(op)
        self.assertEqual(len(raw["smallest"]), 6)
        self.assertEqual(raw["smallest"], sorted(raw["smallest"]))
        spectrum = null_space_spectrum(op, conservative=True)
        self.assertGreaterEqual(spectrum["gap_ratio"], 1e2)
        self.assertLess(max(spectrum["smallest"][:5]), 1e-10 * op.nu.max())
        self.assertGreater(spectrum["smallest"][5], 1e-2)

    def test_quadratic_form_is_nonpositive(self):
        op = small_operator()
        self.assertLessEqual(max_quadratic_form(op, 1000, seed=3), 1e-8)
        u = random_vector(op.grid, 14, complex_values=True)
        self.assertLess(np.real(op.grid.inner(u, apply_L(op, u))), 0.0)

    def test_K_reproduces_nu_on_the_maxwellian(self):
        coarse = null_space_identity_residual(tiny_operator())
        finer = null_space_identity_residual(small_operator())
        # raw identity only holds as the spacing shrinks, here from 1.8 to 1.25
        self.assertLess(finer, 0.25)
        self.assertLess(finer, coarse)
        op = small_operator()
        s = op.grid.sqrt_maxwellian
        self.assertLess(np.abs(apply_L(op, s)).max(), 1e-12 * np.abs(op.nu * s).max())

    def test_coercivity_of_assembled_operator(self):
        op = small_operator()
        kappa0 = estimate_coercivity(op)
        self.assertGreater(kappa0, 0.2)
        self.assertLess(kappa0, 1.0)
        grid = op.grid
        for seed in (15, 16, 17):
            u = random_vector(grid, seed)
            u = u - grid.project_invariants(u)
            dissipation = -grid.inner(u, apply_L(op, u))
            self.assertGreaterEqual(dissipation, kappa0 * grid.inner(u, op.nu * u) * (1.0 - 1e-10))

    def test_coercivity_across_gamma(self):
        grid = build_grid(4.5, 6)
        kappas = {}
        for gamma in (-0.5, -1.0, -2.0):
            config = KernelConfig(n_theta=4, n_phi=4, **dict(COARSE, gamma=gamma))
            kappas[gamma] = estimate_coercivity(assemble_operator(grid, config))
        for kappa0 in kappas.values():
            self.assertGreater(kappa0, 0.1)
        self.assertGreater(kappas[-0.5], kappas[-2.0])

    def test_kernel_config_constraints(self):
        with self.assertRaises(ConfigError):
            KernelConfig(gamma=-3.5)
        with self.assertRaises(ConfigError):
            KernelConfig(gamma=0.5, c_q=-1.0, n_theta=0)
        self.assertFalse(KernelConfig(gamma=-2.5).guaranteed)
        self.assertTrue(KernelConfig(gamma=-2.0).guaranteed)


if __name__ == '__main__':
    unittest.main()
