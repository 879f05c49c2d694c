import unittest
from types import SimpleNamespace

import numpy as np

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.macro_micro import fluid_residual
from PyVPBLab.modal_dynamics import make_modal_state, modal_rhs
from PyVPBLab.nonlinear_1d import MONOTONE_BAND, X_RISE_TOLERANCE, NonlinearConfig, NonlinearConstants, \
    calibrate_constants, check_energy_monotone, desk_ell, dissipation, energy_functional_nonlinear, energy_parts, \
    evolve_nonlinear, initial_state, linearization_gap, make_field_state, nonlinear_rhs, solve_poisson, \
    spatial_derivative, stable_time_step, track_X, x_grid
from tests.fixtures import random_vector, tiny_operator


class NonlinearTestSuite(unittest.TestCase):

    def build_config(self, **changes):
        values = dict(n_x=8, eps0=1e-3, T=0.2, n_stamps=4)
        values.update(changes)
        return NonlinearConfig(**values)

    def harmonic_state(self, grid, config, v, m=1):
        x = x_grid(config.n_x, config.length)
        phase = np.exp(2j * np.pi * m * x / config.length)
        return np.real(phase[:, None] * v[None, :])

    def test_spectral_derivative(self):
        length = 2.0 * np.pi
        x = x_grid(16, length)
        f = np.sin(3.0 * x)
        np.testing.assert_allclose(spatial_derivative(f, length), 3.0 * np.cos(3.0 * x), atol=1e-12)
        np.testing.assert_allclose(spatial_derivative(f, length, order=2), -9.0 * f, atol=1e-11)
        nyquist = np.cos(8.0 * x)
        np.testing.assert_allclose(spatial_derivative(nyquist, length), 0.0, atol=1e-12)
        stacked = np.stack([f, 2.0 * f], axis=1)
        np.testing.assert_allclose(spatial_derivative(stacked, length, axis=0)[:, 1], 6.0 * np.cos(3.0 * x),
                                   atol=1e-12)

    def test_poisson_eigenfunction(self):
        grid = tiny_operator().grid
        length = 4.0 * np.pi
        x = x_grid(8, length)
        source = np.cos(2.0 * np.pi * 2 * x / length)
        mass = np.dot(grid.quad_weights, grid.maxwellian_values)
        phi = solve_poisson(grid, source[:, None] * grid.sqrt_maxwellian / mass, length)
        np.testing.assert_allclose(phi, -source, atol=1e-12)

    def test_poisson_removes_mean(self):
        grid = tiny_operator().grid
        u = np.ones((8, 1)) * grid.sqrt_maxwellian
        with self.assertLogs("PyVPBLab.nonlinear_1d", level="WARNING"):
            phi = solve_poisson(grid, u, 4.0 * np.pi)
        np.testing.assert_allclose(phi, 0.0, atol=1e-14)

    def test_linear_part_matches_modal_rhs(self):
        op = tiny_operator()
        config = self.build_config()
        v = random_vector(op.grid, 3, complex_values=True)
        k = np.array([2.0 * np.pi / config.length, 0.0, 0.0])
        state = make_field_state(op.grid, self.harmonic_state(op.grid, config, v), config.length)
        expected = self.harmonic_state(op.grid, config, modal_rhs(op, make_modal_state(op.grid, k, v)))
        actual = nonlinear_rhs(op, state, linear=True)
        self.assertLess(np.abs(actual - expected).max(), 1e-12 * np.abs(expected).max())

    def test_quadratic_terms_scale_with_amplitude(self):
        op = tiny_operator()
        config = self.build_config()
        u = initial_state(config, op.grid).u / config.eps0
        gaps = []
        for eps in (1e-3, 2e-3):
            state = make_field_state(op.grid, eps * u, config.length)
            gaps.append((nonlinear_rhs(op, state) - nonlinear_rhs(op, state, linear=True)) / eps ** 2)
        self.assertLess(np.abs(gaps[0] - gaps[1]).max(), 1e-6 * np.abs(gaps[0]).max())

    def test_mass_rate_vanishes(self):
        op = tiny_operator()
        config = self.build_config()
        state = initial_state(config, op.grid)
        rate = nonlinear_rhs(op, make_field_state(op.grid, state.u * 100.0, config.length))
        self.assertLess(abs(np.sum(op.grid.density_moment(rate))), 1e-11 * np.abs(rate).max())

    def test_initial_state(self):
        grid = tiny_operator().grid
        config = self.build_config(eps0=0.01)
        state = initial_state(config, grid)
        self.assertEqual(state.u.shape, (8, grid.size))
        self.assertEqual(state.n_x, 8)
        density = grid.invariant_coefficients(state.u)[:, 0]
        x = x_grid(8, config.length)
        np.testing.assert_allclose(density, 0.01 * np.sin(2.0 * np.pi * x / config.length), atol=1e-14)

    def test_energy_of_zero_state(self):
        op = tiny_operator()
        config = self.build_config()
        state = make_field_state(op.grid, np.zeros((8, op.grid.size)), config.length)
        values = energy_functional_nonlinear(op, state, config)
        self.assertEqual(values.E, 0.0)
        self.assertEqual(values.D, 0.0)
        self.assertEqual(values.triple_sq, 0.0)

    def test_energy_is_nearly_quadratic(self):
        op = tiny_operator()
        config = self.build_config()
        u = initial_state(config, op.grid).u
        constants = NonlinearConstants(M1=4.0, M2=2.0, M3=2.0)
        small = constants.combine(energy_parts(op, u, 0.0, config))
        large = constants.combine(energy_parts(op, 2.0 * u, 0.0, config))
        self.assertAlmostEqual(large / small, 4.0, delta=1e-2)
        self.assertAlmostEqual(dissipation(op, 2.0 * u, 1.0, config) / dissipation(op, u, 1.0, config), 4.0,
                               places=10)

    def test_calibration(self):
        op = tiny_operator()
        config = self.build_config()
        constants = calibrate_constants(op, config, n_samples=4, seed=1)
        for M in (constants.M1, constants.M2, constants.M3):
            self.assertEqual(np.log2(M), round(np.log2(M)))
        self.assertLessEqual(constants.equivalence[0], constants.equivalence[1])
        self.assertEqual(constants.C, (1.0,))
        self.assertEqual(set(constants.as_dict()), {"M1", "M2", "M3", "C", "kappa", "equivalence"})

    def test_short_run(self):
        op = tiny_operator()
        config = self.build_config()
        state0 = initial_state(config, op.grid)
        constants = NonlinearConstants()
        dt = 0.5 * stable_time_step(op, config.n_x, config.length)
        trace = evolve_nonlinear(op, state0, config.T, dt, config, constants)
        self.assertEqual(len(trace.times), config.n_stamps + 1)
        self.assertLess(trace.mass_drift, 1e-10)
        self.assertFalse(trace.cfl_violation)
        self.assertGreater(trace.initial_size, 0.0)
        self.assertTrue(all(m > 0 for m in trace.min_f))
        X = track_X(trace)
        self.assertTrue(np.all(np.diff(X.X) >= 0))
        self.assertEqual(X.ratio.shape, X.X.shape)
        report = check_energy_monotone(trace)
        self.assertEqual(report.violations == 0, report.max_rise <= MONOTONE_BAND)
        residual = fluid_residual(trace)
        self.assertLess(residual["poisson"], 1e-12)

        linear = evolve_nonlinear(op, state0, config.T, dt, config, constants, linear=True)
        gap = linearization_gap(trace, linear)
        self.assertEqual(gap[0], 0.0)
        self.assertLess(gap[-1], 1e-2 * np.sqrt(np.sum(op.grid.norm_sq(state0.u))))
        total = np.asarray(linear.total_energy)
        self.assertTrue(np.all(np.diff(total) <= 1e-9 * total[0]))

    def test_energy_monotone_report(self):
        falling = SimpleNamespace(energy=[4.0, 3.0, 3.0, 1.0])
        report = check_energy_monotone(falling)
        self.assertEqual(report.violations, 0)
        self.assertEqual(report.max_rise, 0.0)
        rising = SimpleNamespace(energy=[4.0, 3.0, 3.5, 1.0, 1.0 + 4e-7])
        report = check_energy_monotone(rising)
        self.assertEqual(report.violations, 1)
        self.assertAlmostEqual(report.max_rise, 0.125, places=14)

    def test_sup_energy_bound(self):
        t = np.linspace(0.0, 10.0, 11)
        settled = SimpleNamespace(times=list(t), energy=list(np.exp(-t)), energy_lower=list(np.zeros(11)),
                                  phi_xx_sq=list(np.zeros(11)), initial_size=0.5)
        X = track_X(settled)
        np.testing.assert_allclose(X.X, 1.0)
        np.testing.assert_allclose(X.ratio, 4.0)
        self.assertEqual(X.final_half_rise, 0.0)
        self.assertTrue(X.bounded)
        growing = SimpleNamespace(times=list(t), energy=list(1.0 + t), energy_lower=list(np.zeros(11)),
                                  phi_xx_sq=list(np.zeros(11)), initial_size=0.5)
        X = track_X(growing)
        self.assertAlmostEqual(X.final_half_rise, 5.0 / 11.0, places=14)
        self.assertGreater(X.final_half_rise, X_RISE_TOLERANCE)
        self.assertFalse(X.bounded)

    def test_configuration(self):
        self.assertEqual(desk_ell(3.0, -1.0), 5.0)
        with self.assertRaises(ConfigError) as context:
            NonlinearConfig(theta=0.3, n_x=2, lam=0.0)
        self.assertEqual(len(context.exception.violations), 4)
        with self.assertRaises(ConfigError):
            NonlinearConfig(ell=1.5)
        with self.assertRaises(ValueError):
            make_field_state(tiny_operator().grid, np.zeros(tiny_operator().grid.size), 1.0)


if __name__ == '__main__':
    unittest.main()
