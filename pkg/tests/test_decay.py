import unittest

import numpy as np

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.decay import DataProfile, DecayCurve, build_neutral_data, evolve_modes, field_decay_curve, \
    fit_decay_rate, log_uniform_kgrid, micro_profile, run_decay_experiment, synthesize, weighted_mode_norms
from PyVPBLab.runner import geometric_stamps
from tests.fixtures import relaxation_operator


class DecayTestSuite(unittest.TestCase):

    def test_heat_kernel_synthesis(self):
        kgrid = log_uniform_kgrid(1e-3, 10.0, 400)
        times = np.array([1.0, 4.0, 10.0])
        mode_sq = np.exp(-2.0 * kgrid.radii[:, None] ** 2 * times[None, :])
        norm = synthesize(kgrid, mode_sq, 0.0, times=times)
        np.testing.assert_allclose(norm.values, (np.pi / (2.0 * times)) ** 0.75, rtol=1e-3)
        gradient = synthesize(kgrid, mode_sq, 1.0, times=times)
        expected = np.sqrt(1.5 * np.pi ** 1.5 * (2.0 * times) ** -2.5)
        np.testing.assert_allclose(gradient.values, expected, rtol=1e-3)
        self.assertFalse(norm.truncation_dominated)

    def test_power_law_fit(self):
        t = np.concatenate([[0.0], np.geomspace(0.1, 200.0, 60)])
        curve = DecayCurve(times=t, values=3.0 * (1.0 + t) ** -0.75)
        fit = fit_decay_rate(curve, (20.0, 200.0))
        self.assertAlmostEqual(fit.sigma, 0.75, places=10)
        self.assertLess(fit.residual, 1e-12)
        self.assertGreaterEqual(fit.n_points, 5)
        with self.assertRaises(ValueError):
            fit_decay_rate(curve, (150.0, 160.0))
        with self.assertRaises(ValueError):
            fit_decay_rate(DecayCurve(times=t, values=np.zeros_like(t)), (20.0, 200.0))

    def test_truncation_warning(self):
        kgrid = log_uniform_kgrid(0.01, 1.0, 10)
        mode_sq = np.zeros((10, 2))
        mode_sq[0] = 1.0
        with self.assertLogs("PyVPBLab.decay", level="WARNING"):
            curve = synthesize(kgrid, mode_sq, label="tail")
        self.assertTrue(curve.truncation_dominated)

    def test_kgrid(self):
        kgrid = log_uniform_kgrid(0.1, 10.0, 5)
        self.assertAlmostEqual(kgrid.radii[0], 0.1)
        self.assertAlmostEqual(kgrid.radii[-1], 10.0)
        np.testing.assert_allclose(kgrid.vectors()[:, 0], kgrid.radii)
        with self.assertRaises(ValueError):
            log_uniform_kgrid(1.0, 0.5, 10)

    def test_neutral_data(self):
        grid = relaxation_operator().grid
        kgrid = log_uniform_kgrid(0.01, 1.0, 4)
        data = build_neutral_data(grid, kgrid, DataProfile())
        densities = np.array([abs(grid.invariant_coefficients(u)[0]) for u in data])
        envelope = np.exp(-0.5 * kgrid.radii ** 2)
        np.testing.assert_allclose(densities, kgrid.radii * envelope, rtol=1e-10)
        with self.assertRaises(ValueError):
            build_neutral_data(grid, kgrid, DataProfile(a_shape="constant"))
        constant = build_neutral_data(grid, kgrid, DataProfile(a_shape="constant", neutral=False))
        self.assertEqual(len(constant), 4)
        with self.assertRaises(ConfigError):
            DataProfile(a_shape="cubic")

    def test_micro_profile(self):
        grid = relaxation_operator().grid
        chi = micro_profile(grid)
        self.assertAlmostEqual(grid.norm_sq(chi), 1.0, places=12)
        self.assertLess(np.abs(grid.invariant_coefficients(chi)).max(), 1e-12)

    def test_decay_experiment(self):
        op = relaxation_operator()
        kgrid = log_uniform_kgrid(0.1, 3.0, 4)
        data = build_neutral_data(op.grid, kgrid, DataProfile())
        stamps = geometric_stamps(2.0, 8)
        traces = evolve_modes(op, kgrid, data, 2.0, stamps)
        np.testing.assert_allclose([t.k_norm for t in traces], kgrid.radii)
        curve = run_decay_experiment(op, kgrid, data, 0.0, 0.0, traces=traces)
        np.testing.assert_array_equal(curve.times, stamps)
        direct = synthesize(kgrid, weighted_mode_norms(traces, 0.0))
        np.testing.assert_allclose(curve.values, direct.values)
        field = field_decay_curve(kgrid, traces)
        self.assertEqual(field.values.shape, stamps.shape)
        self.assertTrue(np.all(field.values > 0))


if __name__ == '__main__':
    unittest.main()
