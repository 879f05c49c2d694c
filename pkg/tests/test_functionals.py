import unittest

import numpy as np

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.decay import micro_profile
from PyVPBLab.functionals import EQUIVALENCE_WINDOW, EnergySpec, calibrate_energy_spec, dissipation_D_ell, \
    energy_E_ell, energy_terms, fit_dissipation_constant, interactive_functional, mu_weight, sample_states, rho, \
    split_energy, verify_lyapunov, weighted_decay_bound
from PyVPBLab.macro_micro import project_P
from PyVPBLab.modal_dynamics import evolve_mode, make_modal_state
from PyVPBLab.runner import uniform_stamps
from tests.fixtures import relaxation_operator


class FunctionalsTestSuite(unittest.TestCase):

    def build_trace(self, k, T=2.0):
        op = relaxation_operator()
        grid = op.grid
        u = grid.invariant_basis @ np.array([0.5, 0.2, 0.0, 0.0, 0.3]) + 0.4 * micro_profile(grid)
        return evolve_mode(op, make_modal_state(grid, [k, 0.0, 0.0], u), T, stamps=uniform_stamps(T, 40))

    def test_rho(self):
        self.assertAlmostEqual(rho([1.0, 0.0, 0.0]), 0.5)
        self.assertAlmostEqual(rho(2.0), 0.8)

    def test_interactive_functional_of_fluid_state(self):
        grid = relaxation_operator().grid
        s = make_modal_state(grid, [2.0, 0.0, 0.0], grid.invariant_basis @ np.array([0.3, 0.5, 0.0, 0.0, 0.0]))
        value = interactive_functional(grid, s, kappa1=1.0)
        self.assertAlmostEqual(value.imag, 2.0 * 0.3 * 0.5 / 5.0, places=10)
        self.assertAlmostEqual(value.real, 0.0, places=10)

    def test_energy_of_zero_state(self):
        grid = relaxation_operator().grid
        s = make_modal_state(grid, [0.5, 0.0, 0.0], np.zeros(grid.size))
        spec = EnergySpec()
        self.assertEqual(energy_E_ell(grid, spec, s), 0.0)
        self.assertEqual(dissipation_D_ell(grid, spec, s), 0.0)

    def test_energy_is_quadratic(self):
        grid = relaxation_operator().grid
        spec = EnergySpec(ell=1.0)
        for k in (0.3, 3.0):
            s = sample_states(grid, [k], 1, seed=4)[0]
            double = make_modal_state(grid, s.k, 2.0 * s.u)
            self.assertAlmostEqual(energy_E_ell(grid, spec, double) / energy_E_ell(grid, spec, s), 4.0, places=10)

    def test_mu_weight(self):
        grid = relaxation_operator().grid
        self.assertTrue(np.all(mu_weight(grid, -1.0) >= 1.0))

    def test_calibrated_spec_keeps_equivalence(self):
        grid = relaxation_operator().grid
        radii = [0.1, 1.0, 4.0]
        spec = calibrate_energy_spec(grid, -1.0, radii, 0.0, n_samples=50, seed=3)
        self.assertAlmostEqual(spec.kappa3, spec.kappa2 / 4)
        for s in sample_states(grid, radii, 50, 3):
            base, interactive, weighted = energy_terms(grid, spec, s)
            ratio = (base + spec.kappa2 * interactive + weighted) / (base + weighted)
            self.assertTrue(EQUIVALENCE_WINDOW[0] <= ratio <= EQUIVALENCE_WINDOW[1])

    def test_fit_of_exponential_decay(self):
        t = np.linspace(0.0, 5.0, 501)
        report = fit_dissipation_constant(t, np.exp(-t), np.exp(-t))
        self.assertAlmostEqual(report.kappa, 1.0, places=4)
        self.assertTrue(report.positive)
        growing = fit_dissipation_constant(t, np.exp(t), np.zeros_like(t))
        self.assertFalse(growing.positive)

    def test_lyapunov_from_recorded_states(self):
        trace = self.build_trace(0.5)
        self.assertEqual(verify_lyapunov(trace).kappa, verify_lyapunov(trace, trace.spec).kappa)
        weighted = verify_lyapunov(trace, trace.spec.with_ell(1.0))
        self.assertEqual(len(weighted.margins), len(trace.times) - 1)

    def test_split_energy(self):
        grid = relaxation_operator().grid
        spec = EnergySpec(ell=1.0)
        s = sample_states(grid, [0.5], 1, seed=2)[0]
        low, high, fluid = split_energy(grid, spec, s, t=10.0, eps=0.1)
        _, _, micro = project_P(grid, s.u)
        self.assertAlmostEqual(low + high, grid.norm_sq(mu_weight(grid, spec.gamma) * micro), places=10)
        self.assertGreater(fluid, 0.0)

    def test_weighted_envelope(self):
        traces = [self.build_trace(k) for k in (0.2, 1.5)]
        spec = EnergySpec()
        report = weighted_decay_bound(traces, spec, ell0=3.0, eps=0.01, J=2.0, p=2.0)
        self.assertEqual(report.violations, 0)
        self.assertGreater(report.C_hat, 0.0)
        self.assertEqual(len(report.per_mode), 2)
        tight = weighted_decay_bound(traces, spec, ell0=3.0, eps=0.01, J=2.0, p=2.0, C=0.5 * report.C_hat)
        self.assertGreater(tight.violations, 0)
        with self.assertRaises(ValueError):
            weighted_decay_bound(traces, spec, ell0=2.0, eps=0.01, J=2.0, p=2.0)
        with self.assertRaises(ValueError):
            weighted_decay_bound(traces, spec, ell0=3.0, eps=1.0, J=2.0, p=2.0, kappa_hat=1.0)

    def test_spec_constraints(self):
        with self.assertRaises(ConfigError):
            EnergySpec(ell=-1.0, kappa2=0.0)


if __name__ == '__main__':
    unittest.main()
