import unittest

import numpy as np

from PyVPBLab.runner import EvolutionRunner, InstabilityError, RK4Runner, geometric_stamps, uniform_stamps


class RunnerTestSuite(unittest.TestCase):

    def run_decay(self, runner, stamps):
        recorded = []
        final = runner.run(lambda t, y: -y, np.array([1.0]), stamps, lambda t, y: recorded.append((t, y[0])))
        return final, recorded

    def test_rk4_accuracy(self):
        final, recorded = self.run_decay(RK4Runner(0.01), uniform_stamps(2.0, 4))
        self.assertEqual([t for (t, _) in recorded], [0.0, 0.5, 1.0, 1.5, 2.0])
        for (t, y) in recorded:
            self.assertAlmostEqual(y, np.exp(-t), places=8)
        self.assertAlmostEqual(final[0], np.exp(-2.0), places=8)

    def test_stamps_are_hit_exactly(self):
        stamps = geometric_stamps(10.0, 7)
        _, recorded = self.run_decay(RK4Runner(0.3), stamps)
        np.testing.assert_array_equal([t for (t, _) in recorded], stamps)

    def test_instability_is_detected(self):
        runner = RK4Runner(0.1)
        with self.assertRaises(InstabilityError) as context:
            runner.run(lambda t, y: y, np.array([1.0]), uniform_stamps(5.0, 5), lambda t, y: None)
        self.assertGreater(context.exception.norms[-1], 10.0)
        self.assertLess(context.exception.time, 2.5)

    def test_base_step_needs_override(self):
        with self.assertRaises(NotImplementedError):
            EvolutionRunner(0.1).run(lambda t, y: y, np.array([1.0]), [0.0, 1.0], lambda t, y: None)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            RK4Runner(0.0)
        with self.assertRaises(ValueError):
            RK4Runner(0.1).run(lambda t, y: y, np.array([1.0]), [0.0, 1.0, 0.5], lambda t, y: None)
        with self.assertRaises(ValueError):
            geometric_stamps(0.05, 10)


if __name__ == '__main__':
    unittest.main()
