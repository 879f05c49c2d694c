import os
import tempfile
import unittest

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.collision_core import assemble_operator
from PyVPBLab.scenario import ENV_CACHE_DIR, ENV_THREADS, ExperimentConfig, apply_overrides, config_from_mapping, \
    parse_config


class ScenarioTestSuite(unittest.TestCase):

    def write_ini(self, text):
        handle = tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False)
        handle.write(text)
        handle.close()
        self.addCleanup(os.unlink, handle.name)
        return handle.name

    def test_defaults(self):
        config = config_from_mapping({})
        self.assertEqual(config.kernel.gamma, -1.0)
        self.assertEqual(config.nonlinear.ell, 5.0)
        self.assertEqual(config.nonlinear.gamma, -1.0)
        self.assertEqual(config.weight.ells, (0.0, 1.0, 2.0))
        self.assertEqual(config.p, 2.0)
        self.assertEqual(set(config.as_dict()), {"kernel", "weight", "modal", "nonlinear", "output"})

    def test_default_grids_assemble_within_the_clip_limit(self):
        config = ExperimentConfig()
        kernel = config.kernel.kernel_config()
        self.assertEqual(kernel.max_clipped_fraction, 0.25)
        nonlinear = config.nonlinear.kernel_config(kernel)
        self.assertEqual(nonlinear.max_clipped_fraction, kernel.max_clipped_fraction)
        op = assemble_operator(config.nonlinear.grid(), nonlinear)
        self.assertGreater(op.metadata["clipped_fraction"], 0.0)
        self.assertLessEqual(op.metadata["clipped_fraction"], nonlinear.max_clipped_fraction)

    def test_theta_is_rejected(self):
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"weight": {"theta": "0.3"}})
        self.assertTrue(any("0 < theta <= 1/4" in v for v in context.exception.violations))

    def test_all_violations_are_reported(self):
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"weight": {"lam": "-1"}, "modal": {"n_k": "1", "a_shape": "cubic"},
                                 "output": {"threads": "0"}})
        violations = context.exception.violations
        self.assertTrue(any(v.startswith("[weight]") for v in violations))
        self.assertEqual(sum(v.startswith("[modal]") for v in violations), 2)
        self.assertTrue(any(v.startswith("[output]") for v in violations))

    def test_ill_typed_value(self):
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"kernel": {"n": "sixteen"}})
        self.assertIn("[kernel]", context.exception.violations[0])

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            config_from_mapping({"kernel": {"foo": "1"}}, strict=True)
        with self.assertRaises(ConfigError):
            config_from_mapping({"extra": {}}, strict=True)
        with self.assertLogs("PyVPBLab.scenario", level="WARNING"):
            config = config_from_mapping({"kernel": {"foo": "1"}, "extra": {}})
        self.assertFalse(hasattr(config.kernel, "foo"))

    def test_exploratory_gamma_warns(self):
        with self.assertLogs("PyVPBLab.scenario", level="WARNING"):
            config = config_from_mapping({"kernel": {"gamma": "-2.5"}})
        self.assertEqual(config.nonlinear.gamma, -2.5)
        self.assertEqual(config.nonlinear.ell, 4.0)

    def test_cross_section_constraints(self):
        with self.assertRaises(ConfigError):
            config_from_mapping({"modal": {"J": "3"}})
        with self.assertRaises(ConfigError):
            config_from_mapping({"weight": {"ell0": "2.5"}})

    def test_nonlinear_keys_override_shared_ones(self):
        config = config_from_mapping({"weight": {"lam": "0.02"}, "nonlinear": {"lam": "0.03", "ell": "6"}})
        self.assertEqual(config.weight.lam, 0.02)
        self.assertEqual(config.nonlinear.lam, 0.03)
        self.assertEqual(config.nonlinear.ell, 6.0)

    def test_parse_file(self):
        path = self.write_ini("[kernel]\ngamma = -1.5\nn = 12\n\n[weight]\nells = 0, 1.5\n\n"
                              "[modal]\nneutral = false\na_shape = constant\n")
        config = parse_config(path)
        self.assertEqual(config.kernel.gamma, -1.5)
        self.assertEqual(config.kernel.n, 12)
        self.assertEqual(config.weight.ells, (0.0, 1.5))
        self.assertFalse(config.modal.neutral)
        self.assertEqual(config.source, path)

    def test_bad_files(self):
        with self.assertRaises(ConfigError):
            parse_config(os.path.join(tempfile.gettempdir(), "no-such-vpblab.ini"))
        with self.assertRaises(ConfigError):
            parse_config(self.write_ini("gamma = -1\n"))

    def test_override_precedence(self):
        environ = {ENV_THREADS: "4", ENV_CACHE_DIR: "/tmp/env-cache"}
        config = apply_overrides(ExperimentConfig(), threads=2, environ=environ)
        self.assertEqual(config.output.threads, 2)
        self.assertEqual(str(config.output.cache_path), "/tmp/env-cache")
        config = apply_overrides(ExperimentConfig(), cache_dir="/tmp/flag", seed=7, environ=environ)
        self.assertEqual(config.output.threads, 4)
        self.assertEqual(str(config.output.cache_path), "/tmp/flag")
        self.assertEqual(config.output.seed, 7)
        with self.assertRaises(ConfigError):
            apply_overrides(ExperimentConfig(), threads=0, environ={})


if __name__ == '__main__':
    unittest.main()
