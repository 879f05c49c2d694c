import csv
import tempfile
import unittest
from pathlib import Path

import numpy as np

from PyVPBLab.reporting import RunManifest, canonical_json, config_hash, merge_summary, read_json, write_csv, \
    write_json, write_manifest
from PyVPBLab.scenario import ExperimentConfig


class ReportingTestSuite(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_canonical_json(self):
        text = canonical_json({"b": np.float64(1.5), "a": [np.int64(2), np.bool_(True)], "c": float("nan")})
        self.assertEqual(text, '{"a":[2,true],"b":1.5,"c":"nan"}')

    def test_config_hash(self):
        self.assertEqual(config_hash(ExperimentConfig()), config_hash(ExperimentConfig()))
        changed = ExperimentConfig()
        changed.kernel = changed.kernel.replace(gamma=-1.5)
        self.assertNotEqual(config_hash(ExperimentConfig()), config_hash(changed))

    def test_csv_keeps_full_precision(self):
        values = np.array([1.0 / 3.0, np.pi, 1e-300])
        path = write_csv(self.root / "series.csv", {"t": [0.0, 1.0, 2.0], "value": values})
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["t", "value"])
        self.assertEqual([float(r[1]) for r in rows[1:]], values.tolist())
        with self.assertRaises(ValueError):
            write_csv(self.root / "bad.csv", {"t": [0.0], "value": [1.0, 2.0]})

    def test_json_is_deterministic(self):
        payload = {"z": 1, "a": {"y": np.arange(3), "x": 0.1}}
        first = write_json(self.root / "one.json", payload).read_bytes()
        second = write_json(self.root / "two.json", dict(reversed(list(payload.items())))).read_bytes()
        self.assertEqual(first, second)

    def test_summary(self):
        config = ExperimentConfig()
        for command in ("spectrum", "decay"):
            manifest = RunManifest(command=command, config_hash=config_hash(config), config=config.as_dict(),
                                   seed=0)
            manifest.results["value"] = len(command)
            write_manifest(manifest, self.root / command)
        summary = merge_summary(self.root)
        self.assertEqual(set(summary["runs"]), {"spectrum", "decay"})
        self.assertEqual(len(summary["config_hashes"]), 1)
        self.assertEqual(summary["runs"]["decay"]["results"]["value"], 5)
        stored = read_json(self.root / "spectrum" / "manifest.json")
        self.assertIn("deviation", stored)
        self.assertEqual(stored["config"]["kernel"]["gamma"], -1.0)


if __name__ == '__main__':
    unittest.main()
