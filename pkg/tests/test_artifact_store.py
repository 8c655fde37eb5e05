"""
Artifact storage: provenance headers, exact ensemble dumps, reports
"""
import os
import sys
import tempfile
import unittest

import numpy as np

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.density import DensityEstimate
from calculations.flow import forward_flow
from core.errors import ConfigurationError
from database.artifact_store import ArtifactStore, read_provenance
from families.builtin import kolmogorov
from models.model_spec import OdeConfig
from models.paths import ParticleEnsemble, QuantilePath
from utils.formatters import flatten_record, format_float, format_report, parse_report


class TestArtifactStore(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.store = ArtifactStore(os.path.join(self.tmp.name, "run"), config_hash="abc123", seed=42)
        self.ensemble = ParticleEnsemble(states=np.random.default_rng(1).standard_normal((50, 2)) / 3.0, t=0.5)

    def tearDown(self):
        self.tmp.cleanup()

    def test_creates_directory_and_writes_provenance(self):
        target = self.store.save_ensemble_csv("ensemble.csv", self.ensemble)
        self.assertTrue(os.path.isdir(self.store.out_dir))
        self.assertEqual(read_provenance(target), {"config_sha256": "abc123", "seed": "42"})

    def test_ensemble_csv_is_exact(self):
        target = self.store.save_ensemble_csv("ensemble.csv", self.ensemble)
        loaded = ArtifactStore.load_ensemble_csv(target, t=0.5)
        np.testing.assert_array_equal(loaded.states, self.ensemble.states)

    def test_binary_dump(self):
        target = self.store.save_ensemble_binary("ensemble.bin", self.ensemble)
        np.testing.assert_array_equal(ArtifactStore.load_ensemble_binary(target).states, self.ensemble.states)

    def test_binary_dump_rejects_other_files(self):
        bogus = self.store.path("bogus.bin")
        with open(bogus, "wb") as f:
            f.write(b"NOPE" + bytes(12))
        with self.assertRaises(ConfigurationError):
            ArtifactStore.load_ensemble_binary(bogus)

    def test_quantile_path(self):
        path = QuantilePath(times=np.array([0.0, 0.5, 1.0]), values=np.array([[0.0, 1.0], [0.1, 1.1], [0.3, 1.2]]))
        loaded = ArtifactStore.load_quantile_path(self.store.save_quantile_path("q.csv", path))
        np.testing.assert_array_equal(loaded.times, path.times)
        np.testing.assert_array_equal(loaded.values, path.values)

    def test_density_grid(self):
        u = DensityEstimate.from_pdf(lambda x: np.exp(-x[:, 0] ** 2 / 2.0) / np.sqrt(2.0 * np.pi), [-5.0], [5.0], 33)
        loaded = ArtifactStore.load_density_grid(self.store.save_density_grid("density.csv", u))
        np.testing.assert_allclose(loaded.values, u.values)

    def test_flow_trajectory(self):
        flow = forward_flow(kolmogorov(2), QuantilePath.constant([0.0, 0.0], 1.0), [1.0, 0.0], 1.0,
                            cfg=OdeConfig(step=0.25, record_path=True))
        frame = ArtifactStore.read_csv(self.store.save_flow("flow.csv", flow))
        self.assertEqual(list(frame.columns), ["t", "theta1", "theta2", "log_jac_det"])
        self.assertAlmostEqual(frame["theta2"].iloc[-1], 1.0)

    def test_flow_without_path(self):
        flow = forward_flow(kolmogorov(1), QuantilePath.constant([0.0], 1.0), [0.0], 0.5)
        with self.assertRaises(ConfigurationError):
            self.store.save_flow("flow.csv", flow)

    def test_report(self):
        target = self.store.write_report("r.txt", {"passed": True, "C": 1.5, "slopes": [1.0, 3.0],
                                                   "rows": [{"t": 0.5}]}, header="verify")
        with open(target) as f:
            text = f.read()
        self.assertTrue(text.startswith("# verify config_sha256=abc123 seed=42"))
        parsed = parse_report(text)
        self.assertEqual(parsed, {"passed": "true", "C": "1.5", "slopes": "1.0,3.0", "rows.0.t": "0.5"})

    def test_missing_csv(self):
        with self.assertRaises(ConfigurationError):
            ArtifactStore.read_csv(self.store.path("absent.csv"))


class TestFormatters(unittest.TestCase):

    def test_format_float(self):
        self.assertEqual(format_float(0.1), "0.1")
        self.assertEqual(format_float(float("nan")), "nan")
        self.assertEqual(format_float(float("-inf")), "-inf")

    def test_flatten(self):
        keys = [k for k, _ in flatten_record({"a": {"b": 1}, "c": [{"d": 2}], "e": []})]
        self.assertEqual(keys, ["a.b", "c.0.d", "e"])

    def test_none_is_blank(self):
        self.assertEqual(format_report({"x": None}), "x = \n")


if __name__ == '__main__':
    unittest.main()
