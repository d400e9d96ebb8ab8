"""
Unit tests for the finite-difference gradient suite
"""
import unittest

import numpy as np

from engine.gradcheck import check_auxiliary, check_model, check_tensors, combinations, run_gradcheck
from engine.model_core import ObsKind
from engine.rng import make_rng


class TestGradcheck(unittest.TestCase):
    """Test the checker itself and the stock gradients"""

    def test_combinations(self):
        """Test the configuration grid"""
        combos = combinations()
        self.assertEqual(len(combos), 24)
        self.assertEqual({c["order"] for c in combos}, {1, 3})

    def test_check_tensors_quadratic(self):
        """Test the checker on a known gradient"""
        x = {"x": np.array([1.0, -2.0, 0.5])}
        rows = check_tensors(lambda: float(np.sum(x["x"] ** 2)), x, {"x": 2.0 * x["x"]}, make_rng(0))
        self.assertTrue(rows[0]["passed"])
        rows = check_tensors(lambda: float(np.sum(x["x"] ** 2)), x, {"x": 3.0 * x["x"]}, make_rng(0))
        self.assertFalse(rows[0]["passed"])
        np.testing.assert_array_equal(x["x"], [1.0, -2.0, 0.5])

    def test_single_configuration_passes(self):
        """Test a factored order-3 two-layer count model"""
        combo = {"obs_kind": ObsKind.COUNT, "factored": True, "order": 3, "layer_sizes": (3, 2)}
        rows = check_model(combo, make_rng(1))
        self.assertTrue(all(r["passed"] for r in rows), [r for r in rows if not r["passed"]])

    def test_auxiliary_passes(self):
        """Test baseline and classifier gradients"""
        rows = check_auxiliary(make_rng(2))
        names = {r["tensor"] for r in rows}
        self.assertIn("classifier/W", names)
        self.assertIn("baseline/c0", names)
        self.assertTrue(all(r["passed"] for r in rows))

    def test_stock_build_passes(self):
        """Test every gradient of the full suite"""
        report = run_gradcheck(seed=3)
        self.assertTrue(report["passed"], report["failures"])

    def test_corrupted_tensor_is_named(self):
        """Test fault injection names exactly the corrupted tensor"""
        report = run_gradcheck(seed=3, corrupt="layer1/W2")
        self.assertFalse(report["passed"])
        self.assertEqual(report["failures"], ["layer1/W2"])


if __name__ == "__main__":
    unittest.main()
