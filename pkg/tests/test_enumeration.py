"""
Unit tests for the exact enumeration oracles and the bound audit
"""
import unittest

import numpy as np

from engine.enumeration import (
    MAX_BITS,
    audit_instance,
    elbo_samples,
    enumerate_hidden,
    exact_elbo,
    exact_log_marginal,
    factorized_posterior_toy,
    forward_log_marginal,
    log_q_normalizer,
    random_instance,
    run_audit,
)
from engine.model_core import ObsKind
from engine.rng import make_rng


class TestEnumeration(unittest.TestCase):
    """Test exact marginals, q normalization and the lower bound"""

    def setUp(self):
        self.rng = make_rng(50)

    def test_enumerate_hidden(self):
        """Test configuration count and uniqueness"""
        H = enumerate_hidden((2, 1), 2)
        self.assertEqual([h.shape for h in H], [(64, 2, 2), (64, 2, 1)])
        flat = np.concatenate([h.reshape(64, -1) for h in H], axis=1)
        self.assertEqual(len({tuple(row) for row in flat}), 64)
        with self.assertRaises(ValueError):
            enumerate_hidden(MAX_BITS + 1, 1)

    def test_q_sums_to_one(self):
        """Test recognition mass over all configurations"""
        for kind in ObsKind:
            _, phi, V, Y = random_instance(self.rng, kind, True, 2, (2, 1), T=3)
            self.assertAlmostEqual(log_q_normalizer(phi, V, Y), 0.0, places=10)

    def test_forward_matches_enumeration(self):
        """Test the forward algorithm against brute force"""
        for kind in ObsKind:
            for factored in (False, True):
                theta, _, V, Y = random_instance(self.rng, kind, factored, 1, (3,), T=4)
                self.assertAlmostEqual(forward_log_marginal(theta, V, Y), exact_log_marginal(theta, V, Y), places=9)

    def test_forward_rejects_deep_models(self):
        """Test forward algorithm preconditions"""
        theta, _, V, Y = random_instance(self.rng, ObsKind.REAL, False, 2, (2,), T=3)
        with self.assertRaises(ValueError):
            forward_log_marginal(theta, V, Y)

    def test_bound_holds(self):
        """Test exact and sampled ELBO stay below log p(V)"""
        theta, phi, V, Y = random_instance(self.rng, ObsKind.BINARY, True, 1, (2, 2), T=2)
        log_p = exact_log_marginal(theta, V, Y)
        self.assertLessEqual(exact_elbo(theta, phi, V, Y), log_p)
        samples = elbo_samples(theta, phi, V, Y, 20000, make_rng(1))
        self.assertAlmostEqual(samples.mean(), exact_elbo(theta, phi, V, Y),
                               delta=4.0 * samples.std() / np.sqrt(samples.size))

    def test_exact_posterior_toy_is_tight(self):
        """Test the bound is tight when q is the true posterior"""
        theta, phi, V, Y = factorized_posterior_toy(M=4, J=3, T=3, rng=make_rng(2))
        self.assertAlmostEqual(exact_elbo(theta, phi, V, Y), exact_log_marginal(theta, V, Y), places=9)
        samples = elbo_samples(theta, phi, V, Y, 100, make_rng(3))
        np.testing.assert_allclose(samples, exact_log_marginal(theta, V, Y), atol=1e-9)

    def test_audit_report(self):
        """Test a single audit report"""
        theta, phi, V, Y = random_instance(self.rng, ObsKind.REAL, False, 1, (2,), T=3)
        report = audit_instance(theta, phi, V, Y, make_rng(4), num_samples=2000)
        self.assertTrue(report["passed"])
        self.assertEqual(report["hidden_bits"], 6)
        self.assertIsNotNone(report["forward_log_marginal"])

    def test_run_audit(self):
        """Test the suite covers every instance plus the exact-posterior toy"""
        reports = run_audit(seed=5, instances=5, num_samples=2000)
        self.assertEqual([r["instance"] for r in reports], [0, 1, 2, 3, 4, "exact_posterior"])
        self.assertTrue(all(r["passed"] for r in reports))
        self.assertIn("tight", reports[-1])


if __name__ == "__main__":
    unittest.main()
