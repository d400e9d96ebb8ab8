"""
Unit tests for one-step-ahead prediction
"""
import os
import tempfile
import unittest

import numpy as np

from engine.enumeration import enumerate_hidden
from engine.errors import ShapeError
from engine.model_core import (
    Dims,
    GenerativeParams,
    ObsKind,
    StyleSchedule,
    bernoulli_log_terms,
    emission_preactivations,
    layer_logits,
)
from engine.predictor import (
    clear_checkpoint_cache,
    get_checkpoint,
    predict_next,
    predict_sequence,
    prediction_error,
)
from engine.recognition import RecognitionParams, stack_log_q_terms
from engine.rng import make_rng
from utils.checkpoint import save_checkpoint


class TestPredictor(unittest.TestCase):
    """Test prediction, its causality and the checkpoint cache"""

    def setUp(self):
        rng = make_rng(40)
        self.dims = Dims(M=3, S=2, layer_sizes=(4, 2), order=2, factors=2)
        self.theta = GenerativeParams.initialize(self.dims, ObsKind.REAL, True, rng=rng, factor_scale=0.5)
        self.phi = RecognitionParams.initialize(self.dims, True, rng, factor_scale=0.5)
        self.V = rng.normal(size=(12, 3))
        self.Y = StyleSchedule.from_indices([0] * 6 + [1] * 6, 2).Y

    def test_zero_model_predicts_style_bias(self):
        """Test a zero model with bias C predicts C y"""
        dims = Dims(M=2, S=2, layer_sizes=(3,))
        theta = GenerativeParams.zeros(dims, ObsKind.REAL, factored=False)
        theta.emission.C[...] = [[1.0, -1.0], [2.0, 0.5]]
        phi = RecognitionParams.zeros(dims, factored=False)
        Y = StyleSchedule.from_indices([0, 1, 1], 2).Y
        P = predict_sequence(theta, phi, np.zeros((3, 2)), Y, 4, make_rng(0))
        np.testing.assert_allclose(P, Y @ theta.emission.C.T)

    def test_deterministic(self):
        """Test identical seeds give identical predictions"""
        a = predict_sequence(self.theta, self.phi, self.V, self.Y, 5, make_rng(1))
        b = predict_sequence(self.theta, self.phi, self.V, self.Y, 5, make_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_rows_ignore_current_and_future_frames(self):
        """Test row t depends on frames before t only"""
        a = predict_sequence(self.theta, self.phi, self.V, self.Y, 5, make_rng(2))
        changed = self.V.copy()
        changed[6:] += 10.0
        b = predict_sequence(self.theta, self.phi, changed, self.Y, 5, make_rng(2))
        np.testing.assert_array_equal(a[:7], b[:7])
        self.assertFalse(np.allclose(a[7:], b[7:]))

    def test_predict_next_matches_last_row(self):
        """Test the single-step entry point"""
        seq = predict_sequence(self.theta, self.phi, self.V, self.Y, 3, make_rng(3))
        nxt = predict_next(self.theta, self.phi, self.V[:-1], self.Y[:-1], self.Y[-1], 3, make_rng(3))
        np.testing.assert_array_equal(nxt, seq[-1])

    def test_predict_next_matches_enumeration(self):
        """Test the Monte Carlo prediction against the enumerated q-mixed mean"""
        dims = Dims(M=2, S=1, layer_sizes=(2,), order=1)
        rng = make_rng(41)
        theta = GenerativeParams.initialize(dims, ObsKind.REAL, False, rng=rng, dense_scale=0.8)
        phi = RecognitionParams.initialize(dims, False, rng, dense_scale=0.8)
        theta.layers[0].bias[...] = rng.normal(size=(2, 1))
        phi.layers[0].bias[...] = rng.normal(size=(2, 1))
        history = rng.normal(size=(2, 2))
        V = np.vstack([history, np.zeros((1, 2))])
        Y = np.ones((3, 1))

        H = enumerate_hidden(2, 3)[0]
        N = H.shape[0]
        Vb, Yb = np.broadcast_to(V, (N, 3, 2)), np.broadcast_to(Y, (N, 3, 1))
        log_prefix = stack_log_q_terms(phi, Vb, [H], Yb)[:, :2].sum(axis=-1)
        log_next = bernoulli_log_terms(H[:, 2], layer_logits(theta, 0, Vb, [H], Yb)[:, 2])
        weights = np.exp(log_prefix + log_next).reshape(16, 4)
        means = emission_preactivations(theta, Vb, H, Yb)[0][:, 2].reshape(16, 4, 2)
        self.assertAlmostEqual(weights.sum(), 1.0, places=12)
        expected = np.einsum("pk,pkm->m", weights, means)

        # one sample mixes h_3 exactly given its prefix, so the spread is over prefixes
        prefix_mass = weights.sum(axis=1)
        per_prefix = np.einsum("pk,pkm->pm", weights, means) / prefix_mass[:, None]
        samples = 100000
        stderr = np.sqrt(prefix_mass @ (per_prefix - expected) ** 2 / samples)

        got = predict_next(theta, phi, history, Y[:2], Y[2], samples, make_rng(42))
        self.assertTrue(np.all(np.abs(got - expected) <= 3.0 * stderr + 1e-12), (got, expected, stderr))

    def test_count_predictions_are_rates(self):
        """Test count predictions sum to one"""
        dims = Dims(M=4, S=1, layer_sizes=(3,))
        rng = make_rng(4)
        theta = GenerativeParams.initialize(dims, ObsKind.COUNT, False, rng=rng, dense_scale=0.5)
        phi = RecognitionParams.initialize(dims, False, rng, dense_scale=0.5)
        V = rng.multinomial(2, np.full(4, 0.25), size=6).astype(float)
        P = predict_sequence(theta, phi, V, np.ones((6, 1)), 3, make_rng(5))
        np.testing.assert_allclose(P.sum(axis=1), np.ones(6))

    def test_arguments(self):
        """Test invalid sample counts and shapes"""
        with self.assertRaises(ValueError):
            predict_sequence(self.theta, self.phi, self.V, self.Y, 0, make_rng(0))
        with self.assertRaises(ShapeError):
            predict_sequence(self.theta, self.phi, self.V[:, :2], self.Y, 1, make_rng(0))

    def test_prediction_error(self):
        """Test MAE skips single-frame sequences"""
        self.assertIsNone(prediction_error(self.theta, self.phi, [(self.V[:1], self.Y[:1])], 2, make_rng(0)))
        error = prediction_error(self.theta, self.phi, [(self.V, self.Y)], 2, make_rng(0))
        self.assertGreater(error, 0.0)

    def test_checkpoint_cache(self):
        """Test cached loading and missing files"""
        clear_checkpoint_cache()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.fctsbn")
            with self.assertRaises(FileNotFoundError):
                get_checkpoint(path)
            save_checkpoint(path, self.theta, self.phi)
            first = get_checkpoint(path)
            self.assertIs(get_checkpoint(path), first)
        clear_checkpoint_cache()


if __name__ == "__main__":
    unittest.main()
