"""
Unit tests for the NVIL estimator, RMSprop and the training loop
"""
import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from engine.errors import CheckpointError, NumericAbort
from engine.model_core import Dims, GenerativeParams, ObsKind, StyleSchedule
from engine.nvil_trainer import (
    BaselineParams,
    NVILTrainer,
    OptState,
    SignalStats,
    TrainConfig,
    baseline_eval,
    baseline_gradients,
    baseline_values,
    elbo_term,
    make_chunks,
    nvil_batch_estimate,
    nvil_minibatch,
    rmsprop_step,
    split_holdout,
    train,
    worker_count,
)
from engine.recognition import RecognitionParams
from engine.rng import make_rng
from utils.checkpoint import load_checkpoint
from utils.data_io import plant_model


def small_problem(seed=0, factored=True, layer_sizes=(4,)):
    rng = make_rng(seed)
    dims = Dims(M=3, S=2, layer_sizes=layer_sizes, order=1, factors=2 if factored else None)
    theta = GenerativeParams.initialize(dims, ObsKind.REAL, factored, rng=rng, dense_scale=0.3, factor_scale=0.3)
    phi = RecognitionParams.initialize(dims, factored, rng, dense_scale=0.3, factor_scale=0.3)
    lam = BaselineParams.for_dims(dims, hidden=5, rng=rng)
    V = rng.normal(size=(4, 8, 3))
    Y = np.stack([StyleSchedule.constant(b % 2, 8, 2).Y for b in range(4)])
    return theta, phi, lam, V, Y


class TestEstimator(unittest.TestCase):
    """Test the per-step signal, baseline and minibatch gradients"""

    def test_elbo_term_zero_model(self):
        """Test entropy terms cancel for a zero model"""
        dims = Dims(M=1, S=1, layer_sizes=(1,))
        theta = GenerativeParams.zeros(dims, ObsKind.REAL, factored=False)
        phi = RecognitionParams.zeros(dims, factored=False)
        value = elbo_term(theta, phi, np.zeros(1), np.zeros(1), (np.zeros(1), np.zeros(1)), np.ones(1))
        self.assertAlmostEqual(value, -0.918939, places=6)

    def test_zero_baseline_is_bias(self):
        """Test a zero-weight baseline returns its scalar bias"""
        lam = BaselineParams.initialize(input_dim=7, hidden=5)
        lam.c0[0] = 0.7
        self.assertEqual(baseline_eval(lam, np.ones(5), np.ones(2)), 0.7)

    def test_divisor_clamp(self):
        """Test max(1, sqrt(tau))"""
        self.assertEqual(SignalStats(tau=0.5).divisor, 1.0)
        self.assertEqual(SignalStats(tau=4.0).divisor, 2.0)
        stats = SignalStats(rho=0.9).update(2.0, 10.0)
        self.assertAlmostEqual(stats.kappa, 0.2)
        self.assertAlmostEqual(stats.tau, 1.0)

    def test_baseline_absorbs_signal_mean(self):
        """Test fitting the baseline alone to fixed signals shrinks the centered mean tenfold"""
        rng = make_rng(17)
        lam = BaselineParams.initialize(input_dim=5, hidden=20, rng=rng)
        X = rng.normal(size=(256, 5))
        signals = 4.0 + 0.5 * X[:, 0] - 0.3 * X[:, 2] ** 2
        start = abs(float(np.mean(signals - baseline_values(lam, X))))
        opt = OptState(lr=2e-2)
        params = lam.named_tensors()
        for _ in range(500):
            centered = signals - baseline_values(lam, X)
            rmsprop_step(opt, params, baseline_gradients(lam, X, centered).scaled(1.0 / len(X)))
        end = abs(float(np.mean(signals - baseline_values(lam, X))))
        self.assertLessEqual(end, start / 10.0)

    def test_signals_are_local_per_step(self):
        """Test each raw signal is that step's own log p - log q, with nothing from later steps"""
        theta, phi, _, V, Y = small_problem()
        result = nvil_batch_estimate(theta, phi, None, SignalStats(), V, Y, make_rng(5), use_baseline=False,
                                     use_centering=False, use_normalization=False, update_stats=False)
        H = result.H[0]
        zeros_h, zeros_v = np.zeros(H.shape[-1]), np.zeros(V.shape[-1])
        for b in range(V.shape[0]):
            for t in range(V.shape[1]):
                lags = (H[b, t - 1] if t else zeros_h, V[b, t - 1] if t else zeros_v)
                expected = elbo_term(theta, phi, V[b, t], H[b, t], lags, Y[b, t])
                self.assertAlmostEqual(result.signals[b, t], expected, places=10)
        self.assertAlmostEqual(result.elbo, float(result.signals.sum()) / V.shape[0], places=10)

    def test_same_seed_same_gradients(self):
        """Test bit-identical estimates from identical seeds"""
        theta, phi, lam, V, Y = small_problem()
        a, _, elbo_a = nvil_minibatch(theta, phi, lam, SignalStats(), (V, Y), make_rng(3))
        b, _, elbo_b = nvil_minibatch(theta, phi, lam, SignalStats(), (V, Y), make_rng(3))
        self.assertEqual(elbo_a, elbo_b)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_threads_do_not_change_samples(self):
        """Test sharding over worker threads"""
        theta, phi, lam, V, Y = small_problem()
        a, _, _ = nvil_minibatch(theta, phi, lam, SignalStats(), (V, Y), make_rng(3), workers=1)
        b, _, _ = nvil_minibatch(theta, phi, lam, SignalStats(), (V, Y), make_rng(3), workers=3)
        for name in a:
            np.testing.assert_allclose(a[name], b[name], rtol=1e-10, atol=1e-12)

    def test_gradient_keys(self):
        """Test every trainable tensor receives a gradient"""
        theta, phi, lam, V, Y = small_problem(layer_sizes=(4, 2))
        grads, stats, _ = nvil_minibatch(theta, phi, lam, SignalStats(), (V, Y), make_rng(1))
        expected = set(theta.named_tensors()) | set(phi.named_tensors()) | set(lam.named_tensors())
        self.assertEqual(set(grads), expected)
        self.assertNotEqual(stats.tau, 0.0)

    def test_worker_cap(self):
        """Test FCTSBN_THREADS caps the worker count"""
        with mock.patch.dict(os.environ, {"FCTSBN_THREADS": "1"}):
            self.assertEqual(worker_count(8), 1)


class TestRMSprop(unittest.TestCase):
    """Test the optimiser update"""

    def test_zero_gradient_no_change(self):
        """Test zero gradient leaves parameters alone"""
        params = {"w": np.array([1.0, -2.0])}
        rmsprop_step(OptState(), params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_constant_gradient_step_size(self):
        """Test steps approach lr under a constant gradient"""
        params = {"w": np.zeros(1)}
        opt = OptState(lr=3e-3)
        for _ in range(200):
            before = params["w"].copy()
            rmsprop_step(opt, params, {"w": np.ones(1)})
        self.assertAlmostEqual(float(params["w"][0] - before[0]), 3e-3, delta=1e-8)

    def test_scale_covariance(self):
        """Test doubling every gradient leaves the trajectory unchanged as eps -> 0"""
        rng = make_rng(8)
        grads = rng.normal(size=(200, 3))
        a, b = {"w": np.zeros(3)}, {"w": np.zeros(3)}
        opt_a, opt_b = OptState(eps=1e-14), OptState(eps=1e-14)
        for g in grads:
            rmsprop_step(opt_a, a, {"w": g})
            rmsprop_step(opt_b, b, {"w": 2.0 * g})
        np.testing.assert_allclose(a["w"], b["w"], atol=1e-6)

    def test_matches_reference_trace(self):
        """Test 100 steps on two tensors against a plain reimplementation"""
        rng = make_rng(9)
        shapes = {"a": (3, 2), "b": (4,)}
        trace = [{k: rng.normal(scale=10.0 ** rng.integers(-3, 3), size=s) for k, s in shapes.items()}
                 for _ in range(100)]
        params = {k: rng.normal(size=s) for k, s in shapes.items()}
        ref_p = {k: v.copy() for k, v in params.items()}
        ref_acc = {k: np.zeros(s) for k, s in shapes.items()}
        lr, decay, eps = 2e-3, 0.95, 1e-6
        opt = OptState(lr=lr, decay=decay, eps=eps)
        for g in trace:
            rmsprop_step(opt, params, g)
            for k in shapes:
                ref_acc[k] = decay * ref_acc[k] + (1.0 - decay) * g[k] * g[k]
                ref_p[k] = ref_p[k] + lr * g[k] / np.sqrt(ref_acc[k] + eps)
        for k in shapes:
            np.testing.assert_allclose(params[k], ref_p[k], rtol=0.0, atol=1e-12)
            np.testing.assert_allclose(opt.accumulators[k], ref_acc[k], rtol=0.0, atol=1e-12)
        self.assertEqual(opt.steps, 100)

    def test_non_finite_step_skipped(self):
        """Test NaN gradients are skipped and counted"""
        params = {"w": np.ones(2)}
        opt = OptState()
        with self.assertWarns(UserWarning):
            rmsprop_step(opt, params, {"w": np.array([np.nan, 1.0])})
        self.assertEqual(opt.skipped, 1)
        np.testing.assert_array_equal(params["w"], np.ones(2))


class TestTrainingLoop(unittest.TestCase):
    """Test chunking, the epoch loop and the artifacts it writes"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        dims = Dims(M=3, S=2, layer_sizes=(4,), order=1, factors=2)
        _, self.dataset = plant_model(dims, 4.0, make_rng(12), num_sequences=6, T=20)

    def tearDown(self):
        self.tmp.cleanup()

    def config(self, name, **overrides):
        values = dict(layer_sizes=(4,), factors=2, epochs=3, batch_size=4, subsequence_length=10,
                      baseline_hidden=5, holdout_fraction=0.2, prediction_samples=2, verbose=False,
                      out_dir=os.path.join(self.tmp.name, name))
        values.update(overrides)
        return TrainConfig(**values)

    def test_make_chunks_end_aligned_remainder(self):
        """Test chunk starts"""
        V = np.arange(7, dtype=float)[:, None]
        chunks = make_chunks([(V, np.ones((7, 1)))], 3)
        self.assertEqual([c[0][0, 0] for c in chunks], [0.0, 3.0, 4.0])

    def test_split_holdout(self):
        """Test held-out records are the last ones"""
        train_part, held = split_holdout(list(range(10)), 0.1)
        self.assertEqual(held, [9])
        self.assertEqual(split_holdout([1], 0.5), ([1], []))

    def test_zero_epochs_keeps_initialization(self):
        """Test the checkpoint after zero epochs equals the initial parameters"""
        cfg = self.config("zero", epochs=0)
        result = train(cfg, self.dataset, make_rng(4))
        fresh = NVILTrainer(cfg, cfg.dims_for(3, 2), ObsKind.REAL, make_rng(4))
        ckpt = load_checkpoint(result.checkpoint_path)
        for name, value in fresh.theta.named_tensors().items():
            np.testing.assert_array_equal(ckpt.theta.named_tensors()[name], value)
        self.assertEqual(result.history, [])

    def test_metrics_log_and_history(self):
        """Test one metrics record per epoch"""
        cfg = self.config("run")
        result = train(cfg, self.dataset, make_rng(4))
        self.assertEqual(len(result.history), 3)
        with open(os.path.join(cfg.out_dir, "metrics.jsonl")) as f:
            records = [json.loads(line) for line in f]
        self.assertEqual([r["epoch"] for r in records], [1, 2, 3])
        self.assertIsNotNone(records[-1]["pred_error"])
        self.assertEqual(set(records[-1]["grad_norms"]), {"theta", "phi", "baseline"})

    def test_deterministic_runs_are_byte_identical(self):
        """Test two deterministic runs write identical artifacts"""
        blobs = []
        for name in ("a", "b"):
            cfg = self.config(name, deterministic=True)
            result = train(cfg, self.dataset, make_rng(6))
            with open(result.checkpoint_path, "rb") as f:
                ckpt = f.read()
            with open(os.path.join(cfg.out_dir, "metrics.jsonl"), "rb") as f:
                blobs.append((ckpt, f.read()))
        self.assertEqual(blobs[0], blobs[1])

    def test_restore_continues_training_state(self):
        """Test a fresh trainer picks up parameters, signal statistics and accumulators"""
        cfg = self.config("restore", epochs=1)
        result = train(cfg, self.dataset, make_rng(4))
        ckpt = load_checkpoint(result.checkpoint_path)
        trainer = NVILTrainer(cfg, cfg.dims_for(3, 2), ObsKind.REAL, make_rng(99))
        trainer.restore(ckpt)
        for name, value in ckpt.parameters().items():
            np.testing.assert_array_equal(trainer.parameters()[name], value)
        self.assertEqual(trainer.stats.kappa, ckpt.stats.kappa)
        self.assertEqual(trainer.stats.tau, ckpt.stats.tau)
        self.assertEqual(trainer.opt.steps, ckpt.opt.steps)
        self.assertGreater(trainer.opt.steps, 0)
        self.assertEqual(set(trainer.opt.accumulators), set(ckpt.opt.accumulators))
        self.assertEqual(trainer.opt.lr, cfg.learning_rate)

    def test_restore_rejects_other_shapes(self):
        """Test a checkpoint from a different architecture is refused"""
        cfg = self.config("small", epochs=0)
        result = train(cfg, self.dataset, make_rng(4))
        wider = self.config("wide", epochs=0, layer_sizes=(6,))
        trainer = NVILTrainer(wider, wider.dims_for(3, 2), ObsKind.REAL, make_rng(4))
        with self.assertRaises(CheckpointError):
            trainer.restore(load_checkpoint(result.checkpoint_path))

    def test_nan_twice_aborts_with_dump(self):
        """Test two non-finite epochs abort training"""
        cfg = self.config("nan")
        trainer = NVILTrainer(cfg, cfg.dims_for(3, 2), ObsKind.REAL, make_rng(1))
        streak = trainer.check_finite(0, float("nan"))
        self.assertEqual(streak, 1)
        with self.assertRaises(NumericAbort) as ctx:
            trainer.check_finite(streak, float("nan"))
        self.assertTrue(os.path.exists(ctx.exception.dump_path))
        self.assertEqual(trainer.check_finite(1, -3.0), 0)


if __name__ == "__main__":
    unittest.main()
