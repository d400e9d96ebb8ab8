"""
Tests for the command-line front end
"""
import contextlib
import io
import json
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from engine.cli import (
    DEFAULT_RAMP_WIDTH,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    RunConfig,
    TransitionSpec,
    main,
)
from engine.errors import ConfigError
from engine.model_core import Dims
from engine.predictor import clear_checkpoint_cache
from engine.rng import make_rng
from utils.checkpoint import load_checkpoint
from utils.data_io import plant_model, save_dataset

SMALL = {
    "model": {"layer_sizes": [3], "factors": 2},
    "train": {"epochs": 2, "batch_size": 2, "subsequence_length": 10, "baseline_hidden": 4,
              "prediction_samples": 2, "holdout_fraction": 0.2},
}


def run_cli(argv):
    """Run main and return (exit code, parsed stdout records)"""
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        code = main(argv)
    return code, [json.loads(line) for line in out.getvalue().splitlines() if line.strip()]


class TestTransitionSchedule(unittest.TestCase):
    """Test generation schedules"""

    def test_default_ramp_spans_sixty_frames(self):
        """Test the 10% to 90% span of the default ramp"""
        Y = TransitionSpec(from_style=0, to_style=1).schedule(200, 2).Y
        t10 = int(np.argmax(Y[:, 1] >= 0.1))
        t90 = int(np.argmax(Y[:, 1] >= 0.9))
        self.assertAlmostEqual(t90 - t10, 60, delta=1)
        self.assertAlmostEqual(Y[100, 1], 0.5)
        self.assertAlmostEqual(2 * DEFAULT_RAMP_WIDTH * np.log(9.0), 60.0)

    def test_hard_switch(self):
        """Test width 0 switches at the center frame"""
        Y = TransitionSpec(0, 1, center_frame=50, width_frames=0).schedule(100, 3).Y
        np.testing.assert_array_equal(Y[49], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(Y[50], [0.0, 1.0, 0.0])

    def test_blend_is_convex(self):
        """Test constant blend rows"""
        schedule = TransitionSpec(blend=[0.25, 0.75]).schedule(10, 2)
        self.assertEqual(schedule.encoding, "convex")
        np.testing.assert_allclose(schedule.Y.sum(axis=1), np.ones(10))
        np.testing.assert_array_equal(schedule.Y[3], [0.25, 0.75])

    def test_invalid_transitions(self):
        """Test out-of-range styles and bad blends name their keys"""
        with self.assertRaises(ConfigError) as ctx:
            TransitionSpec(0, 4).schedule(10, 2)
        self.assertEqual(ctx.exception.paths, ["generate.transition.to_style"])
        with self.assertRaises(ConfigError) as ctx:
            TransitionSpec(blend=[0.5, 0.6]).schedule(10, 2)
        self.assertEqual(ctx.exception.paths, ["generate.transition.blend"])


class TestRunConfig(unittest.TestCase):
    """Test strict configuration parsing"""

    def test_unknown_key(self):
        """Test an unknown key is reported by path"""
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_dict({"model": {"layers": [3]}})
        self.assertEqual(ctx.exception.paths, ["model.layers"])

    def test_wrong_type(self):
        """Test type errors name the key"""
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_dict({"train": {"epochs": "ten"}, "model": {"layer_sizes": [3, "x"]}})
        self.assertEqual(set(ctx.exception.paths), {"train.epochs", "model.layer_sizes[1]"})

    def test_range_errors(self):
        """Test value ranges"""
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_dict({"train": {"decay": 1.5, "mode": "other"}})
        self.assertEqual(set(ctx.exception.paths), {"train.decay", "train.mode"})

    def test_json_round_trip(self):
        """Test a dumped config parses back unchanged"""
        config = RunConfig.from_dict({**SMALL, "generate": {"transition": {"from_style": 0, "to_style": 1}}})
        again = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        self.assertEqual(again, config)
        self.assertEqual(again.model.layer_sizes, (3,))


class TestCommands(unittest.TestCase):
    """Test each subcommand end to end on a planted dataset"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        root = cls.tmp.name
        cls.data = os.path.join(root, "data")
        _, dataset = plant_model(Dims(M=2, S=2, layer_sizes=(3,)), 4.0, make_rng(60), num_sequences=6, T=20)
        save_dataset(dataset, cls.data)
        cls.config = cls.write_config("small.json", SMALL)
        cls.out = os.path.join(root, "run")
        code, cls.train_records = run_cli(["train", "--config", cls.config, "--data", cls.data,
                                           "--out", cls.out, "--seed", "1"])
        assert code == EXIT_OK, cls.train_records
        cls.checkpoint = cls.train_records[-1]["checkpoint"]

    @classmethod
    def tearDownClass(cls):
        clear_checkpoint_cache()
        cls.tmp.cleanup()

    @classmethod
    def write_config(cls, name, payload):
        path = os.path.join(cls.tmp.name, name)
        with open(path, "w") as f:
            json.dump(payload, f)
        return path

    def test_train_records(self):
        """Test one record per epoch plus the summary"""
        epochs = [r for r in self.train_records if "epoch" in r]
        self.assertEqual([r["epoch"] for r in epochs], [1, 2])
        summary = self.train_records[-1]
        self.assertEqual(summary["status"], "ok")
        self.assertEqual(summary["epochs"], 2)
        self.assertTrue(os.path.exists(os.path.join(self.out, "metrics.jsonl")))
        self.assertIn("norm", load_checkpoint(self.checkpoint).meta)

    def test_missing_data_path(self):
        """Test training without data.path exits with a config error naming the key"""
        code, records = run_cli(["train", "--config", self.config, "--out", os.path.join(self.tmp.name, "x")])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["paths"], ["data.path"])

    def test_unknown_config_key(self):
        """Test the CLI reports unknown keys"""
        config = self.write_config("bad.json", {"model": {"layer_sizes": [3], "bogus": 1}})
        code, records = run_cli(["train", "--config", config, "--data", self.data])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["paths"], ["model.bogus"])

    def test_invalid_json(self):
        """Test a config file that is not JSON"""
        path = os.path.join(self.tmp.name, "broken.json")
        with open(path, "w") as f:
            f.write("{nope")
        code, records = run_cli(["gradcheck", "--config", path])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["paths"], ["config"])

    def test_zero_epochs(self):
        """Test --epochs 0 writes an initialized checkpoint"""
        out = os.path.join(self.tmp.name, "zero")
        code, records = run_cli(["train", "--config", self.config, "--data", self.data, "--out", out,
                                 "--epochs", "0"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(records[-1]["epochs"], 0)
        self.assertIsNone(records[-1]["final_elbo"])
        self.assertTrue(os.path.exists(records[-1]["checkpoint"]))

    def test_semi_mode(self):
        """Test semi-supervised training reports accuracy"""
        config = self.write_config("semi.json", {**SMALL, "train": {**SMALL["train"], "mode": "semi", "epochs": 1}})
        code, records = run_cli(["train", "--config", config, "--data", self.data,
                                 "--out", os.path.join(self.tmp.name, "semi")])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("accuracy", records[0])
        self.assertIsNotNone(load_checkpoint(records[-1]["checkpoint"]).classifier)

    def test_generate_transition(self):
        """Test generation writes observations and the schedule"""
        out = os.path.join(self.tmp.name, "gen")
        code, records = run_cli(["generate", "--checkpoint", self.checkpoint, "--out", out, "--T", "30",
                                 "--from-style", "0", "--to-style", "1", "--center", "15", "--width", "0"])
        self.assertEqual(code, EXIT_OK)
        V = pd.read_csv(records[-1]["observations"], header=None).to_numpy()
        Y = pd.read_csv(records[-1]["side_info"], header=None).to_numpy()
        self.assertEqual(V.shape, (30, 2))
        np.testing.assert_array_equal(Y[14], [1.0, 0.0])
        np.testing.assert_array_equal(Y[15], [0.0, 1.0])

    def test_generate_style_out_of_range(self):
        """Test a style the model does not have"""
        code, records = run_cli(["generate", "--checkpoint", self.checkpoint, "--style", "5",
                                 "--out", os.path.join(self.tmp.name, "bad")])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["paths"], ["generate.style"])

    def test_predict(self):
        """Test prediction error on the training data"""
        code, records = run_cli(["predict", "--checkpoint", self.checkpoint, "--data", self.data,
                                 "--num-samples", "2"])
        self.assertEqual(code, EXIT_OK)
        self.assertGreater(records[-1]["mae"], 0.0)
        self.assertEqual(records[-1]["sequences"], 6)

    def test_obs_kind_mismatch(self):
        """Test data declared with another family than the checkpoint"""
        code, records = run_cli(["predict", "--checkpoint", self.checkpoint, "--data", self.data,
                                 "--obs-kind", "binary"])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["paths"], ["data.obs_kind"])

    def test_classify_without_classifier(self):
        """Test classification falls back to an untrained classifier"""
        code, records = run_cli(["classify", "--checkpoint", self.checkpoint, "--data", self.data])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(records[-1]["window"], 2)
        self.assertGreaterEqual(records[-1]["accuracy"], 0.0)

    def test_missing_checkpoint(self):
        """Test an absent checkpoint is an I/O error"""
        code, records = run_cli(["predict", "--checkpoint", os.path.join(self.tmp.name, "none.fctsbn"),
                                 "--data", self.data])
        self.assertEqual(code, EXIT_IO)
        self.assertEqual(records[-1]["kind"], "io")

    def test_bad_numeric_literal(self):
        """Test a malformed blend weight exits with a config error instead of a traceback"""
        code, records = run_cli(["generate", "--checkpoint", self.checkpoint, "--blend", "0.5,x",
                                 "--out", os.path.join(self.tmp.name, "blend")])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(records[-1]["status"], "error")
        self.assertEqual(records[-1]["kind"], "config")

    def test_resume_continues_optimizer(self):
        """Test --resume carries signal statistics and step counts into the next run"""
        before = load_checkpoint(self.checkpoint)
        self.assertIsNotNone(before.opt)
        self.assertIsNotNone(before.stats)
        out = os.path.join(self.tmp.name, "resumed")
        code, records = run_cli(["train", "--config", self.config, "--data", self.data, "--out", out,
                                 "--seed", "1", "--epochs", "1", "--resume", self.checkpoint])
        self.assertEqual(code, EXIT_OK)
        after = load_checkpoint(records[-1]["checkpoint"])
        self.assertGreater(after.opt.steps, before.opt.steps)
        self.assertEqual(set(after.opt.accumulators), set(before.opt.accumulators))

    def test_audit_enum(self):
        """Test the audit command on a few instances"""
        code, records = run_cli(["audit-enum", "--instances", "2", "--samples", "500", "--seed", "3"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(records[-1]["status"], "ok")
        self.assertEqual(len(records), 4)


if __name__ == "__main__":
    unittest.main()
