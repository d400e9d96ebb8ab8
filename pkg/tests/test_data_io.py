"""
Unit tests for dataset loading, normalization and planted data
"""
import os
import tempfile
import unittest

import numpy as np

from engine.errors import DatasetError
from engine.model_core import Dims, ObsKind
from engine.rng import make_rng
from utils.data_io import (
    NormStats,
    SequenceDataset,
    SequenceRecord,
    denormalize,
    labels_to_schedule,
    load_dataset,
    normalize,
    plant_model,
    save_dataset,
)


class TestLoading(unittest.TestCase):
    """Test the on-disk layout"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        with open(os.path.join(self.dir, name), "w") as f:
            f.write(text)

    def test_empty_directory(self):
        """Test an empty directory loads as an empty dataset"""
        dataset = load_dataset(self.dir)
        self.assertEqual(len(dataset), 0)
        self.assertEqual(dataset.M, 0)

    def test_missing_directory(self):
        """Test a path that does not exist"""
        with self.assertRaises(DatasetError):
            load_dataset(os.path.join(self.dir, "nope"))

    def test_round_trip(self):
        """Test save then load reproduces values, side information and labels"""
        rng = make_rng(0)
        records = [
            SequenceRecord("a", rng.normal(size=(5, 3)), np.eye(2)[[0, 0, 1, 1, 1]], [(0, 0), (2, 1)]),
            SequenceRecord("b", rng.normal(size=(4, 3)), np.eye(2)[[1, 1, 1, 1]]),
        ]
        save_dataset(SequenceDataset(records), self.dir)
        loaded = load_dataset(self.dir)
        self.assertEqual([r.id for r in loaded], ["a", "b"])
        np.testing.assert_array_equal(loaded.records[0].V, records[0].V)
        np.testing.assert_array_equal(loaded.records[1].Y, records[1].Y)
        self.assertEqual(loaded.records[0].labels, [(0, 0), (2, 1)])
        self.assertEqual(loaded.S, 2)
        self.assertEqual(len(loaded.labeled), 1)

    def test_non_numeric_cell_names_line(self):
        """Test a malformed cell cites file and line"""
        self.write("s1.csv", "1,2\n3,x\n")
        with self.assertRaises(DatasetError) as ctx:
            load_dataset(self.dir)
        self.assertIn("line 2", str(ctx.exception))
        self.assertIn("s1.csv", str(ctx.exception))

    def test_short_row_names_line(self):
        """Test a row with a missing value"""
        self.write("s1.csv", "1,2\n3,4\n5\n")
        with self.assertRaises(DatasetError) as ctx:
            load_dataset(self.dir)
        self.assertIn("line 3", str(ctx.exception))

    def test_binary_check(self):
        """Test non-binary values under the binary family"""
        self.write("s1.csv", "0,1\n1,2\n")
        with self.assertRaises(DatasetError):
            load_dataset(self.dir, obs_kind="binary")
        self.assertEqual(load_dataset(self.dir, obs_kind="count").obs_kind, ObsKind.COUNT)

    def test_labels_unknown_sequence(self):
        """Test a label row for a missing sequence"""
        self.write("s1.csv", "1,2\n3,4\n")
        self.write("labels.csv", "sequence_id,start_frame,style_index\nzzz,0,1\n")
        with self.assertRaises(DatasetError) as ctx:
            load_dataset(self.dir)
        self.assertIn("line 2", str(ctx.exception))

    def test_labels_to_schedule(self):
        """Test label windows cover the sequence"""
        schedule = labels_to_schedule([(0, 1), (3, 0)], 5, 2)
        np.testing.assert_array_equal(schedule.Y.argmax(axis=1), [1, 1, 1, 0, 0])
        with self.assertRaises(ValueError):
            labels_to_schedule([(1, 0)], 5, 2)


class TestNormalization(unittest.TestCase):
    """Test per-dimension scaling"""

    def setUp(self):
        rng = make_rng(1)
        self.dataset = SequenceDataset([
            SequenceRecord("a", rng.normal(3.0, 2.0, size=(400, 2))),
            SequenceRecord("b", rng.normal(3.0, 2.0, size=(400, 2))),
        ])

    def test_zero_mean_unit_variance(self):
        """Test normalized frames"""
        normed, stats = normalize(self.dataset)
        frames = np.vstack([r.V for r in normed])
        np.testing.assert_allclose(frames.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(frames.std(axis=0), 1.0, atol=1e-12)
        self.assertEqual(stats.mean.shape, (2,))

    def test_round_trip(self):
        """Test denormalize inverts normalize"""
        normed, stats = normalize(self.dataset)
        back = denormalize(normed, stats)
        np.testing.assert_allclose(back.records[0].V, self.dataset.records[0].V, rtol=1e-12)
        restored = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(restored.std, stats.std)

    def test_train_split_statistics(self):
        """Test statistics fitted on a subset are applied to every record"""
        _, stats = normalize(self.dataset, train_records=self.dataset.records[:1])
        np.testing.assert_allclose(stats.mean, self.dataset.records[0].V.mean(axis=0))

    def test_constant_dimension(self):
        """Test a constant dimension passes through with a warning"""
        V = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
        dataset = SequenceDataset([SequenceRecord("c", V)])
        with self.assertWarns(UserWarning):
            normed, stats = normalize(dataset)
        np.testing.assert_array_equal(normed.records[0].V[:, 0], np.full(10, 4.0))
        self.assertTrue(stats.constant[0])

    def test_non_real_rejected(self):
        """Test normalization of binary data"""
        dataset = SequenceDataset([SequenceRecord("b", np.ones((3, 2)))], obs_kind=ObsKind.BINARY)
        with self.assertRaises(ValueError):
            normalize(dataset)


class TestPlantedModel(unittest.TestCase):
    """Test the planted ground truth"""

    def test_zero_separation(self):
        """Test styles share an emission bias when separation is 0"""
        theta, dataset = plant_model(Dims(M=2, S=2, layer_sizes=(3,)), 0.0, make_rng(2), num_sequences=4, T=10)
        np.testing.assert_array_equal(theta.emission.C[:, 0], theta.emission.C[:, 1])
        self.assertEqual(len(dataset), 4)
        self.assertEqual(dataset.records[1].labels, [(0, 1)])

    def test_separable_styles(self):
        """Test style means sit far apart for a large separation"""
        _, dataset = plant_model(Dims(M=2, S=2, layer_sizes=(3,)), 6.0, make_rng(3), num_sequences=4, T=200)
        style0 = np.vstack([r.V for r in dataset.records[0::2]]).mean()
        style1 = np.vstack([r.V for r in dataset.records[1::2]]).mean()
        self.assertGreater(style0 - style1, 4.0)

    def test_deterministic(self):
        """Test the same seed plants the same data"""
        dims = Dims(M=2, S=2, layer_sizes=(3,), factors=2)
        _, a = plant_model(dims, 2.0, make_rng(4), num_sequences=3, T=8)
        _, b = plant_model(dims, 2.0, make_rng(4), num_sequences=3, T=8)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.V, rb.V)


if __name__ == "__main__":
    unittest.main()
