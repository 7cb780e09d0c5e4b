import os
import shutil
import tempfile
import unittest

import numpy as np

from data_models import ModelConfig, CalibBatch
from calibration import (
    gen_synthetic, save_calibration, load_calibration, capture_layer_samples, capture_all_layers,
    sequential_replace,
)
from model_container import ContainerFormatError, write_container
from moe_model import gen_model, moe_forward_batch, layer_with_experts


class TestCalibrationBatches(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_synthetic_is_deterministic(self):
        a = gen_synthetic(32, 8, seed=3, scale=0.5)
        b = gen_synthetic(32, 8, seed=3, scale=0.5)
        np.testing.assert_array_equal(a.X, b.X)

    def test_zero_scale(self):
        np.testing.assert_array_equal(gen_synthetic(4, 3, seed=1, scale=0.0).X, 0.0)

    def test_synthetic_moments(self):
        X = gen_synthetic(512, 64, seed=7, scale=1.0).X
        self.assertLess(abs(float(X.mean())), 0.1)
        self.assertLess(abs(float(X.std()) - 1.0), 0.1)

    def test_invalid_sizes(self):
        with self.assertRaises(ValueError):
            gen_synthetic(0, 4, seed=0)
        with self.assertRaises(ValueError):
            gen_synthetic(4, 0, seed=0)

    def test_save_and_load(self):
        path = os.path.join(self.tmp, "calib.mcam")
        batch = gen_synthetic(8, 16, seed=0)
        save_calibration(path, batch)
        loaded = load_calibration(path, d_model=16)
        self.assertEqual(loaded.n, 8)
        np.testing.assert_array_equal(loaded.X, batch.X)

    def test_missing_tensor(self):
        path = os.path.join(self.tmp, "calib.mcam")
        write_container(path, {"Y": np.zeros((2, 2))})
        with self.assertRaisesRegex(ContainerFormatError, "tensor not found"):
            load_calibration(path)

    def test_width_mismatch(self):
        path = os.path.join(self.tmp, "calib.mcam")
        save_calibration(path, gen_synthetic(4, 5, seed=0))
        with self.assertRaises(ContainerFormatError):
            load_calibration(path, d_model=6)

    def test_non_finite_rejected(self):
        path = os.path.join(self.tmp, "calib.mcam")
        X = np.ones((3, 2))
        X[1, 0] = np.nan
        write_container(path, {"X": X})
        with self.assertRaisesRegex(ValueError, "non-finite calibration value"):
            load_calibration(path)
        with self.assertRaises(ValueError):
            CalibBatch(X=np.zeros((0, 3)))


class TestCapture(unittest.TestCase):
    def setUp(self):
        self.config = ModelConfig(n_layers=2, n_experts=4, n_shared=1, d_model=8, d_ff=4, top_k=2)
        self.model = gen_model(self.config, seed=1)
        self.batch = gen_synthetic(16, 8, seed=2)

    def test_first_layer_sees_raw_inputs(self):
        samples = capture_layer_samples(self.model, self.batch, 0)
        np.testing.assert_array_equal(samples.X, self.batch.X)
        np.testing.assert_array_equal(samples.Y, moe_forward_batch(self.model.layers[0], self.batch.X))

    def test_second_layer_sees_first_output(self):
        first = capture_layer_samples(self.model, self.batch, 0)
        second = capture_layer_samples(self.model, self.batch, 1)
        np.testing.assert_array_equal(second.X, first.Y)
        all_layers = capture_all_layers(self.model, self.batch)
        np.testing.assert_array_equal(all_layers[1].X, second.X)
        self.assertEqual([s.layer for s in all_layers], [0, 1])

    def test_layer_out_of_range(self):
        with self.assertRaises(IndexError):
            capture_layer_samples(self.model, self.batch, 2)

    def test_batch_width_mismatch(self):
        with self.assertRaises(ValueError):
            capture_all_layers(self.model, gen_synthetic(4, 5, seed=0))

    def test_sequential_replace_feeds_replaced_prefix(self):
        seen = []

        def zero_out(i, layer, samples):
            seen.append(np.array(samples.X))
            experts = [type(e)(e.w_up * 0, e.w_gate * 0, e.w_down * 0) for e in layer.experts]
            return layer_with_experts(layer, experts)

        replaced = sequential_replace(self.model, self.batch, zero_out)
        np.testing.assert_array_equal(seen[0], self.batch.X)
        np.testing.assert_array_equal(seen[1], 0.0)
        self.assertEqual(replaced.config, self.config)


if __name__ == '__main__':
    unittest.main()
