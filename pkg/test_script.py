import unittest
import os
import json
import shutil
import tempfile
from unittest import mock

from cli import run, manifest_path
from model_container import load_model


class TestPipeline(unittest.TestCase):
    """gen-model -> gen-calib -> rank -> prune -> quantize -> report, then verify."""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.env = mock.patch.dict(os.environ, {"CAMERA_CONFIG": os.path.join(self.tmp, "config.json")})
        self.env.start()
        for name in ("CAMERA_SEED", "CAMERA_THREADS"):
            os.environ.pop(name, None)

    def tearDown(self):
        self.env.stop()
        shutil.rmtree(self.tmp, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def run_ok(self, *argv):
        self.assertEqual(run(list(argv) + ["--quiet"]), 0, " ".join(argv))

    def test_end_to_end(self):
        model, calib = self.path("model.mcam"), self.path("calib.mcam")
        self.run_ok("gen-model", "--layers", "4", "--experts", "8", "--d-model", "64", "--d-ff", "32",
                    "--top-k", "2", "--seed", "0", "--out", model)
        self.run_ok("gen-calib", "--n", "512", "--d-model", "64", "--seed", "1", "--out", calib)

        ranking = self.path("ranking.json")
        self.run_ok("rank", "--model", model, "--calib", calib, "--alpha", "1.0", "--out", ranking)
        with open(ranking) as f:
            ranked = json.load(f)
        self.assertEqual(len(ranked["layers"]), 4)
        self.assertEqual(ranked["layers"][0]["n_micro"], 256)

        pruned = self.path("pruned.mcam")
        self.run_ok("prune", "--model", model, "--calib", calib, "--lambda", "0.25", "--out", pruned,
                    "--report", self.path("prune.json"))
        self.assertTrue(all(layer.n_micro == 192 for layer in load_model(pruned).layers))

        quantized = self.path("quantized.mcam")
        self.run_ok("quantize", "--model", pruned, "--calib", calib, "--bits", "3,2,1", "--ratios", "0.2,0.6,0.2",
                    "--group", "32", "--variant", "q", "--out", quantized, "--report", self.path("quant.json"))
        with open(self.path("quant.json")) as f:
            report = json.load(f)
        self.assertAlmostEqual(report["average_bits"], 3.0)
        self.assertTrue(all(layer["precision_consistent"] for layer in report["layers"]))

        with open(manifest_path(quantized)) as f:
            manifest = json.load(f)
        self.assertEqual(manifest["subcommand"], "quantize")
        self.assertEqual(set(manifest["input_digests"]), {pruned, calib})

        out_dir = self.path("report")
        self.run_ok("report", "--model", model, "--compare", pruned, "--calib", calib, "--out-dir", out_dir)
        for name in ("energy_distribution.csv", "rank_distribution.csv", "approx_error.csv",
                     "prune_ratio.csv", "lossless_tokens.csv", "report.json"):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)

        self.run_ok("verify", "--seed", "1", "--trials", "100", "--report", self.path("verify.json"))
        with open(self.path("verify.json")) as f:
            self.assertTrue(json.load(f)["passed"])


if __name__ == '__main__':
    unittest.main()
