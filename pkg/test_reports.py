import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from data_models import ModelConfig, EnergyScores, Ranking, ExpertWeights, PruneConfig
from reports import LayerReportCalculator, expert_label, _row_cosines, jaccard, alpha_sweep, calibration_size_sweep
from report_exporter import ReportExporter
from camera_prune import select_retain_set, prune_layer, prune_model
from calibration import gen_synthetic, capture_all_layers
from moe_model import gen_model, layer_with_experts


class TestLayerReportCalculator(unittest.TestCase):
    def setUp(self):
        self.calculator = LayerReportCalculator()
        self.config = ModelConfig(n_layers=2, n_experts=3, n_shared=1, d_model=8, d_ff=2, top_k=1)
        self.model = gen_model(self.config, seed=0)
        self.batch = gen_synthetic(40, 8, seed=1)

    def test_expert_labels(self):
        layer = self.model.layers[0]
        self.assertEqual([expert_label(layer, j) for j in range(4)], ["S0", "E0", "E1", "E2"])

    def test_energy_distribution_drops_outliers(self):
        scores = EnergyScores(energy=np.array([1.0, 5.0, 3.0, 2.0]), alpha=1.0)
        dist = self.calculator.energy_distribution(scores, drop_top=1)
        self.assertEqual(dist["energies"], [3.0, 2.0, 1.0])
        self.assertEqual(dist["summary"]["median"], 2.0)
        self.assertEqual(dist["max_over_median"], 1.5)
        rows = self.calculator.energy_rows(dist)
        self.assertEqual(rows[0], {"rank": 1, "energy": 3.0})
        with self.assertRaises(ValueError):
            self.calculator.energy_distribution(scores, drop_top=4)

    def test_rank_distribution(self):
        layer = self.model.layers[0]
        ranking = Ranking(order=np.array([0, 2, 4, 6, 1, 3, 5, 7]), widths=layer.widths)
        rows = self.calculator.rank_distribution_per_expert(ranking, layer)
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[0]["label"], "S0")
        self.assertEqual(rows[0]["rank_min"], 0.0)
        self.assertEqual(rows[0]["rank_max"], 4.0)
        self.assertEqual(rows[3]["rank_median"], 5.0)
        self.assertAlmostEqual(rows[3]["norm_rank_max"], 1.0)
        with self.assertRaises(ValueError):
            self.calculator.rank_distribution_per_expert(Ranking(order=np.arange(5)), layer)

    def test_prune_ratios(self):
        layer = self.model.layers[0]
        ranking = Ranking(order=np.array([0, 1, 2, 3, 4, 5, 6, 7]), widths=layer.widths)
        retain = select_retain_set(ranking, 0.5, 8)
        rows = self.calculator.per_expert_prune_ratio(retain, layer)
        self.assertEqual([r["prune_ratio"] for r in rows], [0.0, 0.0, 1.0, 1.0])
        pruned = prune_layer(layer, retain)
        self.assertEqual(self.calculator.width_prune_ratio(layer, pruned), rows)
        again = self.calculator.width_prune_ratio(pruned, pruned)
        self.assertIsNone(again[3]["prune_ratio"])
        with self.assertRaises(ValueError):
            self.calculator.width_prune_ratio(pruned, layer)

    def test_identical_models_have_no_error(self):
        records = self.calculator.approx_error(self.model, self.model, self.batch, threads=2)
        self.assertEqual([r.layer for r in records], [0, 1])
        for r in records:
            self.assertEqual(r.l2, 0.0)
            self.assertEqual(r.cosine, 1.0)
        rows = self.calculator.approx_error_rows(records)
        self.assertEqual(set(rows[0]), {"layer", "l2_sum_over_tokens", "mean_cosine"})

    def test_approx_error_detects_change(self):
        layer = self.model.layers[1]
        scaled = [ExpertWeights(e.w_up, e.w_gate, e.w_down * 2.0) for e in layer.experts]
        other = self.model.replace_layer(1, layer_with_experts(layer, scaled))
        records = self.calculator.approx_error(self.model, other, self.batch, layers=[1])
        self.assertEqual(len(records), 1)
        self.assertGreater(records[0].l2, 0.0)
        self.assertAlmostEqual(records[0].cosine, 1.0, places=5)

    def test_approx_error_rejects_bad_inputs(self):
        with self.assertRaises(IndexError):
            self.calculator.approx_error(self.model, self.model, self.batch, layers=[2])
        other = gen_model(ModelConfig(n_layers=2, n_experts=4, n_shared=1, d_model=8, d_ff=2, top_k=1), seed=0)
        with self.assertRaises(ValueError):
            self.calculator.approx_error(self.model, other, self.batch)

    def test_negated_layer_has_cosine_minus_one(self):
        layer = self.model.layers[1]
        negated = [ExpertWeights(e.w_up, e.w_gate, -e.w_down) for e in layer.experts]
        other = self.model.replace_layer(1, layer_with_experts(layer, negated))
        records = self.calculator.approx_error(self.model, other, self.batch)
        self.assertEqual(records[0].cosine, 1.0)
        self.assertAlmostEqual(records[1].cosine, -1.0, places=9)
        self.assertGreater(records[1].l2, 0.0)

    def test_prune_ratio_varies_across_experts(self):
        config = ModelConfig(n_layers=2, n_experts=8, n_shared=0, d_model=32, d_ff=16, top_k=2)
        model = gen_model(config, seed=1)
        batch = gen_synthetic(256, 32, seed=2)
        retained = []
        prune_model(model, batch, PruneConfig(lam=0.4), on_layer=lambda i, layer, ranking, scores, retain:
                    retained.append((layer, retain)))
        for layer, retain in retained:
            ratios = [row["prune_ratio"] for row in self.calculator.per_expert_prune_ratio(retain, layer)]
            self.assertGreater(np.std(ratios), 0.0)
            self.assertAlmostEqual(float(np.mean(ratios)), 51 / 128, delta=1e-12)

    def test_lossless_token_fraction(self):
        same = self.calculator.lossless_token_fraction(self.model, self.model, self.batch)
        self.assertEqual([(r["intact_fraction"], r["alive_fraction"]) for r in same], [(1.0, 1.0)] * 2)

        layer = self.model.layers[0]
        widths = [2, 1, 0, 2]
        experts = [ExpertWeights(e.w_up[:w], e.w_gate[:w], e.w_down[:, :w]) for e, w in zip(layer.experts, widths)]
        other = self.model.replace_layer(0, layer_with_experts(layer, experts))
        rows = self.calculator.lossless_token_fraction(self.model, other, self.batch)
        self.assertLess(rows[0]["intact_fraction"], 1.0)
        self.assertLessEqual(rows[0]["intact_fraction"], rows[0]["alive_fraction"])
        self.assertEqual(rows[1]["intact_fraction"], 1.0)

    def test_row_cosines(self):
        A = np.array([[1.0, 0.0], [1.0, 2.0], [0.0, 0.0], [3.0, 4.0]])
        B = np.array([[0.0, 1.0], [-1.0, -2.0], [1.0, 1.0], [3.0, 4.0]])
        np.testing.assert_array_equal(_row_cosines(A, B), [0.0, -1.0, 0.0, 1.0])


class TestSweeps(unittest.TestCase):
    def setUp(self):
        config = ModelConfig(n_layers=2, n_experts=4, n_shared=0, d_model=12, d_ff=6, top_k=2)
        self.model = gen_model(config, seed=4)
        self.samples = capture_all_layers(self.model, gen_synthetic(40, 12, seed=5))

    def test_jaccard(self):
        self.assertEqual(jaccard([1, 2, 3], [2, 3, 4]), 0.5)
        self.assertEqual(jaccard([], []), 1.0)
        self.assertEqual(jaccard(np.array([0, 1]), [2]), 0.0)

    def test_alpha_sweep(self):
        rows = alpha_sweep(self.model.layers[1], self.samples[1], [0.0, 0.5, 1.0], 0.25)
        self.assertEqual([r["alpha"] for r in rows], [0.0, 0.5, 1.0])
        self.assertEqual(rows[0]["jaccard_vs_plain_energy"], 1.0)
        for row in rows:
            self.assertEqual(row["layer"], 1)
            self.assertEqual(row["kept"], 18)
            self.assertGreaterEqual(row["l2_error"], 0.0)
            self.assertGreater(row["jaccard_vs_plain_energy"], 0.0)

    def test_alpha_sweep_without_pruning_is_exact(self):
        rows = alpha_sweep(self.model.layers[0], self.samples[0], [0.3], 0.0)
        self.assertEqual(rows[0]["l2_error"], 0.0)

    def test_calibration_size_sweep(self):
        rows = calibration_size_sweep(self.model.layers[0], self.samples[0], [40, 8, 20], 0.5, 1.0)
        self.assertEqual([r["n"] for r in rows], [8, 20, 40])
        self.assertEqual(rows[-1]["jaccard_vs_largest"], 1.0)
        self.assertTrue(all(0.0 <= r["jaccard_vs_largest"] <= 1.0 for r in rows))
        with self.assertRaises(ValueError):
            calibration_size_sweep(self.model.layers[0], self.samples[0], [41], 0.5, 1.0)
        with self.assertRaises(ValueError):
            calibration_size_sweep(self.model.layers[0], self.samples[0], [], 0.5, 1.0)


class TestReportExporter(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.exporter = ReportExporter()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_csv_string(self):
        rows = [{"layer": 0, "ratio": 0.25, "note": None}, {"layer": 1, "ratio": np.float64(0.1), "note": "x"}]
        text = self.exporter.export_to_csv_string(rows, {"table": "t.csv", "description": "d", "seed": 3})
        lines = text.splitlines()
        self.assertEqual(lines[0], "# Micro-expert compression report")
        self.assertIn("# Table: t.csv", lines)
        self.assertIn("#   seed: 3", lines)
        self.assertEqual(lines[-3:], ["layer,ratio,note", "0,0.25,", "1,0.1,x"])

    def test_csv_rejects_unknown_columns(self):
        with self.assertRaises(ValueError):
            self.exporter.export_to_csv_string([{"a": 1}, {"a": 2, "b": 3}])

    def test_empty_csv_not_written(self):
        path = os.path.join(self.tmp, "empty.csv")
        self.assertFalse(self.exporter.export_to_csv([], path))
        self.assertFalse(os.path.exists(path))

    def test_json_is_deterministic(self):
        path = os.path.join(self.tmp, "sub", "r.json")
        data = {"b": np.int64(2), "a": np.array([1.5, 2.5]), "c": frozenset({3, 1})}
        self.assertTrue(self.exporter.export_to_json(data, path))
        with open(path) as f:
            text = f.read()
        self.assertEqual(text, self.exporter.export_to_json_string(data))
        self.assertEqual(json.loads(text), {"a": [1.5, 2.5], "b": 2, "c": [1, 3]})
        self.assertLess(text.index('"a"'), text.index('"b"'))


if __name__ == '__main__':
    unittest.main()
