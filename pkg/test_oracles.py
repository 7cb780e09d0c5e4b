import itertools
import unittest
from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st

from oracles import (
    MAX_BRUTEFORCE_MICRO, BoundViolationError,
    subset_error, cssp_bruteforce, greedy_error, svd_rank_k_error, singular_values,
    lemma_bound, theorem_check, p_lossless_exact, p_lossless, lossless_table_rows,
    random_instance, sized_instance, triangle_bound,
    lemma_sweep, theorem_sweep, sandwich_sweep, run_bound_sweeps,
)


class TestSubsetSelection(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(42)
        self.phi = rng.standard_normal((4, 6))
        self.W = rng.standard_normal((6, 3))

    def test_keep_everything(self):
        subset, error = cssp_bruteforce(self.phi, self.W, 6)
        self.assertEqual(subset, tuple(range(6)))
        self.assertEqual(error, 0.0)

    def test_single_nonzero_column(self):
        phi = np.zeros((5, 4))
        phi[:, 2] = [1.0, -2.0, 0.5, 3.0, 1.0]
        subset, error = cssp_bruteforce(phi, np.ones((4, 3)), 1)
        self.assertEqual(subset, (2,))
        self.assertAlmostEqual(error, 0.0, places=12)

    def test_matches_direct_enumeration(self):
        errors = {s: subset_error(self.phi, self.W, s) for s in itertools.combinations(range(6), 3)}
        self.assertEqual(len(errors), 20)
        subset, error = cssp_bruteforce(self.phi, self.W, 3)
        self.assertAlmostEqual(error, min(errors.values()), places=9)
        self.assertAlmostEqual(errors[subset], error, places=9)
        self.assertLessEqual(error, greedy_error(self.phi, self.W, 3) + 1e-9)

    def test_threads_pick_same_subset(self):
        rng = np.random.default_rng(1)
        phi, W = rng.standard_normal((8, 12)), rng.standard_normal((12, 4))
        self.assertEqual(cssp_bruteforce(phi, W, 5, threads=1)[0], cssp_bruteforce(phi, W, 5, threads=4)[0])

    def test_uneven_chunks_cover_every_subset(self):
        rng = np.random.default_rng(7)
        phi, W = rng.standard_normal((6, 7)), rng.standard_normal((7, 3))
        errors = {s: subset_error(phi, W, s) for s in itertools.combinations(range(7), 3)}
        expected = min(errors, key=lambda s: (errors[s], s))
        for threads in (1, 2, 3, 5):
            subset, error = cssp_bruteforce(phi, W, 3, threads=threads)
            self.assertAlmostEqual(error, errors[expected], places=9)
            self.assertAlmostEqual(errors[subset], errors[expected], places=9)

    def test_ties_resolve_to_first_subset(self):
        phi = np.ones((3, 4))
        W = np.zeros((4, 2))
        self.assertEqual(cssp_bruteforce(phi, W, 2)[0], (0, 1))

    def test_guard_and_bounds(self):
        n = MAX_BRUTEFORCE_MICRO + 1
        with self.assertRaises(ValueError):
            cssp_bruteforce(np.ones((2, n)), np.ones((n, 2)), 3)
        with self.assertRaises(ValueError):
            cssp_bruteforce(self.phi, self.W, 0)
        with self.assertRaises(ValueError):
            cssp_bruteforce(self.phi, np.ones((5, 3)), 2)


class TestSvdOracle(unittest.TestCase):
    def test_diagonal(self):
        error, s = svd_rank_k_error(np.diag([3.0, 2.0, 1.0]), 1)
        self.assertAlmostEqual(error, 5.0, places=12)
        np.testing.assert_allclose(s, [3.0, 2.0, 1.0])

    def test_rank_extremes(self):
        Y = np.random.default_rng(0).standard_normal((5, 3))
        self.assertAlmostEqual(svd_rank_k_error(Y, 3)[0], 0.0, places=12)
        self.assertAlmostEqual(svd_rank_k_error(Y, 0)[0], float(np.sum(Y ** 2)), places=10)
        with self.assertRaises(ValueError):
            svd_rank_k_error(Y, 4)

    def test_empty_matrix(self):
        self.assertEqual(singular_values(np.zeros((0, 3))).size, 0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), rows=st.integers(1, 12), cols=st.integers(1, 12))
    def test_spectrum_carries_frobenius_norm(self, seed, rows, cols):
        Y = np.random.default_rng(seed).standard_normal((rows, cols))
        s = singular_values(Y)
        self.assertAlmostEqual(float(np.sum(s ** 2)), float(np.sum(Y ** 2)), delta=1e-9 * float(np.sum(Y ** 2)))


class TestLemma(unittest.TestCase):
    def test_empty_removal(self):
        phi, W = sized_instance(np.random.default_rng(0), 6, 4, 3)
        self.assertEqual(lemma_bound(phi, W, []), (0.0, 0.0))

    def test_single_removal_is_tight(self):
        phi, W = sized_instance(np.random.default_rng(1), 6, 4, 3)
        epsilon, epsilon_sup = lemma_bound(phi, W, [2])
        self.assertAlmostEqual(epsilon, epsilon_sup, delta=1e-9 * epsilon_sup)

    def test_index_out_of_range(self):
        phi, W = sized_instance(np.random.default_rng(0), 6, 4, 3)
        with self.assertRaises(IndexError):
            lemma_bound(phi, W, [4])

    def test_orthogonal_columns_meet_bound_exactly(self):
        phi, W = sized_instance(np.random.default_rng(2), 10, 6, 4, orthogonal=True)
        epsilon, epsilon_sup = lemma_bound(phi, W, [0, 3, 5])
        self.assertAlmostEqual(epsilon, epsilon_sup, delta=1e-9 * epsilon_sup)

    def test_cross_terms_can_exceed_per_column_bound(self):
        # two identical removed columns: the error is 4x one column's energy, the sum is 2x
        phi = np.array([[1.0, 1.0], [2.0, 2.0]])
        W = np.array([[1.0, 0.0], [1.0, 0.0]])
        with self.assertRaises(BoundViolationError):
            lemma_bound(phi, W, [0, 1])
        epsilon, epsilon_sup = lemma_bound(phi, W, [0, 1], check=False)
        self.assertAlmostEqual(epsilon, 20.0)
        self.assertAlmostEqual(epsilon_sup, 10.0)
        self.assertAlmostEqual(triangle_bound(phi, W, [0, 1]), 20.0)

    def test_orthogonal_instance_needs_enough_rows(self):
        with self.assertRaises(ValueError):
            sized_instance(np.random.default_rng(0), 3, 5, 2, orthogonal=True)

    def test_random_instance_sizes(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            phi, W = random_instance(rng, orthogonal=True)
            self.assertGreaterEqual(phi.shape[0], phi.shape[1])
            self.assertEqual(phi.shape[1], W.shape[0])
            gram = phi.T @ phi
            off = gram - np.diag(np.diag(gram))
            self.assertLess(np.max(np.abs(off)), 1e-8 * np.max(np.abs(gram)))


class TestTheorem(unittest.TestCase):
    def test_report_fields(self):
        phi, W = sized_instance(np.random.default_rng(5), 12, 8, 5, orthogonal=True)
        report = theorem_check(phi, W, 4)
        self.assertEqual(report.k, 4)
        self.assertLessEqual(report.epsilon, report.epsilon_sup * (1 + 1e-9))
        self.assertLessEqual(report.epsilon, (report.svd_error + report.delta) * (1 + 1e-6) + 1e-9)
        self.assertGreaterEqual(report.delta, 0.0)
        self.assertEqual(len(report.singular_values), 5)

    def test_keep_bounds(self):
        phi, W = sized_instance(np.random.default_rng(5), 6, 4, 3)
        with self.assertRaises(ValueError):
            theorem_check(phi, W, 4)
        with self.assertRaises(ValueError):
            theorem_check(phi, W, 0)


class TestLosslessProbability(unittest.TestCase):
    def test_exact_values(self):
        self.assertEqual(p_lossless_exact(8, 2, 0.25), Fraction(15, 28))
        self.assertEqual(p_lossless_exact(16, 2, 0.25), Fraction(11, 20))
        self.assertEqual(p_lossless_exact(8, 2, 0.0), 1)

    def test_infeasible_returns_zero(self):
        probability, feasible = p_lossless(4, 3, 0.5)
        self.assertEqual(probability, 0.0)
        self.assertFalse(feasible)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            p_lossless(8, 9, 0.25)
        with self.assertRaises(ValueError):
            p_lossless(8, 2, 1.0)
        with self.assertRaises(ValueError):
            p_lossless(0, 1, 0.25)

    def test_table(self):
        rows = lossless_table_rows()
        self.assertEqual([r["p_lossless_percent"] for r in rows], [53.57, 55.00, 30.62, 9.27, 17.24])
        self.assertEqual(rows[0]["r_act"], 0.25)
        self.assertEqual(rows[2]["experts"], "2+64")

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 64), data=st.data())
    def test_monotone_in_prune_fraction(self, n, data):
        k = data.draw(st.integers(1, n))
        low = p_lossless_exact(n, k, 0.1)
        high = p_lossless_exact(n, k, 0.5)
        self.assertGreaterEqual(low, high)
        self.assertLessEqual(low, 1)


class TestSweeps(unittest.TestCase):
    def test_lemma_sweep(self):
        summary = lemma_sweep(60, seed=0)
        self.assertTrue(summary["passed"], summary)
        self.assertLessEqual(summary["max_tightness"], 1.0 + 1e-6)

    def test_theorem_sweep(self):
        summary = theorem_sweep(60, seed=1)
        self.assertTrue(summary["passed"], summary)

    def test_sandwich_sweep(self):
        summary = sandwich_sweep(20, seed=2, max_micro=10, threads=2)
        self.assertTrue(summary["passed"], summary)

    def test_run_bound_sweeps(self):
        summary = run_bound_sweeps(20, seed=7, sandwich_trials=6)
        self.assertTrue(summary["passed"])
        self.assertEqual(summary["sandwich"]["trials"], 6)
        with self.assertRaises(ValueError):
            run_bound_sweeps(0, seed=7)


if __name__ == '__main__':
    unittest.main()
