import numpy as np
from django.test import SimpleTestCase

from adaptation.exceptions import EstimatorError
from adaptation.metrics import (
    INITIAL_TAU, LDA_EPS, BalanceState, ScatterPair, balance_factor, discriminability,
    lda_criterion, mmd, scatter, update_and_balance,
)


class MmdTestCase(SimpleTestCase):
    """Linear MMD between domain feature means."""

    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(10, 3))
        self.assertEqual(mmd(x, x), 0.0)

    def test_single_point_example(self):
        """Test {(0,0)} against {(3,4)} gives 25."""
        self.assertEqual(mmd([[0.0, 0.0]], [[3.0, 4.0]]), 25.0)

    def test_matches_explicit_mean_difference(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n_s, n_t, d = (int(v) for v in rng.integers(1, 51, size=3))
            d = min(d, 8)
            xs, xt = rng.normal(size=(n_s, d)), rng.normal(size=(n_t, d))
            mean_s = [sum(xs[i, k] for i in range(n_s)) / n_s for k in range(d)]
            mean_t = [sum(xt[i, k] for i in range(n_t)) / n_t for k in range(d)]
            expected = sum((mean_s[k] - mean_t[k]) ** 2 for k in range(d))
            self.assertAlmostEqual(mmd(xs, xt), expected, delta=1e-10)

    def test_symmetric_and_translation_invariant(self):
        rng = np.random.default_rng(2)
        xs, xt = rng.normal(size=(7, 4)), rng.normal(size=(9, 4))
        shift = rng.normal(size=4)
        self.assertAlmostEqual(mmd(xs, xt), mmd(xt, xs), places=12)
        self.assertAlmostEqual(mmd(xs, xt), mmd(xs + shift, xt + shift), places=10)
        self.assertGreaterEqual(mmd(xs, xt), 0.0)

    def test_empty_or_mismatched_input(self):
        with self.assertRaises(EstimatorError):
            mmd(np.zeros((0, 2)), np.zeros((3, 2)))
        with self.assertRaises(EstimatorError):
            mmd(np.zeros((2, 2)), np.zeros((3, 3)))


class ScatterTestCase(SimpleTestCase):
    """Between- and within-class scatter."""

    def test_one_dimensional_example(self):
        """Test classes {0,2} and {4,6}: S_w = 4, S_b = 16."""
        pair = scatter([[0.0], [2.0], [4.0], [6.0]], [0, 0, 1, 1])
        self.assertAlmostEqual(pair.within[0, 0], 4.0)
        self.assertAlmostEqual(pair.between[0, 0], 16.0)
        self.assertEqual(pair.class_counts, (2, 2))

    def test_single_class_has_no_between_scatter(self):
        x = np.random.default_rng(3).normal(size=(6, 2))
        pair = scatter(x, np.zeros(6, dtype=int), num_classes=1)
        np.testing.assert_allclose(pair.between, np.zeros((2, 2)), atol=1e-12)

    def test_singleton_classes_have_no_within_scatter(self):
        x = np.random.default_rng(4).normal(size=(3, 2))
        pair = scatter(x, [0, 1, 2])
        np.testing.assert_allclose(pair.within, np.zeros((2, 2)), atol=1e-12)

    def test_total_scatter_decomposition(self):
        """Test S_b + S_w equals the total scatter about the overall mean."""
        rng = np.random.default_rng(5)
        x = rng.normal(size=(40, 3))
        labels = rng.integers(0, 4, size=40)
        pair = scatter(x, labels, num_classes=4)
        centred = x - x.mean(axis=0)
        np.testing.assert_allclose(pair.between + pair.within, centred.T @ centred, atol=1e-10)
        np.testing.assert_allclose(pair.between, pair.between.T, atol=1e-12)

    def test_label_out_of_range(self):
        with self.assertRaises(EstimatorError):
            scatter([[0.0], [1.0]], [0, 3], num_classes=2)


class LdaCriterionTestCase(SimpleTestCase):
    """Ratio-trace discriminability J(W)."""

    def test_zero_between_scatter(self):
        pair = ScatterPair(between=np.zeros((2, 2)), within=np.eye(2), class_counts=(3,))
        self.assertEqual(lda_criterion(pair), 0.0)

    def test_one_dimensional_example(self):
        value = lda_criterion(scatter([[0.0], [2.0], [4.0], [6.0]], [0, 0, 1, 1]))
        self.assertAlmostEqual(value, 16.0 / (4.0 + LDA_EPS), delta=1e-6)
        self.assertAlmostEqual(value, 4.0, delta=1e-4)

    def test_doubling_class_gap_quadruples_value(self):
        near = lda_criterion(scatter([[0.0], [2.0], [4.0], [6.0]], [0, 0, 1, 1]))
        far = lda_criterion(scatter([[0.0], [2.0], [8.0], [10.0]], [0, 0, 1, 1]))
        self.assertAlmostEqual(far / near, 4.0, places=9)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(30, 3))
        labels = rng.integers(0, 3, size=30)
        before = lda_criterion(scatter(x, labels, 3))
        after = lda_criterion(scatter(x + rng.normal(size=3) * 10, labels, 3))
        self.assertAlmostEqual(before, after, delta=1e-6 * max(1.0, before))

    def test_non_positive_eps(self):
        with self.assertRaises(EstimatorError):
            lda_criterion(scatter([[0.0], [1.0]], [0, 1]), eps=0.0)

    def test_pooled_discriminability(self):
        value = discriminability([[0.0], [2.0]], [0, 0], [[4.0], [6.0]], [1, 1], num_classes=2)
        self.assertAlmostEqual(value, 16.0 / (4.0 + LDA_EPS), delta=1e-6)


class BalanceFactorTestCase(SimpleTestCase):
    """Running min-max normalisation and tau."""

    def test_boundaries(self):
        """Test (m, j) corners give 0, 1 and 0.5."""
        self.assertEqual(balance_factor(0.0, 0.0), 0.0)
        self.assertEqual(balance_factor(1.0, 1.0), 1.0)
        self.assertEqual(balance_factor(0.5, 0.5), 0.5)

    def test_undefined_normalisation_is_neutral(self):
        self.assertEqual(balance_factor(None, 0.3), INITIAL_TAU)

    def test_zero_denominator_is_neutral(self):
        self.assertEqual(balance_factor(0.0, 1.0), INITIAL_TAU)

    def test_first_observation_keeps_initial_tau(self):
        state = update_and_balance(BalanceState(), 0.4, 2.0)
        self.assertEqual(state.tau, INITIAL_TAU)
        self.assertIsNone(state.mmd_normalized)
        self.assertEqual(state.observation_count, 1)

    def test_degenerate_history(self):
        """Test m~ = 0 and j~ = 1 falls back to 0.5."""
        state = update_and_balance(BalanceState(), 1.0, 0.0)
        state = update_and_balance(state, 0.0, 1.0)
        self.assertEqual((state.mmd_normalized, state.j_normalized), (0.0, 1.0))
        self.assertEqual(state.tau, INITIAL_TAU)

    def test_alignment_dominates_when_mmd_is_at_its_max(self):
        state = update_and_balance(BalanceState(), 0.0, 0.0)
        state = update_and_balance(state, 2.0, 1.0)
        self.assertEqual(state.tau, 1.0)

    def test_state_is_not_mutated(self):
        initial = BalanceState()
        update_and_balance(initial, 1.0, 1.0)
        self.assertEqual(initial, BalanceState())

    def test_random_updates_stay_in_range(self):
        """Test ten thousand random observations keep tau and normalised values in [0, 1]."""
        rng = np.random.default_rng(7)
        state = BalanceState()
        for m_value, j_value in rng.exponential(scale=3.0, size=(10000, 2)):
            state = update_and_balance(state, float(m_value), float(j_value))
            self.assertTrue(0.0 <= state.tau <= 1.0)
            for value in (state.mmd_normalized, state.j_normalized):
                if value is not None:
                    self.assertTrue(0.0 <= value <= 1.0)
        self.assertEqual(state.observation_count, 10000)

    def test_invalid_observation(self):
        for m_value, j_value in ((float('nan'), 1.0), (1.0, float('inf')), (-1.0, 1.0)):
            with self.subTest(m=m_value, j=j_value), self.assertRaises(EstimatorError):
                update_and_balance(BalanceState(), m_value, j_value)
