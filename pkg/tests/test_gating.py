import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avedit.gating import GateConfig, calibrate_threshold, frame_similarity, gate_features


class TestFrameSimilarity:
    def test_identical_rows(self):
        f = np.random.default_rng(0).normal(size=(6, 8))
        np.testing.assert_allclose(frame_similarity(f, f), np.ones(6), atol=1e-12)

    def test_orthogonal_rows(self):
        f_a = np.tile([1.0, 0.0], (4, 1))
        f_v = np.tile([0.0, 1.0], (4, 1))
        np.testing.assert_allclose(frame_similarity(f_a, f_v), np.zeros(4))

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(1)
        f_a = rng.normal(size=(5, 8))
        f_v = rng.normal(size=(5, 8))
        scales = rng.uniform(0.1, 10.0, size=(5, 1))
        np.testing.assert_allclose(
            frame_similarity(f_a * scales, f_v),
            frame_similarity(f_a, f_v),
            atol=1e-12,
        )

    def test_zero_row_convention(self):
        f_a = np.zeros((2, 4))
        f_v = np.ones((2, 4))
        np.testing.assert_array_equal(frame_similarity(f_a, f_v), [0.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frame_similarity(np.ones((3, 4)), np.ones((4, 4)))


class TestCalibrateThreshold:
    def test_odd_median(self):
        assert calibrate_threshold([np.array([0.1, 0.3, 0.5])]) == 0.3

    def test_even_median_averages_center(self):
        assert calibrate_threshold([np.array([0.0, 0.2, 0.6, 1.0])]) == pytest.approx(0.4)

    def test_duplicating_corpus_is_invariant(self):
        sims = [np.array([0.1, 0.5, 0.7]), np.array([-0.2, 0.9])]
        assert calibrate_threshold(sims) == calibrate_threshold(sims + sims)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            calibrate_threshold([])

    def test_median_coverage_half(self):
        rng = np.random.default_rng(2)
        sims = rng.uniform(-1, 1, size=801)
        r = calibrate_threshold([sims])
        kept = np.mean(sims > r)
        assert abs(kept - 0.5) <= 1 / len(sims)


class TestGateFeatures:
    def test_all_above_threshold(self):
        f = np.random.default_rng(3).normal(size=(4, 6))
        gated, kept = gate_features(f, np.full(4, 0.9), 0.3, np.zeros(6))
        np.testing.assert_array_equal(gated, f)
        assert kept.all()

    def test_all_at_or_below_threshold_nulled(self):
        f = np.random.default_rng(4).normal(size=(4, 6))
        null = np.full(6, -1.0)
        gated, kept = gate_features(f, np.full(4, 0.3), 0.3, null)
        np.testing.assert_array_equal(gated, np.tile(null, (4, 1)))
        assert not kept.any()

    def test_ties_are_gated_out(self):
        f = np.ones((2, 3))
        gated, kept = gate_features(f, np.array([0.3, 0.30001]), 0.3, np.zeros(3))
        assert list(kept) == [False, True]

    def test_idempotent_on_kept_rows(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(6, 4))
        sims = rng.uniform(-1, 1, size=6)
        null = rng.normal(size=4)
        once, kept = gate_features(f, sims, 0.0, null)
        twice, kept2 = gate_features(once, sims, 0.0, null)
        np.testing.assert_array_equal(once[kept], twice[kept])
        np.testing.assert_array_equal(kept, kept2)

    @given(st.floats(-1, 1), st.floats(-1, 1))
    @settings(max_examples=30, deadline=None)
    def test_kept_count_monotone_in_threshold(self, r1, r2):
        rng = np.random.default_rng(6)
        sims = rng.uniform(-1, 1, size=32)
        f = rng.normal(size=(32, 4))
        lo, hi = min(r1, r2), max(r1, r2)
        _, kept_lo = gate_features(f, sims, lo, np.zeros(4))
        _, kept_hi = gate_features(f, sims, hi, np.zeros(4))
        assert kept_hi.sum() <= kept_lo.sum()

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            gate_features(np.ones((3, 4)), np.ones(2), 0.0, np.zeros(4))
        with pytest.raises(ValueError):
            gate_features(np.ones((3, 4)), np.ones(3), 0.0, np.zeros(5))


def test_gate_config_threshold_range():
    GateConfig(r=0.3)
    with pytest.raises(ValueError):
        GateConfig(r=1.5)
