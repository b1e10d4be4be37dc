import numpy as np
import pytest

from nlccam.cam_engine import (
    ccam,
    ccam_naive,
    class_map,
    force_top,
    gt_known_ccam,
    rank_classes,
)
from nlccam.combiner import CAM, Polynomial, TopBottom
from nlccam.tensor_core import DimensionError, softmax, spatial_mean

ALL_FNS = [CAM, TopBottom(1, 1), TopBottom(0, 2), TopBottom(2, 3)] + [Polynomial(e) for e in range(4)]


@pytest.fixture
def instance():
    rng = np.random.default_rng(0)
    return rng.normal(size=(6, 4, 5)), rng.normal(size=(6, 7))


class TestRanking:
    def test_hand_example(self):
        r = rank_classes([2.0, 1.0], [[1, 0, 0], [0, 1, 0]])
        assert r.scores.tolist() == [2, 1, 0]
        assert r.order == (0, 1, 2)

    def test_ties_by_class_index(self):
        r = rank_classes([1.0, 1.0], np.ones((2, 5)))
        assert r.order == (0, 1, 2, 3, 4)

    def test_probability_order(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        assert sorted(r.order) == list(range(7))
        assert np.all(np.diff(r.probs) <= 0)
        assert abs(r.probs.sum() - 1) <= 1e-12
        np.testing.assert_allclose(r.probs, softmax(r.scores)[list(r.order)], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rank_classes(np.ones(3), np.ones((2, 4)))


class TestClassMap:
    def test_difference_of_channels(self):
        f = np.random.default_rng(1).normal(size=(2, 3, 3))
        w = np.array([[0.0, 1.0], [0.0, -1.0]])
        np.testing.assert_allclose(class_map(f, w, 1), f[0] - f[1], atol=1e-15)
        assert not class_map(f, w, 0).any()

    def test_gap_commutes_with_scores(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        for c in range(7):
            assert class_map(f, w, c).mean() == pytest.approx(r.scores[c], abs=1e-12)

    def test_class_out_of_range(self, instance):
        f, w = instance
        with pytest.raises(ValueError):
            class_map(f, w, 7)


class TestCcam:
    def test_cam_reduction_exact(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        np.testing.assert_allclose(ccam(f, w, r, CAM), class_map(f, w, r.order[0]), atol=1e-13)

    def test_first_minus_last(self):
        rng = np.random.default_rng(2)
        f, w = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3))
        r = rank_classes(spatial_mean(f), w)
        expected = class_map(f, w, r.order[0]) - class_map(f, w, r.order[2])
        np.testing.assert_allclose(ccam(f, w, r, TopBottom(1, 1)), expected, atol=1e-12)

    @pytest.mark.parametrize("g", ALL_FNS, ids=str)
    def test_fast_path_matches_naive(self, g):
        rng = np.random.default_rng(3)
        for _ in range(10):
            f, w = rng.normal(size=(8, 5, 6)), rng.normal(size=(8, 7))
            r = rank_classes(spatial_mean(f), w)
            fast, slow = ccam(f, w, r, g), ccam_naive(f, w, r, g)
            assert np.abs(fast - slow).max() <= 1e-10 * max(1.0, np.abs(slow).max())

    def test_feature_offset_does_not_change_maps(self, instance):
        f, w = instance
        # maps depend only on f and w, never on the pooled vector
        before = class_map(f, w, 3)
        rank_classes(spatial_mean(f) + 5.0, w)
        np.testing.assert_array_equal(class_map(f, w, 3), before)


class TestGtKnown:
    def test_same_when_gt_is_top(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        g = Polynomial(2)
        np.testing.assert_array_equal(gt_known_ccam(f, w, r.order[0], r, g), ccam(f, w, r, g))

    def test_cam_reduces_to_gt_map(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        np.testing.assert_allclose(gt_known_ccam(f, w, 4, r, CAM), class_map(f, w, 4), atol=1e-13)

    def test_forced_ranking_k3(self):
        rng = np.random.default_rng(4)
        f, w = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3))
        r = rank_classes(spatial_mean(f), w)
        c2, c3 = r.order[1], r.order[2]
        expected = class_map(f, w, c2) - class_map(f, w, c3)
        np.testing.assert_allclose(gt_known_ccam(f, w, c2, r, TopBottom(1, 1)), expected, atol=1e-12)

    def test_force_top_keeps_relative_order(self):
        r = rank_classes([1.0], [[5.0, 4.0, 3.0, 2.0, 1.0]])
        assert force_top(r, 3).order == (3, 0, 1, 2, 4)

    def test_bad_gt(self, instance):
        f, w = instance
        r = rank_classes(spatial_mean(f), w)
        with pytest.raises(ValueError):
            gt_known_ccam(f, w, 9, r, CAM)
