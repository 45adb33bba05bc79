import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rescrnet import tensor as T
from rescrnet.losses import (LossConfig, contour_weight_map, dice_coefficient, tanimoto,
                             tanimoto_loss, tanimoto_with_complement)
from rescrnet.metrics import ConfusionCounts, confusion_and_metrics, confusion_counts, \
    metrics_from_counts


class TestDice:
    def test_perfect_overlap(self):
        y = np.array([1.0, 0.0, 1.0, 1.0])
        for s in (0.0, 0.5, 1.0):
            assert dice_coefficient(y, y, s) == 1.0

    def test_half_overlap(self):
        assert dice_coefficient([0.5, 0.5], [1.0, 0.0], s=0.0) == pytest.approx(0.5)

    def test_empty_class_smoothing_limit(self):
        z = np.zeros(4)
        assert dice_coefficient(z, z, s=1.0) == 1.0

    def test_out_of_range_probabilities(self):
        with pytest.raises(ValueError, match="probabilities"):
            dice_coefficient([1.5, 0.0], [1.0, 0.0])


class TestTanimoto:
    def test_perfect_binary(self):
        y = np.array([1.0, 0.0, 1.0])
        for s in (0.0, 1.0, 7.0):
            assert tanimoto(y, y, s) == 1.0

    def test_half_case(self):
        assert tanimoto([0.5, 0.5], [1.0, 0.0], s=0.0) == pytest.approx(0.5)

    def test_equals_jaccard_on_hard_masks_2x2_exhaustive(self):
        # independent oracle: set arithmetic over all 2x2 binary masks
        for bits_p in itertools.product((0, 1), repeat=4):
            for bits_t in itertools.product((0, 1), repeat=4):
                p = np.array(bits_p, dtype=float)
                t = np.array(bits_t, dtype=float)
                tp = int(((p == 1) & (t == 1)).sum())
                fp = int(((p == 1) & (t == 0)).sum())
                fn = int(((p == 0) & (t == 1)).sum())
                jaccard = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
                assert tanimoto(p, t, s=0.0) == pytest.approx(jaccard)


class TestTanimotoWithComplement:
    def test_perfect(self):
        y = np.array([1.0, 0.0])
        assert tanimoto_with_complement(y, y, s=0.0) == 1.0

    def test_half_case(self):
        assert tanimoto_with_complement([0.5, 0.5], [1.0, 0.0], s=0.0) == pytest.approx(0.5)

    @given(arrays(np.int8, 6, elements=st.integers(0, 10)),
           arrays(np.int8, 6, elements=st.integers(0, 1)),
           st.floats(0, 10))
    @settings(max_examples=200, deadline=None)
    def test_complement_symmetry_and_bounds(self, yhat, y, s):
        # probability grid keeps 1-(1-p) exactly representable enough that
        # the comparison below is purely about the formula's symmetry
        yhat = yhat.astype(float) / 10.0
        y = y.astype(float)
        a = tanimoto_with_complement(yhat, y, s)
        b = tanimoto_with_complement(1.0 - yhat, 1.0 - y, s)
        assert a == pytest.approx(b, abs=1e-9)
        assert -1e-12 <= a <= 1 + 1e-12
        assert 0 <= dice_coefficient(yhat, y, s) <= 1 + 1e-12
        assert -1e-12 <= tanimoto(yhat, y, s) <= 1 + 1e-12


class TestTanimotoLoss:
    def test_perfect_prediction_zero_loss(self):
        y = np.eye(2)[np.random.default_rng(0).integers(0, 2, size=(3, 4))]
        loss = tanimoto_loss(T.Tensor(y), y, LossConfig(smooth_s=1.0))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_half_case(self):
        yhat = np.full((1, 2, 1), 0.5)
        y = np.array([[[1.0], [0.0]]])
        loss = tanimoto_loss(T.Tensor(yhat), y, LossConfig(smooth_s=0.0))
        assert loss.item() == pytest.approx(0.5)

    def test_matches_numpy_oracle_with_weights(self):
        rng = np.random.default_rng(1)
        yhat = rng.random((2, 3, 4, 3))
        y = np.eye(3)[rng.integers(0, 3, size=(2, 3, 4))]
        wmap = rng.random((2, 3, 4)) + 0.5
        cw = (1.0, 2.0, 0.5)
        cfg = LossConfig(smooth_s=1.0, class_weights=cw)
        loss = tanimoto_loss(T.Tensor(yhat), y, cfg, weight_map=wmap).item()
        w_full = wmap[..., None] * np.asarray(cw)
        oracle = 1.0 - 0.5 * (tanimoto(yhat, y, 1.0, weights=w_full)
                              + tanimoto(1 - yhat, 1 - y, 1.0, weights=w_full))
        assert loss == pytest.approx(oracle, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        yhat = np.clip(rng.random((2, 2, 2)), 0.05, 0.95)
        y = np.eye(2)[rng.integers(0, 2, size=(2, 2))]
        cfg = LossConfig(smooth_s=0.7)
        p = T.Tensor(yhat, requires_grad=True)
        with T.record():
            T.backward(tanimoto_loss(p, y, cfg))
        h = 1e-6
        num = np.zeros_like(yhat)
        flat, nflat = yhat.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = tanimoto_loss(T.Tensor(yhat), y, cfg).item()
            flat[i] = orig - h
            fm = tanimoto_loss(T.Tensor(yhat), y, cfg).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(p.grad, num, rtol=1e-5, atol=1e-9)

    def test_gradient_near_extremes(self):
        y = np.eye(2)[np.array([[0, 1], [1, 0]])]
        yhat = np.clip(y, 1e-4, 1 - 1e-4)
        p = T.Tensor(yhat, requires_grad=True)
        with T.record():
            T.backward(tanimoto_loss(p, y, LossConfig(smooth_s=1.0)))
        assert np.all(np.isfinite(p.grad))

    def test_weight_map_shape_mismatch(self):
        y = np.eye(2)[np.zeros((2, 2), dtype=int)]
        with pytest.raises(ValueError, match="weight map"):
            tanimoto_loss(T.Tensor(y), y, weight_map=np.ones((3, 3)))

    def test_loss_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            yhat = rng.random((3, 3, 2))
            y = np.eye(2)[rng.integers(0, 2, size=(3, 3))]
            val = tanimoto_loss(T.Tensor(yhat), y).item()
            assert -1e-12 <= val <= 1 + 1e-12


class TestContourWeightMap:
    def test_uniform_mask_off(self):
        y = np.zeros((8, 8, 2))
        y[..., 0] = 1.0
        w = contour_weight_map(y, LossConfig(contour_weighting=False))
        assert np.all(w == w[0, 0])

    def test_w0_zero_reduces_to_class_balance(self):
        rng = np.random.default_rng(0)
        y = np.eye(3)[rng.integers(0, 3, size=(8, 8))]
        off = contour_weight_map(y, LossConfig(contour_weighting=False))
        on = contour_weight_map(y, LossConfig(contour_weighting=True, contour_w0=0.0))
        np.testing.assert_array_equal(off, on)

    def test_gap_between_blobs_is_upweighted(self):
        y = np.zeros((16, 16, 2))
        labels = np.zeros((16, 16), dtype=int)
        labels[6:10, 3:6] = 1    # blob A, gap of 2 columns, blob B
        labels[6:10, 8:11] = 1
        y = np.eye(2)[labels]
        cfg = LossConfig(contour_weighting=True, contour_w0=10.0, contour_sigma=2.0)
        w = contour_weight_map(y, cfg)
        midpoint = w[8, 7]
        # background pixel roughly 10 px away from both blobs
        far = w[0, 15]
        assert midpoint > far

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="one-hot"):
            contour_weight_map(np.full((4, 4, 2), 0.5))


class TestConfusionMetrics:
    def test_basic_arithmetic(self):
        m = metrics_from_counts(ConfusionCounts(tp=8, fp=1, fn=1, tn=90))
        assert m["jaccard"] == pytest.approx(0.8)
        assert m["precision"] == pytest.approx(8 / 9)
        assert m["recall"] == pytest.approx(8 / 9)
        assert m["f1"] == pytest.approx(8 / 9)
        assert m["dice"] == pytest.approx(16 / 18)

    def test_published_f1_consistent_with_precision_recall(self):
        p, r = 0.926, 0.922
        f1 = 2 * p * r / (p + r)
        assert f1 == pytest.approx(0.924, abs=5e-4)

    def test_perfect_prediction_all_ones(self):
        rng = np.random.default_rng(0)
        y = np.eye(3)[rng.integers(0, 3, size=(5, 7))]
        out = confusion_and_metrics(y, y)
        for pc in out["per_class"]:
            assert all(pc[m] == 1.0 for m in pc)

    def test_counts_partition_pixels(self):
        rng = np.random.default_rng(1)
        yhat = rng.random((6, 6, 3))
        y = np.eye(3)[rng.integers(0, 3, size=(6, 6))]
        for c in confusion_counts(yhat, y):
            assert c.total == 36

    def test_absent_class_convention(self):
        # class never present and never predicted: all metrics 1
        y = np.eye(3)[np.zeros((4, 4), dtype=int)]
        out = confusion_and_metrics(y, y)
        assert all(v == 1.0 for v in out["per_class"][2].values())

    def test_f1_is_harmonic_mean_and_equals_hard_dice(self):
        rng = np.random.default_rng(2)
        yhat = rng.random((8, 8, 3))
        y = np.eye(3)[rng.integers(0, 3, size=(8, 8))]
        for pc in confusion_and_metrics(yhat, y)["per_class"]:
            p, r = pc["precision"], pc["recall"]
            if p + r > 0:
                assert pc["f1"] == pytest.approx(2 * p * r / (p + r))
            assert pc["f1"] == pytest.approx(pc["dice"])
