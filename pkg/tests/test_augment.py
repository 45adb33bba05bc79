"""Geometric augmentation: sampling, warping, and image/mask agreement."""

import numpy as np
import pytest

from rescrnet.augment import (AugmentParams, AugmentRanges, apply_affine, epoch_stream,
                              sample_params, source_coords, warp_bilinear, warp_nearest)


class TestSampleParams:
    def test_point_ranges_give_exact_values(self):
        ranges = AugmentRanges(rotation_deg=(12.0, 12.0), shear_deg=(-3.0, -3.0),
                               shift_frac=(0.05, 0.05), scale=(1.1, 1.1),
                               flip_h_prob=1.0, flip_v_prob=0.0)
        p = sample_params(ranges, np.random.default_rng(0))
        assert p.rotation_deg == 12.0
        assert p.shear_deg == -3.0
        assert p.shift_frac == (0.05, 0.05)
        assert p.scale == 1.1
        assert p.flip_h and not p.flip_v

    def test_deterministic_under_seed(self):
        ranges = AugmentRanges()
        a = [sample_params(ranges, np.random.default_rng(7)) for _ in range(5)]
        b = [sample_params(ranges, np.random.default_rng(7)) for _ in range(5)]
        assert a == b

    def test_samples_stay_inside_ranges(self):
        ranges = AugmentRanges()
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = sample_params(ranges, rng)
            assert ranges.rotation_deg[0] <= p.rotation_deg <= ranges.rotation_deg[1]
            assert ranges.shear_deg[0] <= p.shear_deg <= ranges.shear_deg[1]
            for v in p.shift_frac:
                assert ranges.shift_frac[0] <= v <= ranges.shift_frac[1]
            assert ranges.scale[0] <= p.scale <= ranges.scale[1]

    def test_monte_carlo_rotation_mean(self):
        # uniform on [-30, 30]: the empirical mean should sit near zero
        rng = np.random.default_rng(2)
        vals = [sample_params(AugmentRanges(), rng).rotation_deg for _ in range(20000)]
        assert abs(np.mean(vals)) < 1.0

    def test_inverted_range_rejected(self):
        with pytest.raises(ValueError, match="inverted"):
            sample_params(AugmentRanges(rotation_deg=(10.0, -10.0)), np.random.default_rng(0))

    def test_bad_flip_probability(self):
        with pytest.raises(ValueError, match="flip_h_prob"):
            AugmentRanges(flip_h_prob=1.5).validate()


class TestApplyAffine:
    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(0)
        img = rng.random((9, 7, 1))
        mask = np.eye(3)[rng.integers(0, 3, size=(9, 7))]
        out_img, out_mask = apply_affine(img, mask, AugmentParams())
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_mask, mask)

    def test_horizontal_flip_reverses_columns(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        mask = np.eye(2)[np.array([[0, 1], [1, 0]])]
        out_img, out_mask = apply_affine(img, mask, AugmentParams(flip_h=True))
        np.testing.assert_allclose(out_img[..., 0], [[2.0, 1.0], [4.0, 3.0]], atol=1e-12)
        np.testing.assert_array_equal(out_mask, mask[:, ::-1])

    def test_vertical_flip_reverses_rows(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        mask = np.eye(2)[np.array([[0, 1], [1, 0]])]
        out_img, _ = apply_affine(img, mask, AugmentParams(flip_v=True))
        np.testing.assert_allclose(out_img[..., 0], [[3.0, 4.0], [1.0, 2.0]], atol=1e-12)

    def test_quarter_turn_equals_transpose_then_column_reverse(self):
        rng = np.random.default_rng(3)
        img = rng.random((7, 7, 1))
        coords = source_coords((7, 7), AugmentParams(rotation_deg=90.0))
        out = warp_nearest(img, coords)
        expected = np.fliplr(img[..., 0].T)[..., None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_mask_stays_one_hot(self):
        rng = np.random.default_rng(4)
        img = rng.random((16, 16, 1))
        mask = np.eye(3)[rng.integers(0, 3, size=(16, 16))]
        for _ in range(20):
            p = sample_params(AugmentRanges(), rng)
            _, out_mask = apply_affine(img, mask, p)
            np.testing.assert_array_equal(out_mask.sum(axis=-1), 1.0)
            assert set(np.unique(out_mask)) <= {0.0, 1.0}

    def test_image_and_mask_share_geometry(self):
        # warp the class-index plane as image data with nearest sampling and
        # compare against the decoded warped one-hot mask
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=(20, 20))
        img = labels[..., None].astype(float)
        mask = np.eye(3)[labels]
        for _ in range(10):
            p = sample_params(AugmentRanges(), rng)
            coords = source_coords((20, 20), p)
            img_nn = warp_nearest(img, coords)[..., 0]
            _, out_mask = apply_affine(img, mask, p)
            np.testing.assert_array_equal(img_nn.astype(int), out_mask.argmax(-1))

    def test_mirror_fill_has_no_edge_repeat(self):
        # shifting a column ramp by one pixel reflects index -1 onto index 1
        img = np.arange(5, dtype=float)[None].repeat(5, axis=0)[..., None]
        coords = source_coords((5, 5), AugmentParams(shift_frac=(0.0, 0.2)))
        out = warp_bilinear(img, coords)
        np.testing.assert_allclose(out[0, :, 0], [1.0, 0.0, 1.0, 2.0, 3.0], atol=1e-12)

    def test_scale_is_zoom_about_center(self):
        img = np.zeros((9, 9, 1))
        img[4, 4, 0] = 1.0
        coords = source_coords((9, 9), AugmentParams(scale=3.0))
        out = warp_nearest(img, coords)
        assert out[4, 4, 0] == 1.0
        assert out[..., 0].sum() == 9.0  # the center pixel now covers a 3x3 patch

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            apply_affine(np.zeros((4, 4, 1)), np.zeros((5, 4, 2)), AugmentParams())

    def test_rank_check(self):
        with pytest.raises(ValueError, match="rank 3"):
            apply_affine(np.zeros((4, 4)), np.zeros((4, 4, 2)), AugmentParams())

    def test_degenerate_transform_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            source_coords((4, 4), AugmentParams(scale=0.0))


class TestEpochStream:
    def make_dataset(self, n=3, h=8, w=10, k=2, seed=0):
        rng = np.random.default_rng(seed)
        return [(rng.random((h, w, 1)), np.eye(k)[rng.integers(0, k, size=(h, w))])
                for _ in range(n)]

    def test_batch_shapes_and_count(self):
        ds = self.make_dataset()
        batches = list(epoch_stream(ds, steps=4, rng=np.random.default_rng(0)))
        assert len(batches) == 4
        for imgs, masks in batches:
            assert imgs.shape == (3, 8, 10, 1)
            assert masks.shape == (3, 8, 10, 2)

    def test_deterministic_under_seed(self):
        ds = self.make_dataset()
        a = list(epoch_stream(ds, steps=3, rng=np.random.default_rng(11)))
        b = list(epoch_stream(ds, steps=3, rng=np.random.default_rng(11)))
        for (ia, ma), (ib, mb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(ma, mb)

    def test_identity_ranges_reproduce_input(self):
        ds = self.make_dataset(n=2)
        (imgs, masks), = epoch_stream(ds, steps=1, rng=np.random.default_rng(0),
                                      ranges=AugmentRanges.identity())
        for i, (img, msk) in enumerate(ds):
            np.testing.assert_array_equal(imgs[i], img)
            np.testing.assert_array_equal(masks[i], msk)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            next(epoch_stream([], steps=1, rng=np.random.default_rng(0)))

    def test_mixed_sizes_rejected(self):
        ds = self.make_dataset(n=1, h=8) + self.make_dataset(n=1, h=9)
        with pytest.raises(ValueError, match="uniform"):
            next(epoch_stream(ds, steps=1, rng=np.random.default_rng(0)))

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError, match="steps"):
            next(epoch_stream(self.make_dataset(), steps=0, rng=np.random.default_rng(0)))
