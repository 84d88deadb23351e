import numpy as np
import pytest

from rivlpr import AugmentSpec, RivConfig, RivImage, apply_masks, augment, yaw_shift
from rivlpr.augment import apply_pixel_mask, build_mask, cylindrical_mask_columns


def random_image(rng, H=42, W=280):
    cfg = RivConfig(width=W, height=H, max_range=80.0)
    data = rng.random((H, W, 3)).astype(np.float32)
    mask = rng.random((H, W)) > 0.25
    data[~mask] = 0.0
    return RivImage(data, mask, cfg)


class TestYawShift:
    def test_zero_identity(self, rng):
        img = random_image(rng)
        out = yaw_shift(img, 0)
        np.testing.assert_array_equal(out.data, img.data)

    def test_full_revolution_identity(self, rng):
        img = random_image(rng)
        out = yaw_shift(img, img.width)
        np.testing.assert_array_equal(out.data, img.data)

    def test_shift_then_complement_identity(self, rng):
        img = random_image(rng)
        out = yaw_shift(yaw_shift(img, 77), img.width - 77)
        np.testing.assert_array_equal(out.data, img.data)
        np.testing.assert_array_equal(out.valid_mask, img.valid_mask)

    def test_column_semantics(self, rng):
        img = random_image(rng)
        s = 5
        out = yaw_shift(img, s)
        np.testing.assert_array_equal(out.data[:, s], img.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 0], img.data[:, img.width - s])

    def test_row_multiset_preserved(self, rng):
        img = random_image(rng)
        out = yaw_shift(img, 123)
        for r in range(0, img.height, 11):
            np.testing.assert_array_equal(
                np.sort(out.data[r, :, 1]), np.sort(img.data[r, :, 1])
            )


class TestMasks:
    def test_all_zero_spec_identity(self, rng):
        img = random_image(rng)
        spec = AugmentSpec(square_mask_ratio_max=0.0, cyl_mask_width_max=0.0, line_mask_count_max=0)
        out = apply_masks(img, spec)
        np.testing.assert_array_equal(out.data, img.data)
        np.testing.assert_array_equal(out.valid_mask, img.valid_mask)

    def test_same_seed_identical(self, rng):
        img = random_image(rng)
        spec = AugmentSpec(rng_seed=99)
        a = apply_masks(img, spec)
        b = apply_masks(img, spec)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.valid_mask, b.valid_mask)

    def test_never_increases_values(self, rng):
        img = random_image(rng)
        for seed in range(5):
            out = apply_masks(img, AugmentSpec(rng_seed=seed))
            assert np.all(out.data <= img.data + 1e-12)
            assert np.all(out.valid_mask <= img.valid_mask)

    def test_square_area_cap_respected(self, rng):
        H, W = 42, 280
        for seed in range(10):
            spec = AugmentSpec(cyl_mask_width_max=0.0, line_mask_count_max=0, rng_seed=seed)
            m = build_mask(spec, (H, W))
            assert m.sum() <= 0.4 * H * W

    def test_cylindrical_wrap(self):
        W = 280
        band = int(0.3 * W)
        cols = cylindrical_mask_columns(W, W - 10, band)
        assert len(cols) == band
        expected = set(range(W - 10, W)) | set(range(0, band - 10))
        assert set(cols.tolist()) == expected

    def test_masks_commute_with_shift(self, rng):
        # masking in shifted coordinates then shifting equals shifting first
        img = random_image(rng)
        s = 60
        mask = build_mask(AugmentSpec(rng_seed=4), (img.height, img.width))
        shifted_mask = np.roll(mask, s, axis=1)
        a = yaw_shift(apply_pixel_mask(img, mask), s)
        b = apply_pixel_mask(yaw_shift(img, s), shifted_mask)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.valid_mask, b.valid_mask)

    def test_augment_composes(self, rng):
        img = random_image(rng)
        spec = AugmentSpec(yaw_shift=17, rng_seed=2)
        out = augment(img, spec)
        expected = apply_masks(yaw_shift(img, 17), spec)
        np.testing.assert_array_equal(out.data, expected.data)


class TestSpecValidation:
    def test_square_cap_enforced(self):
        with pytest.raises(ValueError):
            AugmentSpec(square_mask_ratio_max=0.5)

    def test_cyl_cap_enforced(self):
        with pytest.raises(ValueError):
            AugmentSpec(cyl_mask_width_max=0.31)
