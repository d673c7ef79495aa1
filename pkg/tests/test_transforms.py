import numpy as np
import pytest

from otoscad.geometry import BoundingBox
from otoscad.transforms import (
    CJ_RC,
    CJ_RR,
    CJ_WF,
    ColorJitterParams,
    PairAugmentParams,
    ShiftVariant,
    apply_shift,
    cj_rc,
    cj_rr,
    cj_wf,
    color_jitter,
    cutout,
    draw_jitter_factors,
    draw_rectangle,
    luma,
    positive_pair_augment,
    resize_image,
    rotate_with_box,
    rr_weight_map,
    shear_with_box,
)

from .oracles import gaussian_peak_reference

ZERO = ColorJitterParams(0, 0, 0, 0)


def random_image(seed, h=24, w=24):
    return np.random.default_rng(seed).random((h, w, 3))


class TestColorJitter:
    def test_zero_magnitudes_identity(self):
        img = random_image(0)
        out = color_jitter(img, ZERO, np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_brightness_only_on_constant_image(self):
        params = ColorJitterParams(brightness=0.4, contrast=0, saturation=0, hue=0)
        factors = draw_jitter_factors(params, np.random.default_rng(5))
        img = np.full((10, 10, 3), 0.5)
        out = color_jitter(img, params, np.random.default_rng(5))
        np.testing.assert_allclose(out, np.clip(0.5 * factors.brightness, 0, 1), atol=1e-12)

    def test_same_seed_reproduces(self):
        img = random_image(2)
        params = ColorJitterParams()
        a = color_jitter(img, params, np.random.default_rng(7))
        b = color_jitter(img, params, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_output_in_unit_range(self):
        params = ColorJitterParams(0.9, 0.9, 0.9, 0.5)
        for seed in range(10):
            out = color_jitter(random_image(seed), params, np.random.default_rng(seed))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hue_only_preserves_luminance(self):
        # Low-saturation image keeps the rotation inside [0, 1]: no clamping.
        rng = np.random.default_rng(3)
        img = 0.5 + 0.05 * rng.standard_normal((16, 16, 3))
        params = ColorJitterParams(0, 0, 0, hue=0.5)
        out = color_jitter(img, params, np.random.default_rng(11))
        np.testing.assert_allclose(luma(out), luma(img), atol=1e-9)

    def test_hue_magnitude_validated(self):
        with pytest.raises(Exception):
            ColorJitterParams(hue=0.6)


class TestCjRc:
    def test_outside_rectangle_bit_identical(self):
        img = random_image(4)
        variant = ShiftVariant(CJ_RC)
        rng_probe = np.random.default_rng(9)
        top, left, h, w = draw_rectangle(
            img.shape[:2], variant.rect_area_range, variant.rect_aspect_range, rng_probe
        )
        out = cj_rc(img, variant, np.random.default_rng(9))
        mask = np.zeros(img.shape[:2], dtype=bool)
        mask[top : top + h, left : left + w] = True
        np.testing.assert_array_equal(out[~mask], img[~mask])

    def test_zero_jitter_identity(self):
        img = random_image(5)
        out = cj_rc(img, ShiftVariant(CJ_RC, params=ZERO), np.random.default_rng(2))
        np.testing.assert_array_equal(out, img)

    def test_full_rectangle_equals_whole_frame_jitter(self):
        img = random_image(6)
        variant = ShiftVariant(CJ_RC, rect_area_range=(1.0, 1.0), rect_aspect_range=(1.0, 1.0))
        out = cj_rc(img, variant, np.random.default_rng(13))
        rng = np.random.default_rng(13)
        draw_rectangle(img.shape[:2], (1.0, 1.0), (1.0, 1.0), rng)
        want = color_jitter(img, variant.params, rng)
        np.testing.assert_array_equal(out, want)

    def test_constant_image_uniform_inside(self):
        img = np.full((20, 20, 3), 0.4)
        variant = ShiftVariant(CJ_RC, params=ColorJitterParams(0.4, 0, 0, 0))
        rng_probe = np.random.default_rng(21)
        top, left, h, w = draw_rectangle(
            img.shape[:2], variant.rect_area_range, variant.rect_aspect_range, rng_probe
        )
        out = cj_rc(img, variant, np.random.default_rng(21))
        inside = out[top : top + h, left : left + w]
        assert np.unique(inside.reshape(-1, 3), axis=0).shape[0] == 1
        np.testing.assert_array_equal(out[top - 1, left] if top else out[-1, -1], img[0, 0])


class TestCjRr:
    def test_zero_points_identity(self):
        img = random_image(7)
        variant = ShiftVariant(CJ_RR, rr_points=0)
        out = cj_rr(img, variant, np.random.default_rng(3))
        np.testing.assert_array_equal(out, img)

    def test_blend_matches_weight_map(self):
        img = random_image(8)
        variant = ShiftVariant(CJ_RR)
        sigma = variant.rr_sigma_frac * min(img.shape[:2])
        rng = np.random.default_rng(17)
        w = rr_weight_map(img.shape[:2], variant.rr_points, sigma, rng)[..., None]
        jit = color_jitter(img, variant.params, rng)
        want = w * jit + (1 - w) * img
        got = cj_rr(img, variant, np.random.default_rng(17))
        np.testing.assert_allclose(got, want, atol=0.0)

    def test_single_point_weight_matches_gaussian_kernel(self):
        # Pick a seed whose impulse lands far enough from the border that the
        # reflect padding cannot influence the response.
        shape = (40, 40)
        sigma = 3.0
        radius = int(4 * sigma + 0.5)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            r = int(rng.integers(0, shape[0]))
            c = int(rng.integers(0, shape[1]))
            if radius <= r < shape[0] - radius and radius <= c < shape[1] - radius:
                break
        else:
            pytest.fail("no interior impulse found")
        w = rr_weight_map(shape, 1, sigma, np.random.default_rng(seed))
        want = gaussian_peak_reference(shape, (r, c), sigma)
        np.testing.assert_allclose(w, want, atol=1e-9)

    def test_convex_combination_bound(self):
        img = random_image(9)
        variant = ShiftVariant(CJ_RR)
        sigma = variant.rr_sigma_frac * min(img.shape[:2])
        rng = np.random.default_rng(23)
        w = rr_weight_map(img.shape[:2], variant.rr_points, sigma, rng)
        jit = color_jitter(img, variant.params, rng)
        out = cj_rr(img, variant, np.random.default_rng(23))
        lo = np.minimum(img, jit)
        hi = np.maximum(img, jit)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


class TestCjWf:
    def test_zero_magnitudes_identity(self):
        img = random_image(10)
        out = cj_wf(img, ShiftVariant(CJ_WF, params=ZERO), np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_equals_color_jitter_same_stream(self):
        img = random_image(11)
        variant = ShiftVariant(CJ_WF)
        a = cj_wf(img, variant, np.random.default_rng(31))
        b = color_jitter(img, variant.params, np.random.default_rng(31))
        np.testing.assert_array_equal(a, b)


class TestApplyShift:
    @pytest.mark.parametrize("kind", [CJ_RC, CJ_RR, CJ_WF])
    def test_deterministic_and_in_range(self, kind):
        img = random_image(12)
        variant = ShiftVariant(kind)
        a = apply_shift(img, variant, np.random.default_rng(41))
        b = apply_shift(img, variant, np.random.default_rng(41))
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestPositivePairs:
    def test_disabled_returns_plain_resize(self):
        patch = random_image(13, 20, 20)
        params = PairAugmentParams(out_size=(16, 16), enabled=False)
        v1, v2 = positive_pair_augment(patch, params, np.random.default_rng(0))
        np.testing.assert_array_equal(v1, v2)
        np.testing.assert_allclose(v1, resize_image(patch, (16, 16)), atol=0.0)

    def test_output_shape_contract(self):
        patch = random_image(14, 30, 40)
        params = PairAugmentParams(out_size=(32, 32))
        v1, v2 = positive_pair_augment(patch, params, np.random.default_rng(1))
        assert v1.shape == (32, 32, 3) and v2.shape == (32, 32, 3)

    def test_same_seed_reproducible(self):
        patch = random_image(15, 28, 28)
        params = PairAugmentParams(out_size=(24, 24))
        a = positive_pair_augment(patch, params, np.random.default_rng(5))
        b = positive_pair_augment(patch, params, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestDetectorAugOps:
    def test_rotate_zero_is_identity(self):
        img = random_image(16)
        box = BoundingBox(0.25, 0.25, 0.75, 0.75)
        out, new_box = rotate_with_box(img, box, 0.0)
        np.testing.assert_allclose(out, img, atol=1e-9)
        assert new_box is not None
        np.testing.assert_allclose(new_box.as_tuple(), box.as_tuple(), atol=1e-9)

    def test_shear_zero_is_identity(self):
        img = random_image(17)
        out, new_box = shear_with_box(img, BoundingBox(0.2, 0.2, 0.6, 0.6), 0.0)
        np.testing.assert_allclose(out, img, atol=1e-9)
        np.testing.assert_allclose(new_box.as_tuple(), (0.2, 0.2, 0.6, 0.6), atol=1e-9)

    def test_rotation_90_moves_center_keeps_extents(self):
        img = random_image(18, 21, 21)
        box = BoundingBox(0.2, 0.4, 0.4, 0.6)  # center (0.3, 0.5)
        _, moved = rotate_with_box(img, box, 90.0)
        np.testing.assert_allclose(moved.as_tuple(), (0.4, 0.6, 0.6, 0.8), atol=1e-6)

    def test_cutout_zeroes_one_square(self):
        img = np.ones((16, 16, 3))
        out = cutout(img, np.random.default_rng(3), size_frac_range=(0.25, 0.25))
        zeros = np.argwhere((out == 0).all(axis=2))
        assert zeros.size > 0
        rows = np.unique(zeros[:, 0])
        cols = np.unique(zeros[:, 1])
        assert len(rows) == len(cols) == 4
        assert (np.diff(rows) == 1).all() and (np.diff(cols) == 1).all()
