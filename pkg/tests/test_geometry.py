import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otoscad.geometry import (
    BoundingBox,
    ContractError,
    FrameAnnotation,
    PatchBatch,
    VideoRecord,
    clip_box,
    extract_patch,
    iou,
)

from .oracles import crop_resample_reference, raster_iou


def boxes(min_side=0.01):
    def build(x0, y0, w, h):
        return BoundingBox(x0, y0, min(1.0, x0 + w), min(1.0, y0 + h))

    return st.builds(
        build,
        st.floats(0.0, 0.9),
        st.floats(0.0, 0.9),
        st.floats(min_side, 1.0),
        st.floats(min_side, 1.0),
    )


class TestBoundingBox:
    def test_valid_box(self):
        b = BoundingBox(0.1, 0.2, 0.5, 0.6)
        assert b.area == pytest.approx(0.4 * 0.4)

    @pytest.mark.parametrize(
        "coords",
        [
            (0.5, 0.2, 0.5, 0.6),  # zero width
            (0.5, 0.2, 0.4, 0.6),  # inverted
            (-0.1, 0.0, 0.5, 0.5),  # out of range
            (0.0, 0.0, 1.1, 1.0),
        ],
    )
    def test_invalid_boxes_rejected(self, coords):
        with pytest.raises(ContractError):
            BoundingBox(*coords)

    def test_nonfinite_rejected(self):
        with pytest.raises(ContractError):
            BoundingBox(float("nan"), 0.0, 0.5, 0.5)


class TestIou:
    def test_identical_boxes(self):
        b = BoundingBox(0.2, 0.3, 0.7, 0.9)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BoundingBox(0, 0, 0.1, 0.1), BoundingBox(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_known_overlap_matches_raster_oracle(self):
        a = BoundingBox(0.0, 0.0, 0.2, 0.2)
        b = BoundingBox(0.1, 0.1, 0.3, 0.3)
        assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)
        assert raster_iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(boxes(), boxes())
    def test_symmetry(self, a, b):
        assert iou(a, b) == pytest.approx(iou(b, a), abs=0.0)

    @settings(max_examples=60, deadline=None)
    @given(boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(boxes(min_side=0.05), boxes(min_side=0.05))
    def test_matches_rasterization(self, a, b):
        assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=2e-3)


class TestClipBox:
    def test_in_bounds_unchanged(self):
        b = clip_box(0.1, 0.2, 0.5, 0.6)
        assert b.as_tuple() == (0.1, 0.2, 0.5, 0.6)

    def test_clamps_negative(self):
        assert clip_box(-0.1, 0.0, 0.5, 0.5).as_tuple() == (0.0, 0.0, 0.5, 0.5)

    def test_clamps_above_one(self):
        assert clip_box(0.9, 0.9, 1.2, 1.3).as_tuple() == (0.9, 0.9, 1.0, 1.0)

    def test_zero_area_after_clamp(self):
        with pytest.raises(ContractError):
            clip_box(1.0, 0.0, 1.4, 0.5)


class TestExtractPatch:
    def test_full_image_identity(self):
        rng = np.random.default_rng(0)
        frame = rng.random((12, 17, 3)).astype(np.float32)
        out = extract_patch(frame, BoundingBox(0, 0, 1, 1), (12, 17))
        np.testing.assert_allclose(out, frame, atol=1e-6)

    def test_constant_frame_any_box(self):
        frame = np.full((20, 20, 3), 0.37, dtype=np.float32)
        out = extract_patch(frame, BoundingBox(0.13, 0.22, 0.77, 0.9), (8, 8))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_checkerboard_matches_reference_resampler(self):
        yy, xx = np.mgrid[0:16, 0:16]
        frame = (((yy // 2 + xx // 2) % 2).astype(np.float64)[..., None] * np.ones(3))
        box = BoundingBox(0.125, 0.25, 0.875, 0.75)
        got = extract_patch(frame, box, (10, 14))
        want = crop_resample_reference(frame, box, (10, 14))
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_idempotent_at_native_size(self):
        rng = np.random.default_rng(1)
        frame = rng.random((9, 9, 3)).astype(np.float32)
        once = extract_patch(frame, BoundingBox(0, 0, 1, 1), (9, 9))
        twice = extract_patch(once, BoundingBox(0, 0, 1, 1), (9, 9))
        np.testing.assert_allclose(once, twice, atol=0.0)

    def test_empty_frame_rejected(self):
        with pytest.raises(ContractError):
            extract_patch(np.zeros((0, 4, 3)), BoundingBox(0, 0, 1, 1), (4, 4))


class TestRecords:
    def test_annotation_box_iff_eardrum(self):
        with pytest.raises(ContractError):
            FrameAnnotation(0, True, None)
        with pytest.raises(ContractError):
            FrameAnnotation(0, False, BoundingBox(0, 0, 0.5, 0.5))

    def test_abnormal_train_video_rejected(self):
        with pytest.raises(ContractError):
            VideoRecord("v0", "abnormal", "train", 10, 30.0)

    def test_annotation_outside_frame_count(self):
        ann = FrameAnnotation(12, False, None)
        with pytest.raises(ContractError):
            VideoRecord("v0", "normal", "train", 10, 30.0, (ann,))

    def test_patch_batch_shape_mismatch(self):
        with pytest.raises(ContractError):
            PatchBatch(["a", "b"], [0, 1], [np.zeros((4, 4, 3)), np.zeros((5, 4, 3))])

    def test_patch_batch_size(self):
        pb = PatchBatch(["a"], [0], [np.zeros((4, 4, 3))])
        assert pb.size == 1
        assert pb.stacked().shape == (1, 4, 4, 3)
