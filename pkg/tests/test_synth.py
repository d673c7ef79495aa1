import numpy as np
import pytest

from otoscad.data import frame_path, load_manifest
from otoscad.geometry import ABNORMAL, NORMAL, ContractError, iou
from otoscad.synth import (
    GLOBAL_TINT,
    REGIONAL_TINT,
    SynthConfig,
    generate_dataset,
    make_video_spec,
    mask_bounding_box,
    render_frame,
    video_layout,
)

SMALL_COUNTS = {
    "train": {NORMAL: 4, ABNORMAL: 0},
    "val": {NORMAL: 2, ABNORMAL: 2},
    "test": {NORMAL: 2, ABNORMAL: 2},
}


def small_config(**kw):
    defaults = dict(counts=SMALL_COUNTS, frames_per_video=3, image_size=32, seed=5)
    defaults.update(kw)
    return SynthConfig(**defaults)


class TestConfig:
    def test_default_counts_follow_protocol(self):
        c = SynthConfig()
        assert c.counts["train"] == {NORMAL: 60, ABNORMAL: 0}
        assert c.counts["val"] == {NORMAL: 10, ABNORMAL: 10}
        assert c.counts["test"] == {NORMAL: 10, ABNORMAL: 10}

    def test_abnormal_train_rejected(self):
        with pytest.raises(ContractError):
            SynthConfig(counts={"train": {NORMAL: 2, ABNORMAL: 1}})

    def test_disc_smaller_than_20pct_rejected(self):
        with pytest.raises(ContractError):
            SynthConfig(radius_frac_range=(0.05, 0.2))

    def test_disc_larger_than_frame_rejected(self):
        with pytest.raises(ContractError):
            SynthConfig(radius_frac_range=(0.2, 0.6))

    def test_layout_counts(self):
        layout = video_layout(small_config())
        assert len(layout) == 12
        assert sum(1 for _, label, _ in layout if label == ABNORMAL) == 4


class TestRendering:
    def test_frames_in_unit_range(self):
        spec = make_video_spec(small_config(), 0, NORMAL, "train")
        frame, alpha = render_frame(spec, 0)
        assert frame.min() >= 0.0 and frame.max() <= 1.0
        assert alpha.shape == frame.shape[:2]

    def test_some_frames_omit_disc(self):
        config = small_config(frames_per_video=40, disc_presence_prob=0.7)
        spec = make_video_spec(config, 1, NORMAL, "train")
        assert spec.present.any() and not spec.present.all()

    def test_magnitude_zero_abnormal_identical_to_normal(self):
        config = small_config(anomaly_magnitude=0.0)
        normal = make_video_spec(config, 3, NORMAL, "val")
        abnormal = make_video_spec(config, 3, ABNORMAL, "val")
        for t in range(config.frames_per_video):
            fn, _ = render_frame(normal, t)
            fa, _ = render_frame(abnormal, t)
            np.testing.assert_array_equal(fn, fa)

    @pytest.mark.parametrize("kind", [GLOBAL_TINT, REGIONAL_TINT])
    def test_tint_only_inside_disc(self, kind):
        config = small_config(anomaly_kind=kind, anomaly_magnitude=0.6)
        normal = make_video_spec(config, 4, NORMAL, "val")
        abnormal = make_video_spec(config, 4, ABNORMAL, "val")
        for t in range(config.frames_per_video):
            fn, alpha = render_frame(normal, t)
            fa, _ = render_frame(abnormal, t)
            outside = alpha == 0.0
            np.testing.assert_array_equal(fa[outside], fn[outside])
            if alpha.max() > 0.5:
                assert np.abs(fa - fn).max() > 0.01

    def test_regional_tint_leaves_part_of_disc_untouched(self):
        config = small_config(anomaly_kind=REGIONAL_TINT, anomaly_magnitude=0.8)
        normal = make_video_spec(config, 5, NORMAL, "val")
        abnormal = make_video_spec(config, 5, ABNORMAL, "val")
        t = int(np.flatnonzero(normal.present)[0])
        fn, alpha = render_frame(normal, t)
        fa, _ = render_frame(abnormal, t)
        core = alpha > 0.99
        changed = (np.abs(fa - fn).max(axis=2) > 1e-6) & core
        assert changed.any() and (core & ~changed).any()


class TestGenerateDataset:
    def test_quota_contract_and_annotations(self, tmp_path):
        config = small_config()
        manifest = generate_dataset(config, tmp_path)
        assert len(manifest.records) == 12
        assert len(manifest.by_split("train", NORMAL)) == 4
        assert len(manifest.by_split("val", ABNORMAL)) == 2
        for rec in manifest.records:
            assert rec.frame_count == 3
            assert len(rec.annotations) == 3
            assert any(a.has_eardrum for a in rec.annotations)
            for ann in rec.annotations:
                assert frame_path(tmp_path / "frames", rec.video_id, ann.frame_index).exists()

    def test_boxes_tightly_bound_rendered_mask(self, tmp_path):
        config = small_config()
        manifest = generate_dataset(config, tmp_path)
        for index, label, split in video_layout(config):
            rec = manifest.records[index]
            spec = make_video_spec(config, index, label, split)
            for ann in rec.annotations:
                _, alpha = render_frame(spec, ann.frame_index)
                want = mask_bounding_box(alpha)
                if ann.has_eardrum:
                    assert want is not None
                    assert iou(ann.box, want) == 1.0
                else:
                    assert want is None

    def test_byte_identical_across_runs(self, tmp_path):
        config = small_config()
        m1 = generate_dataset(config, tmp_path / "a")
        m2 = generate_dataset(config, tmp_path / "b")
        assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_bytes()
        for rec in m1.records:
            for t in range(rec.frame_count):
                pa = frame_path(tmp_path / "a" / "frames", rec.video_id, t)
                pb = frame_path(tmp_path / "b" / "frames", rec.video_id, t)
                assert pa.read_bytes() == pb.read_bytes()

    def test_manifest_loads_back(self, tmp_path):
        config = small_config()
        generate_dataset(config, tmp_path)
        manifest = load_manifest(tmp_path / "manifest.jsonl")
        assert manifest.root == "frames"
        assert manifest.seed == config.seed
