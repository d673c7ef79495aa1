import numpy as np
import pytest

from otoscad.data import (
    DEFAULT_SPLIT_COUNTS,
    ArraySource,
    DatasetManifest,
    ImageDirSource,
    load_manifest,
    make_splits,
    save_manifest,
    training_patch_batches,
    write_frame,
)
from otoscad.geometry import BoundingBox, ContractError, FrameAnnotation, VideoRecord


def make_record(i, label="normal", split="train", n_frames=4, with_boxes=True):
    anns = []
    for t in range(n_frames):
        if with_boxes:
            anns.append(FrameAnnotation(t, True, BoundingBox(0.2, 0.2, 0.6, 0.6)))
        else:
            anns.append(FrameAnnotation(t, False, None))
    return VideoRecord(f"v{i:03d}", label, split, n_frames, 30.0, tuple(anns))


def paper_style_records():
    normals = [make_record(i, "normal", "train") for i in range(80)]
    abnormals = [make_record(80 + i, "abnormal", "test") for i in range(20)]
    return normals + abnormals


class TestManifestIO:
    def test_round_trip_bit_exact(self, tmp_path):
        manifest = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=3)
        p1 = tmp_path / "m1.jsonl"
        p2 = tmp_path / "m2.jsonl"
        save_manifest(manifest, p1)
        reloaded = load_manifest(p1)
        save_manifest(reloaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert reloaded == manifest

    def test_paper_layout_loads(self, tmp_path):
        manifest = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=0)
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert len(loaded.by_split("train", "normal")) == 60
        assert len(loaded.by_split("val", "abnormal")) == 10
        assert len(loaded.by_split("test", "normal")) == 10

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ContractError):
            load_manifest(path)

    def test_abnormal_train_video_rejected(self, tmp_path):
        manifest = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=0)
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        text = path.read_text()
        # Corrupt one abnormal record's split by hand.
        bad = text.replace('"label":"abnormal","split":"val"', '"label":"abnormal","split":"train"', 1)
        path.write_text(bad)
        with pytest.raises(ContractError, match="v0"):
            load_manifest(path)

    def test_duplicate_ids_rejected(self):
        rec = make_record(1)
        with pytest.raises(ContractError):
            DatasetManifest((rec, rec), root="", seed=0)


class TestMakeSplits:
    def test_quotas_met_exactly(self):
        manifest = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=11)
        assert len(manifest.by_split("train", "normal")) == 60
        assert len(manifest.by_split("train", "abnormal")) == 0
        assert len(manifest.by_split("val", "normal")) == 10
        assert len(manifest.by_split("val", "abnormal")) == 10
        assert len(manifest.by_split("test", "normal")) == 10
        assert len(manifest.by_split("test", "abnormal")) == 10

    def test_partition_property(self):
        manifest = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=5)
        all_ids = [r.video_id for r in manifest.records]
        assert len(all_ids) == len(set(all_ids)) == 100

    def test_deterministic_given_seed(self):
        a = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=9)
        b = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=9)
        assert a == b

    def test_different_seed_shuffles(self):
        a = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=1)
        b = make_splits(paper_style_records(), DEFAULT_SPLIT_COUNTS, seed=2)
        ids_a = [r.video_id for r in a.by_split("train")]
        ids_b = [r.video_id for r in b.by_split("train")]
        assert ids_a != ids_b

    def test_insufficient_records_named(self):
        records = paper_style_records()[:50]
        with pytest.raises(ContractError, match="short by"):
            make_splits(records, DEFAULT_SPLIT_COUNTS, seed=0)


class TestFrameStorage:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = rng.random((16, 16, 3)).astype(np.float32)
        write_frame(tmp_path, "vid", 3, frame)
        src = ImageDirSource(tmp_path, "vid", 4)
        back = src.get_frame(3)
        # 8-bit storage: exact to within half a quantization step.
        assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-6

    def test_out_of_range_index(self, tmp_path):
        src = ImageDirSource(tmp_path, "vid", 2)
        with pytest.raises(IndexError):
            src.get_frame(2)


def small_training_setup(n_videos=3, frames=4):
    records = [make_record(i, "normal", "train", frames) for i in range(n_videos)]
    records += [make_record(90, "normal", "val", frames), make_record(91, "abnormal", "val", frames)]
    records += [make_record(95, "normal", "test", frames), make_record(96, "abnormal", "test", frames)]
    manifest = DatasetManifest(tuple(records), root="", seed=0)
    rng = np.random.default_rng(1)
    sources = {
        r.video_id: ArraySource(r.video_id, [rng.random((12, 12, 3)) for _ in range(frames)])
        for r in manifest.records
    }
    return manifest, sources


class TestTrainingPatchBatches:
    def test_one_patch_per_video_per_batch(self):
        manifest, sources = small_training_setup(n_videos=3)
        batches = list(
            training_patch_batches(manifest, sources, (8, 8), batch_size=3, epochs=2, seed=0)
        )
        assert len(batches) == 2
        for batch in batches:
            assert batch.size == 3
            assert len(set(batch.video_ids)) == 3

    def test_batch_exceeding_videos_rejected(self):
        manifest, sources = small_training_setup(n_videos=3)
        with pytest.raises(ContractError):
            next(training_patch_batches(manifest, sources, (8, 8), 4, 1, seed=0))

    def test_videos_without_eardrum_skipped(self, caplog):
        records = [make_record(i, "normal", "train", 4) for i in range(3)]
        records.append(make_record(3, "normal", "train", 4, with_boxes=False))
        records.append(make_record(90, "normal", "val", 4))
        records.append(make_record(91, "abnormal", "val", 4))
        manifest = DatasetManifest(tuple(records), root="", seed=0)
        rng = np.random.default_rng(2)
        sources = {
            r.video_id: ArraySource(r.video_id, [rng.random((12, 12, 3)) for _ in range(4)])
            for r in manifest.records
        }
        import logging

        with caplog.at_level(logging.WARNING):
            batches = list(training_patch_batches(manifest, sources, (8, 8), 3, 1, seed=0))
        assert len(batches) == 1
        assert "v003" in caplog.text
        assert "v003" not in batches[0].video_ids

    def test_epoch_reseeding_changes_frame_choice(self):
        manifest, sources = small_training_setup(n_videos=3, frames=6)
        batches = list(
            training_patch_batches(manifest, sources, (8, 8), 3, epochs=4, seed=0)
        )
        picks = [tuple(sorted(zip(b.video_ids, b.frame_indices))) for b in batches]
        assert len(set(picks)) > 1

    def test_deterministic_given_seed(self):
        manifest, sources = small_training_setup()
        a = list(training_patch_batches(manifest, sources, (8, 8), 3, 2, seed=4))
        b = list(training_patch_batches(manifest, sources, (8, 8), 3, 2, seed=4))
        for ba, bb in zip(a, b):
            assert ba.video_ids == bb.video_ids
            assert ba.frame_indices == bb.frame_indices
            np.testing.assert_array_equal(ba.stacked(), bb.stacked())
