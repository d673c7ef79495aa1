"""Manifest files, split assignment, frame access, and patch dataset assembly.

Manifest format: line-delimited JSON, one header line then one video record
per line.  Frames live under <root>/<video_id>/<frame_index:05d>.png as 8-bit
RGB; FrameSource abstracts that so tests can feed in-memory arrays.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from .geometry import (
    ABNORMAL,
    LABELS,
    NORMAL,
    SPLITS,
    BoundingBox,
    ContractError,
    FrameAnnotation,
    PatchBatch,
    VideoRecord,
    extract_patch,
)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "otoscad-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[VideoRecord, ...]
    root: str
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ContractError("manifest contains no videos")
        ids = [r.video_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({v for v in ids if ids.count(v) > 1})
            raise ContractError(f"duplicate video_ids: {dupes}")

    def by_split(self, split: str, label: str | None = None) -> list[VideoRecord]:
        out = [r for r in self.records if r.split == split]
        if label is not None:
            out = [r for r in out if r.label == label]
        return out

    def get(self, video_id: str) -> VideoRecord:
        for r in self.records:
            if r.video_id == video_id:
                return r
        raise KeyError(video_id)


def _annotation_to_json(ann: FrameAnnotation) -> dict:
    out: dict = {"frame_index": ann.frame_index, "has_eardrum": ann.has_eardrum}
    if ann.box is not None:
        out["box"] = list(ann.box.as_tuple())
    return out


def _annotation_from_json(obj: dict) -> FrameAnnotation:
    box = BoundingBox(*obj["box"]) if obj.get("box") is not None else None
    return FrameAnnotation(int(obj["frame_index"]), bool(obj["has_eardrum"]), box)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest; output is canonical, so reloads round-trip bit-exactly."""
    lines = [
        json.dumps(
            {
                "schema": MANIFEST_SCHEMA,
                "version": MANIFEST_VERSION,
                "root": manifest.root,
                "seed": manifest.seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
    ]
    for rec in manifest.records:
        lines.append(
            json.dumps(
                {
                    "video_id": rec.video_id,
                    "label": rec.label,
                    "split": rec.split,
                    "frame_count": rec.frame_count,
                    "fps": rec.fps,
                    "annotations": [_annotation_to_json(a) for a in rec.annotations],
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest; invariant violations name the record."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ContractError(f"{path}: empty manifest file")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ContractError(f"{path}: not a {MANIFEST_SCHEMA} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ContractError(f"{path}: unsupported manifest version {header.get('version')}")
    records = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        vid = obj.get("video_id", "<missing id>")
        try:
            records.append(
                VideoRecord(
                    video_id=obj["video_id"],
                    label=obj["label"],
                    split=obj["split"],
                    frame_count=int(obj["frame_count"]),
                    fps=float(obj["fps"]),
                    annotations=tuple(_annotation_from_json(a) for a in obj["annotations"]),
                )
            )
        except (ContractError, KeyError) as exc:
            raise ContractError(f"{path}: record {vid!r}: {exc}") from exc
    if not records:
        raise ContractError(f"{path}: manifest has a header but no video records")
    return DatasetManifest(tuple(records), root=header["root"], seed=int(header["seed"]))


SplitCounts = dict[str, dict[str, int]]

# 60/10/10 normal and 0/10/10 abnormal videos.
DEFAULT_SPLIT_COUNTS: SplitCounts = {
    "train": {NORMAL: 60, ABNORMAL: 0},
    "val": {NORMAL: 10, ABNORMAL: 10},
    "test": {NORMAL: 10, ABNORMAL: 10},
}


def make_splits(
    records: Sequence[VideoRecord],
    counts: SplitCounts,
    seed: int,
    root: str = "",
) -> DatasetManifest:
    """Assign videos to splits by per-split per-label quotas, deterministically.

    Incoming split values are ignored; quotas must be met exactly.
    """
    for split in counts:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r} in quota table")
        if counts[split].get(ABNORMAL, 0) > 0 and split == "train":
            raise ContractError("train quota requests abnormal videos")
    rng = np.random.default_rng(seed)
    pools: dict[str, list[VideoRecord]] = {label: [] for label in LABELS}
    for rec in records:
        pools[rec.label].append(rec)
    for label in LABELS:
        pools[label].sort(key=lambda r: r.video_id)
        perm = rng.permutation(len(pools[label]))
        pools[label] = [pools[label][i] for i in perm]
        need = sum(counts.get(s, {}).get(label, 0) for s in SPLITS)
        if need > len(pools[label]):
            raise ContractError(
                f"need {need} {label} videos but only {len(pools[label])} available "
                f"(short by {need - len(pools[label])})"
            )
    out: list[VideoRecord] = []
    cursors = {label: 0 for label in LABELS}
    for split in SPLITS:
        for label in LABELS:
            quota = counts.get(split, {}).get(label, 0)
            take = pools[label][cursors[label] : cursors[label] + quota]
            cursors[label] += quota
            out.extend(replace(rec, split=split) for rec in take)
    return DatasetManifest(tuple(out), root=root, seed=seed)


class FrameSource(Protocol):
    """Yields frames of one video by dense index as float HxWx3 in [0, 1]."""

    video_id: str
    frame_count: int

    def get_frame(self, index: int) -> np.ndarray: ...


def frame_path(root: str | Path, video_id: str, index: int) -> Path:
    return Path(root) / video_id / f"{index:05d}.png"


def write_frame(root: str | Path, video_id: str, index: int, frame: np.ndarray) -> Path:
    """Quantize a [0, 1] float frame to 8-bit and write it as PNG."""
    path = frame_path(root, video_id, index)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


class ImageDirSource:
    """FrameSource over a directory of still images (single consumer)."""

    def __init__(self, root: str | Path, video_id: str, frame_count: int):
        self.root = Path(root)
        self.video_id = video_id
        self.frame_count = frame_count

    def get_frame(self, index: int) -> np.ndarray:
        if not 0 <= index < self.frame_count:
            raise IndexError(f"{self.video_id}: frame {index} outside [0, {self.frame_count})")
        path = frame_path(self.root, self.video_id, index)
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return arr


class ArraySource:
    """In-memory FrameSource for tests."""

    def __init__(self, video_id: str, frames: Sequence[np.ndarray]):
        self.video_id = video_id
        self.frames = [np.asarray(f, dtype=np.float32) for f in frames]
        self.frame_count = len(self.frames)

    def get_frame(self, index: int) -> np.ndarray:
        return self.frames[index]


def open_sources(manifest: DatasetManifest, root: str | Path | None = None) -> dict[str, FrameSource]:
    """One ImageDirSource per video, rooted at the manifest root by default."""
    base = Path(root) if root is not None else Path(manifest.root)
    return {
        r.video_id: ImageDirSource(base, r.video_id, r.frame_count) for r in manifest.records
    }


def iter_annotated_frames(
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str,
) -> Iterator[tuple[VideoRecord, FrameAnnotation, np.ndarray]]:
    """All annotated frames of a split, with pixels, in manifest order."""
    for rec in manifest.by_split(split):
        src = sources[rec.video_id]
        for ann in rec.annotations:
            yield rec, ann, src.get_frame(ann.frame_index)


def training_patch_batches(
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    patch_size: tuple[int, int],
    batch_size: int,
    epochs: int,
    seed: int,
) -> Iterator[PatchBatch]:
    """Stream of groundtruth-box patch batches, one patch per video per epoch.

    Every emitted batch holds patches from batch_size distinct videos.  Within
    a video the frame is drawn uniformly over its annotated eardrum frames,
    reseeded per epoch; leftover videos that do not fill a batch are dropped.
    """
    usable: list[VideoRecord] = []
    for rec in manifest.by_split("train"):
        if rec.eardrum_frames():
            usable.append(rec)
        else:
            log.warning("video %s has no eardrum frames; skipped", rec.video_id)
    if batch_size > len(usable):
        raise ContractError(
            f"batch size {batch_size} exceeds the {len(usable)} usable training videos"
        )
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(usable))
        picked: list[tuple[str, int, np.ndarray]] = []
        for idx in order:
            rec = usable[idx]
            frames = rec.eardrum_frames()
            ann = frames[int(rng.integers(0, len(frames)))]
            frame = sources[rec.video_id].get_frame(ann.frame_index)
            assert ann.box is not None
            patch = extract_patch(frame, ann.box, patch_size)
            picked.append((rec.video_id, ann.frame_index, patch))
        for start in range(0, len(picked) - batch_size + 1, batch_size):
            chunk = picked[start : start + batch_size]
            yield PatchBatch(
                video_ids=[c[0] for c in chunk],
                frame_indices=[c[1] for c in chunk],
                patches=[c[2] for c in chunk],
            )


def all_eardrum_patches(
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str,
    patch_size: tuple[int, int],
) -> PatchBatch:
    """Every annotated eardrum patch of a split (groundtruth boxes)."""
    vids: list[str] = []
    idxs: list[int] = []
    patches: list[np.ndarray] = []
    for rec, ann, frame in iter_annotated_frames(manifest, sources, split):
        if not ann.has_eardrum:
            continue
        assert ann.box is not None
        vids.append(rec.video_id)
        idxs.append(ann.frame_index)
        patches.append(extract_patch(frame, ann.box, patch_size))
    return PatchBatch(vids, idxs, patches)
