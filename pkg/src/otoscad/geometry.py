"""Boxes, frame/video annotation records, and patch extraction.

Boxes are stored in fractional image coordinates (x_min, y_min, x_max, y_max),
all in [0, 1], so the same annotation applies at any frame resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NORMAL = "normal"
ABNORMAL = "abnormal"
LABELS = (NORMAL, ABNORMAL)
SPLITS = ("train", "val", "test")


class ContractError(ValueError):
    """A value violated one of the documented invariants."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in fractional image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in coords):
            raise ContractError(f"non-finite box coordinates {coords}")
        if not all(0.0 <= v <= 1.0 for v in coords):
            raise ContractError(f"box coordinates outside [0, 1]: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractError(f"degenerate box (needs x_min < x_max, y_min < y_max): {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; symmetric, 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def clip_box(x_min: float, y_min: float, x_max: float, y_max: float) -> BoundingBox:
    """Clamp raw coordinates to [0, 1] and return a valid box.

    Raises ContractError if clamping leaves a zero-area box.
    """
    coords = (x_min, y_min, x_max, y_max)
    if not all(math.isfinite(v) for v in coords):
        raise ContractError(f"non-finite coordinates {coords}")
    cx0 = min(max(x_min, 0.0), 1.0)
    cy0 = min(max(y_min, 0.0), 1.0)
    cx1 = min(max(x_max, 0.0), 1.0)
    cy1 = min(max(y_max, 0.0), 1.0)
    if not (cx0 < cx1 and cy0 < cy1):
        raise ContractError(f"box {coords} has zero area after clamping to [0, 1]")
    return BoundingBox(cx0, cy0, cx1, cy1)


@dataclass(frozen=True)
class FrameAnnotation:
    """Per-frame eardrum presence label with an optional groundtruth box."""

    frame_index: int
    has_eardrum: bool
    box: BoundingBox | None = None

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ContractError(f"negative frame_index {self.frame_index}")
        if self.has_eardrum and self.box is None:
            raise ContractError(f"frame {self.frame_index}: has_eardrum without a box")
        if not self.has_eardrum and self.box is not None:
            raise ContractError(f"frame {self.frame_index}: box on a frame without an eardrum")


@dataclass(frozen=True)
class VideoRecord:
    """One video: label, split assignment, and per-frame annotations."""

    video_id: str
    label: str
    split: str
    frame_count: int
    fps: float
    annotations: tuple[FrameAnnotation, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ContractError("empty video_id")
        if self.label not in LABELS:
            raise ContractError(f"{self.video_id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ContractError(f"{self.video_id}: unknown split {self.split!r}")
        if self.split == "train" and self.label == ABNORMAL:
            raise ContractError(f"{self.video_id}: abnormal video assigned to the train split")
        if self.frame_count < 1:
            raise ContractError(f"{self.video_id}: frame_count must be >= 1")
        if not (1.0 <= self.fps <= 240.0):
            raise ContractError(f"{self.video_id}: implausible fps {self.fps}")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        for ann in self.annotations:
            if not 0 <= ann.frame_index < self.frame_count:
                raise ContractError(
                    f"{self.video_id}: annotation frame {ann.frame_index} outside "
                    f"[0, {self.frame_count})"
                )

    def eardrum_frames(self) -> list[FrameAnnotation]:
        return [a for a in self.annotations if a.has_eardrum]


@dataclass
class PatchBatch:
    """Extracted eardrum patches ready for embedding.

    patches: float arrays H x W x 3 in [0, 1], all the same shape.
    """

    video_ids: list[str]
    frame_indices: list[int]
    patches: list[np.ndarray]

    def __post_init__(self) -> None:
        if not (len(self.video_ids) == len(self.frame_indices) == len(self.patches)):
            raise ContractError("patch batch fields have mismatched lengths")
        shapes = {p.shape for p in self.patches}
        if len(shapes) > 1:
            raise ContractError(f"patches with mixed shapes: {sorted(shapes)}")
        for p in self.patches:
            if p.ndim != 3 or p.shape[2] != 3:
                raise ContractError(f"patch must be HxWx3, got {p.shape}")

    @property
    def size(self) -> int:
        return len(self.patches)

    def stacked(self) -> np.ndarray:
        return np.stack(self.patches, axis=0)


def extract_patch(frame: np.ndarray, box: BoundingBox, out_size: tuple[int, int]) -> np.ndarray:
    """Crop the box region from a frame and bilinearly resample to out_size.

    The output pixel grid is aligned to pixel centers: output pixel (i, j) of an
    (H_out, W_out) patch samples the source at
        y = y0 + (i + 0.5) / H_out * (y1 - y0) - 0.5
        x = x0 + (j + 0.5) / W_out * (x1 - x0) - 0.5
    where (x0, x1, y0, y1) are the box edges in source pixel units and sampling
    clamps to the image border.  A full-image box at native size is the identity.
    """
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ContractError(f"frame must be HxWx3, got {frame.shape}")
    if frame.shape[0] == 0 or frame.shape[1] == 0:
        raise ContractError("empty frame")
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise ContractError(f"invalid out_size {out_size}")
    # Re-clip defensively; BoundingBox construction already guarantees validity.
    box = clip_box(*box.as_tuple())

    src_h, src_w = frame.shape[:2]
    y0, y1 = box.y_min * src_h, box.y_max * src_h
    x0, x1 = box.x_min * src_w, box.x_max * src_w

    ys = y0 + (np.arange(out_h) + 0.5) / out_h * (y1 - y0) - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) / out_w * (x1 - x0) - 0.5
    return _bilinear_sample(frame, ys, xs)


def _bilinear_sample(frame: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample frame at the grid ys x xs (pixel-center coordinates, clamped)."""
    src_h, src_w = frame.shape[:2]
    ys = np.clip(ys, 0.0, src_h - 1.0)
    xs = np.clip(xs, 0.0, src_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = frame.astype(np.float64, copy=False)
    top = img[y0[:, None], x0[None, :]] * (1 - wx) + img[y0[:, None], x1[None, :]] * wx
    bot = img[y1[:, None], x0[None, :]] * (1 - wx) + img[y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(frame.dtype if frame.dtype == np.float64 else np.float32)
