"""Single-instance eardrum detector: presence classification plus box regression.

The detector is one CNN with two heads; no anchors or proposal machinery since
each frame holds at most one eardrum.  Trained on normal-split frames only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import BackboneConfig, build_backbone
from .data import DatasetManifest, FrameSource
from .geometry import BoundingBox, ContractError, FrameAnnotation, clip_box
from .transforms import (
    ColorJitterParams,
    color_jitter,
    cutout,
    resize_image,
    rotate_with_box,
    shear_with_box,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    resize_to: int = 72
    crop_to: int = 64
    presence_cutoff: float = 0.5

    def __post_init__(self) -> None:
        if self.crop_to > self.resize_to:
            raise ContractError("crop_to must not exceed resize_to")
        if not 0.0 < self.presence_cutoff < 1.0:
            raise ContractError("presence_cutoff must lie in (0, 1)")


@dataclass(frozen=True)
class DetectorTrainParams:
    """Optimizer recipe; defaults follow the original training setup."""

    epochs: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rotation_max_deg: float = 15.0
    shear_max: float = 0.2
    jitter: ColorJitterParams = field(default_factory=ColorJitterParams)


@dataclass(frozen=True)
class Detection:
    has_eardrum: bool
    score: float
    box: BoundingBox | None

    def __post_init__(self) -> None:
        if self.has_eardrum != (self.box is not None):
            raise ContractError("detection box must be present iff has_eardrum")


class DetectorModel(nn.Module):
    """Backbone plus a 2-way presence logit head and a 4-value corner regressor."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone)
        dim = self.backbone.feature_dim
        self.cls_head = nn.Linear(dim, 2)
        self.box_head = nn.Linear(dim, 4)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.backbone(x)
        logits = self.cls_head(feats)
        boxes = torch.sigmoid(self.box_head(feats))
        return logits, boxes


def build_detector(config: DetectorConfig, seed: int) -> DetectorModel:
    torch.manual_seed(seed)
    return DetectorModel(config)


def detect_loss(
    logits: torch.Tensor, boxes: torch.Tensor, truth: Sequence[FrameAnnotation]
) -> torch.Tensor:
    """Cross-entropy on presence plus mean L1 on corners over eardrum frames.

    The L1 term averages over the 4 coordinates and then over frames whose
    truth contains an eardrum; with no such frames it contributes 0.
    """
    if len(truth) == 0:
        raise ContractError("empty batch")
    labels = torch.tensor([1 if t.has_eardrum else 0 for t in truth], device=logits.device)
    cls = F.cross_entropy(logits, labels)
    pos = [i for i, t in enumerate(truth) if t.has_eardrum]
    if not pos:
        return cls
    gt = torch.tensor(
        [truth[i].box.as_tuple() for i in pos], dtype=boxes.dtype, device=boxes.device
    )
    local = (boxes[pos] - gt).abs().mean()
    return cls + local


def _crop_annotation(
    ann: FrameAnnotation, resize_to: int, crop_to: int, top: int, left: int
) -> FrameAnnotation:
    """Recompute the annotation for a crop window (box may leave the crop)."""
    if not ann.has_eardrum:
        return FrameAnnotation(ann.frame_index, False, None)
    assert ann.box is not None
    sx = resize_to / crop_to
    try:
        box = clip_box(
            (ann.box.x_min * resize_to - left) / crop_to,
            (ann.box.y_min * resize_to - top) / crop_to,
            (ann.box.x_max * resize_to - left) / crop_to,
            (ann.box.y_max * resize_to - top) / crop_to,
        )
    except ContractError:
        return FrameAnnotation(ann.frame_index, False, None)
    return FrameAnnotation(ann.frame_index, True, box)


def augment_training_frame(
    frame: np.ndarray,
    ann: FrameAnnotation,
    config: DetectorConfig,
    params: DetectorTrainParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, FrameAnnotation]:
    """Resize, random-crop, then one randomly selected photometric/geometric op."""
    resized = resize_image(frame, (config.resize_to, config.resize_to))
    return _augment_resized(resized.astype(np.float32), ann, config, params, rng)


def _rebox(ann: FrameAnnotation, box: BoundingBox | None) -> FrameAnnotation:
    if not ann.has_eardrum:
        return ann
    if box is None:
        return FrameAnnotation(ann.frame_index, False, None)
    return FrameAnnotation(ann.frame_index, True, box)


def _to_batch_tensor(frames: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack(frames).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def train_detector(
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    model: DetectorModel,
    params: DetectorTrainParams,
    seed: int,
) -> tuple[DetectorModel, list[float]]:
    """SGD on all annotated frames of the train split; returns per-epoch losses."""
    items: list[tuple[np.ndarray, FrameAnnotation]] = []
    for rec in manifest.by_split("train"):
        src = sources[rec.video_id]
        for ann in rec.annotations:
            resized = resize_image(
                src.get_frame(ann.frame_index), (model.config.resize_to, model.config.resize_to)
            )
            items.append((resized.astype(np.float32), ann))
    if not items:
        raise ContractError("train split has no annotated frames")

    opt = torch.optim.SGD(
        model.parameters(),
        lr=params.lr,
        momentum=params.momentum,
        weight_decay=params.weight_decay,
    )
    curve: list[float] = []
    model.train()
    for epoch in range(params.epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(items))
        epoch_losses = []
        for start in range(0, len(order), params.batch_size):
            idxs = order[start : start + params.batch_size]
            frames, anns = [], []
            for i in idxs:
                resized, ann = items[int(i)]
                # Frames are cached pre-resized; skip the resize inside augment.
                aug, aug_ann = _augment_resized(resized, ann, model.config, params, rng)
                frames.append(aug)
                anns.append(aug_ann)
            batch = _to_batch_tensor(frames)
            logits, boxes = model(batch)
            loss = detect_loss(logits, boxes, anns)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"detector loss diverged at epoch {epoch} "
                    f"(batch videos {sorted({a.frame_index for a in anns})[:5]}...)"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        curve.append(float(np.mean(epoch_losses)))
        if epoch % 25 == 0 or epoch == params.epochs - 1:
            log.info("detector epoch %d/%d loss %.4f", epoch + 1, params.epochs, curve[-1])
    model.eval()
    return model, curve


def _augment_resized(
    resized: np.ndarray,
    ann: FrameAnnotation,
    config: DetectorConfig,
    params: DetectorTrainParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, FrameAnnotation]:
    margin = config.resize_to - config.crop_to
    top = int(rng.integers(0, margin + 1))
    left = int(rng.integers(0, margin + 1))
    cropped = resized[top : top + config.crop_to, left : left + config.crop_to]
    out_ann = _crop_annotation(ann, config.resize_to, config.crop_to, top, left)
    choice = int(rng.integers(0, 4))
    if choice == 0:
        cropped = color_jitter(cropped, params.jitter, rng)
    elif choice == 1:
        cropped = cutout(cropped, rng)
    elif choice == 2:
        angle = rng.uniform(-params.rotation_max_deg, params.rotation_max_deg)
        cropped, new_box = rotate_with_box(cropped, out_ann.box, angle)
        out_ann = _rebox(out_ann, new_box)
    else:
        shear = rng.uniform(-params.shear_max, params.shear_max)
        cropped, new_box = shear_with_box(cropped, out_ann.box, shear)
        out_ann = _rebox(out_ann, new_box)
    return np.ascontiguousarray(cropped, dtype=np.float32), out_ann


_MIN_BOX_SIZE = 1e-6


def _ordered_box(raw: np.ndarray) -> BoundingBox:
    """Sorted, clamped corners with a minimum side so the box stays valid."""
    x0, x1 = sorted((float(raw[0]), float(raw[2])))
    y0, y1 = sorted((float(raw[1]), float(raw[3])))
    x0, x1 = min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)
    y0, y1 = min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)
    if x1 - x0 < _MIN_BOX_SIZE:
        x1 = min(1.0, x0 + _MIN_BOX_SIZE)
        x0 = x1 - _MIN_BOX_SIZE
    if y1 - y0 < _MIN_BOX_SIZE:
        y1 = min(1.0, y0 + _MIN_BOX_SIZE)
        y0 = y1 - _MIN_BOX_SIZE
    return BoundingBox(x0, y0, x1, y1)


@torch.no_grad()
def run_detector(
    model: DetectorModel,
    frames: Sequence[np.ndarray],
    batch_size: int = 256,
) -> list[Detection]:
    """One Detection per frame; inference resizes each frame to the crop size."""
    model.eval()
    out: list[Detection] = []
    size = (model.config.crop_to, model.config.crop_to)
    for start in range(0, len(frames), batch_size):
        chunk = [resize_image(f, size).astype(np.float32) for f in frames[start : start + batch_size]]
        if not chunk:
            break
        logits, boxes = model(_to_batch_tensor(chunk))
        probs = torch.softmax(logits, dim=1)[:, 1].numpy()
        raw_boxes = boxes.numpy()
        for p, rb in zip(probs, raw_boxes):
            present = bool(p > model.config.presence_cutoff)
            out.append(
                Detection(present, float(p), _ordered_box(rb) if present else None)
            )
    return out


def eval_detection_accuracy(
    detections: Sequence[Detection],
    truths: Sequence[FrameAnnotation],
    video_labels: Sequence[str],
    iou_thresholds: Sequence[float],
) -> list[dict]:
    """Accuracy per (video label, IoU threshold) plus overall rows.

    A frame counts as correct when its presence classification matches the
    truth and, if the truth shows an eardrum, the predicted box clears the
    IoU threshold.
    """
    from .geometry import iou as box_iou

    if not (len(detections) == len(truths) == len(video_labels)):
        raise ContractError("detections, truths, and labels must align")
    for t in iou_thresholds:
        if not 0.0 < t < 1.0:
            raise ContractError(f"IoU threshold {t} outside (0, 1)")
    rows: list[dict] = []
    groups = {"normal": [], "abnormal": [], "overall": list(range(len(truths)))}
    for i, lbl in enumerate(video_labels):
        groups[lbl].append(i)
    for thr in iou_thresholds:
        for name in ("normal", "abnormal", "overall"):
            idxs = groups[name]
            if not idxs:
                continue
            correct = 0
            for i in idxs:
                det, truth = detections[i], truths[i]
                if det.has_eardrum != truth.has_eardrum:
                    continue
                if truth.has_eardrum:
                    assert truth.box is not None and det.box is not None
                    if box_iou(det.box, truth.box) <= thr:
                        continue
                correct += 1
            rows.append(
                {"label": name, "iou_threshold": thr, "accuracy": correct / len(idxs)}
            )
    return rows


def save_detector(
    model: DetectorModel, path: str | Path, seed: int, meta: dict | None = None
) -> None:
    from dataclasses import asdict

    payload = {
        "schema_version": CHECKPOINT_VERSION,
        "kind": "detector",
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "seed": seed,
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_detector(path: str | Path) -> tuple[DetectorModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "detector":
        raise ContractError(f"{path}: not a detector checkpoint")
    cfg = payload["config"]
    cfg["backbone"] = BackboneConfig(
        **{**cfg["backbone"], "widths": tuple(cfg["backbone"]["widths"])}
    )
    config = DetectorConfig(**cfg)
    model = DetectorModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
