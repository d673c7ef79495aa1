"""Synthetic otoscopy-like dataset: textured background plus a moving textured
disc standing in for the eardrum.  Abnormal videos redden the disc (whole or a
sub-region); groundtruth boxes tightly bound the rendered disc mask.

Rendering is fully deterministic given the config seed: every video derives
its own generator streams, and the anomaly tint draws from a stream separate
from geometry/texture, so a magnitude-0 abnormal video is pixel-identical to
its normal rendering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, save_manifest, write_frame
from .geometry import ABNORMAL, NORMAL, BoundingBox, ContractError, FrameAnnotation, VideoRecord

GLOBAL_TINT = "global-tint"
REGIONAL_TINT = "regional-tint"
ANOMALY_KINDS = (GLOBAL_TINT, REGIONAL_TINT)

# Reddening direction in RGB, scaled by the anomaly magnitude.
TINT_VECTOR = np.array([0.5, -0.2, -0.2])


@dataclass(frozen=True)
class SynthConfig:
    counts: dict[str, dict[str, int]] = field(
        default_factory=lambda: {
            "train": {NORMAL: 60, ABNORMAL: 0},
            "val": {NORMAL: 10, ABNORMAL: 10},
            "test": {NORMAL: 10, ABNORMAL: 10},
        }
    )
    frames_per_video: int = 32
    image_size: int = 64
    fps: float = 28.0
    radius_frac_range: tuple[float, float] = (0.12, 0.2)
    disc_presence_prob: float = 0.85
    anomaly_kind: str = GLOBAL_TINT
    anomaly_magnitude: float = 0.5
    seed: int = 7

    def __post_init__(self) -> None:
        if self.counts.get("train", {}).get(ABNORMAL, 0) != 0:
            raise ContractError("train split must not contain abnormal videos")
        lo, hi = self.radius_frac_range
        if not (0.1 <= lo <= hi):
            raise ContractError(
                "disc radius fraction must be >= 0.1 (diameter >= 20% of the image side)"
            )
        if hi >= 0.5:
            raise ContractError("disc must fit inside the frame")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ContractError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if self.anomaly_magnitude < 0:
            raise ContractError("anomaly magnitude must be >= 0")
        if self.frames_per_video < 1 or self.image_size < 16:
            raise ContractError("need frames_per_video >= 1 and image_size >= 16")
        if not 0.0 < self.disc_presence_prob <= 1.0:
            raise ContractError("disc_presence_prob must lie in (0, 1]")


@dataclass
class VideoSpec:
    """Per-video draw of textures, disc geometry, and the anomaly region."""

    video_id: str
    label: str
    split: str
    background: np.ndarray
    disc_texture: np.ndarray
    radius: float
    centers: np.ndarray        # frame x (cy, cx) in pixels
    present: np.ndarray        # frame -> bool
    brightness: np.ndarray     # per-frame illumination wobble
    region_center_offset: tuple[float, float]
    region_radius: float
    magnitude: float
    anomaly_kind: str


def _smooth_noise(
    rng: np.random.Generator, size: int, sigma: float, amplitude: float
) -> np.ndarray:
    noise = rng.standard_normal((size, size, 3))
    for ch in range(3):
        noise[..., ch] = gaussian_filter(noise[..., ch], sigma=sigma)
    scale = noise.std() or 1.0
    return noise / scale * amplitude


def make_video_spec(config: SynthConfig, index: int, label: str, split: str) -> VideoSpec:
    size = config.frames_per_video
    side = config.image_size
    geom = np.random.default_rng(np.random.SeedSequence([config.seed, index, 0]))
    anom = np.random.default_rng(np.random.SeedSequence([config.seed, index, 1]))

    bg_base = np.array(
        [0.34 + geom.uniform(0, 0.14), 0.20 + geom.uniform(0, 0.10), 0.14 + geom.uniform(0, 0.08)]
    )
    background = np.clip(bg_base + _smooth_noise(geom, side, side / 8.0, 0.05), 0.0, 1.0)

    disc_base = np.array(
        [0.72 + geom.uniform(0, 0.12), 0.56 + geom.uniform(0, 0.12), 0.48 + geom.uniform(0, 0.12)]
    )
    disc_texture = np.clip(disc_base + _smooth_noise(geom, side, side / 16.0, 0.05), 0.0, 1.0)

    radius = geom.uniform(*config.radius_frac_range) * side
    margin = radius + 2.0
    lo, hi = margin, side - margin
    centers = np.empty((size, 2))
    centers[0] = geom.uniform(lo, hi, size=2)
    step = 0.03 * side
    for t in range(1, size):
        proposal = centers[t - 1] + geom.normal(0.0, step, size=2)
        centers[t] = np.clip(proposal, lo, hi)

    present = geom.random(size) < config.disc_presence_prob
    if not present.any():
        present[0] = True
    brightness = 1.0 + geom.normal(0.0, 0.02, size=size)

    # Anomaly-only draws come from their own stream so geometry is unaffected.
    angle = anom.uniform(0, 2 * np.pi)
    dist = anom.uniform(0.0, 0.4) * radius
    region_center_offset = (float(np.sin(angle) * dist), float(np.cos(angle) * dist))
    region_radius = float(anom.uniform(0.45, 0.65) * radius)

    return VideoSpec(
        video_id=f"v{index:03d}",
        label=label,
        split=split,
        background=background,
        disc_texture=disc_texture,
        radius=float(radius),
        centers=centers,
        present=present,
        brightness=brightness,
        region_center_offset=region_center_offset,
        region_radius=region_radius,
        magnitude=config.anomaly_magnitude if label == ABNORMAL else 0.0,
        anomaly_kind=config.anomaly_kind,
    )


def _disc_alpha(side: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    # ~1.5 px antialiased edge.
    return np.clip((radius - dist) / 1.5 + 0.5, 0.0, 1.0)


def render_frame(spec: VideoSpec, frame_index: int) -> tuple[np.ndarray, np.ndarray]:
    """One frame plus its disc alpha mask (all-zero when the disc is absent)."""
    side = spec.background.shape[0]
    base = spec.background
    if spec.present[frame_index]:
        cy, cx = spec.centers[frame_index]
        alpha = _disc_alpha(side, cy, cx, spec.radius)[..., None]
        frame = base + alpha * (spec.disc_texture - base)
    else:
        alpha = np.zeros((side, side, 1))
        frame = base.copy()
    frame = np.clip(frame * spec.brightness[frame_index], 0.0, 1.0)
    if spec.magnitude > 0.0 and spec.present[frame_index]:
        tint_alpha = alpha[..., 0]
        if spec.anomaly_kind == REGIONAL_TINT:
            cy, cx = spec.centers[frame_index]
            ry = cy + spec.region_center_offset[0]
            rx = cx + spec.region_center_offset[1]
            tint_alpha = tint_alpha * _disc_alpha(side, ry, rx, spec.region_radius)
        frame = np.clip(frame + tint_alpha[..., None] * spec.magnitude * TINT_VECTOR, 0.0, 1.0)
    return frame, alpha[..., 0]


def mask_bounding_box(alpha: np.ndarray) -> BoundingBox | None:
    """Tight fractional box around alpha > 0.5; None for an empty mask."""
    mask = alpha > 0.5
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return BoundingBox(
        cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h
    )


def video_layout(config: SynthConfig) -> list[tuple[int, str, str]]:
    """Deterministic (index, label, split) assignment honoring the quotas."""
    layout = []
    index = 0
    for split in ("train", "val", "test"):
        for label in (NORMAL, ABNORMAL):
            for _ in range(config.counts.get(split, {}).get(label, 0)):
                layout.append((index, label, split))
                index += 1
    return layout


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write frames and the manifest; byte-identical across runs per seed."""
    out = Path(out_dir)
    frames_root = out / "frames"
    records = []
    for index, label, split in video_layout(config):
        spec = make_video_spec(config, index, label, split)
        annotations = []
        for t in range(config.frames_per_video):
            frame, alpha = render_frame(spec, t)
            write_frame(frames_root, spec.video_id, t, frame)
            box = mask_bounding_box(alpha)
            # Quantized pixels are what consumers see; the box targets the mask.
            if box is None:
                annotations.append(FrameAnnotation(t, False, None))
            else:
                annotations.append(FrameAnnotation(t, True, box))
        records.append(
            VideoRecord(
                video_id=spec.video_id,
                label=label,
                split=split,
                frame_count=config.frames_per_video,
                fps=config.fps,
                annotations=tuple(annotations),
            )
        )
    manifest = DatasetManifest(tuple(records), root="frames", seed=config.seed)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
