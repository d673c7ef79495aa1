"""kNN anomaly scores, video-level aggregation, and threshold selection.

Frame score: sum of cosine distances to the k nearest training embeddings.
Video score: mean frame score over detected eardrum frames.  A video with no
detected eardrum is reported as undetermined, never silently dropped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, FrameSource, all_eardrum_patches
from .detector import Detection, DetectorModel, run_detector
from .embedding import Center, EmbeddingModel, embed
from .geometry import ContractError, extract_patch

REPORT_SCHEMA = "otoscad-report"
REPORT_VERSION = 1

UNDETERMINED_POLICIES = ("abnormal", "normal", "exclude")


@dataclass(frozen=True)
class ReferenceIndex:
    """All training-patch embeddings plus the neighbor count k (exact scan)."""

    embeddings: np.ndarray
    k: int = 2

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ContractError("reference index needs a nonempty 2-D embedding array")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.k > emb.shape[0]:
            raise ContractError(f"k={self.k} exceeds the {emb.shape[0]} reference vectors")
        norms = np.linalg.norm(emb, axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ContractError("reference embeddings must be unit-norm")
        object.__setattr__(self, "embeddings", emb)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def build_index(
    model: EmbeddingModel,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    k: int = 2,
) -> ReferenceIndex:
    """Index over every annotated training patch (groundtruth boxes)."""
    patches = all_eardrum_patches(manifest, sources, "train", model.config.patch_size)
    return ReferenceIndex(embed(model, patches.patches), k=k)


def frame_score(index: ReferenceIndex, e: np.ndarray) -> float:
    """Sum of (1 - cosine similarity) over the k nearest references."""
    return float(frame_scores(index, np.asarray(e, dtype=np.float64)[None, :])[0])


def frame_scores(index: ReferenceIndex, embeddings: np.ndarray) -> np.ndarray:
    """Vectorized frame_score over rows (exhaustive exact scan)."""
    sims = np.asarray(embeddings, dtype=np.float64) @ index.embeddings.T
    k = index.k
    if k == sims.shape[1]:
        top = sims
    else:
        part = np.partition(sims, sims.shape[1] - k, axis=1)
        top = part[:, sims.shape[1] - k :]
    return (1.0 - top).sum(axis=1)


def video_score(scores: Sequence[float]) -> float | None:
    """Mean frame score; None marks an undetermined (no detected frame) video."""
    if len(scores) == 0:
        return None
    return float(np.mean(scores))


def select_threshold(
    val_scores: Sequence[float], val_labels: Sequence[str], target_sensitivity: float
) -> float:
    """Largest threshold whose validation sensitivity meets the target.

    Decisions use score > threshold with abnormal as positive.  The sweep
    domain is the observed scores, midpoints between adjacent distinct scores,
    and one sentinel below the minimum; target 0 returns +inf (flag nothing).
    """
    if len(val_scores) != len(val_labels):
        raise ContractError("scores and labels must align")
    labels = set(val_labels)
    if labels - {"normal", "abnormal"}:
        raise ContractError(f"unknown labels {labels - {'normal', 'abnormal'}}")
    if "normal" not in labels or "abnormal" not in labels:
        raise ContractError("validation set must contain both normal and abnormal videos")
    if not 0.0 <= target_sensitivity <= 1.0:
        raise ContractError("target sensitivity must lie in [0, 1]")
    if target_sensitivity == 0.0:
        return math.inf
    abnormal = np.array(
        [s for s, l in zip(val_scores, val_labels) if l == "abnormal"], dtype=np.float64
    )
    uniq = np.unique(np.asarray(val_scores, dtype=np.float64))
    candidates = [uniq[0] - 1.0]
    for lo, hi in zip(uniq[:-1], uniq[1:]):
        candidates.append((lo + hi) / 2.0)
    candidates.extend(uniq.tolist())
    best = None
    for psi in candidates:
        sens = float((abnormal > psi).mean())
        if sens >= target_sensitivity and (best is None or psi > best):
            best = psi
    if best is None:
        raise ContractError(f"no threshold reaches sensitivity {target_sensitivity}")
    return float(best)


@dataclass
class VideoOutcome:
    video_id: str
    label: str
    score: float | None
    undetermined: bool
    decision: bool
    n_frames: int


@dataclass
class AnomalyReport:
    """Per-frame and per-video anomaly scores with threshold decisions."""

    threshold: float
    undetermined_policy: str
    videos: list[VideoOutcome] = field(default_factory=list)
    frame_scores: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.undetermined_policy not in UNDETERMINED_POLICIES:
            raise ContractError(f"unknown undetermined policy {self.undetermined_policy!r}")

    def undetermined_videos(self) -> list[VideoOutcome]:
        return [v for v in self.videos if v.undetermined]

    def labeled_scores(self) -> tuple[list[float], list[str]]:
        """Video scores with the undetermined policy applied (for rank metrics)."""
        finite = [v.score for v in self.videos if v.score is not None]
        hi = (max(finite) if finite else 0.0) + 1.0
        lo = (min(finite) if finite else 0.0) - 1.0
        scores, labels = [], []
        for v in self.videos:
            if v.undetermined:
                if self.undetermined_policy == "exclude":
                    continue
                scores.append(hi if self.undetermined_policy == "abnormal" else lo)
            else:
                assert v.score is not None
                scores.append(v.score)
            labels.append(v.label)
        return scores, labels

    def decisions(self) -> tuple[list[bool], list[str]]:
        out_d, out_l = [], []
        for v in self.videos:
            if v.undetermined and self.undetermined_policy == "exclude":
                continue
            out_d.append(v.decision)
            out_l.append(v.label)
        return out_d, out_l


def decide(score: float | None, threshold: float, policy: str) -> bool:
    if score is None:
        return policy == "abnormal"
    return score > threshold


def detected_patches(
    detector: DetectorModel,
    src: FrameSource,
    frame_count: int,
    patch_size: tuple[int, int],
) -> tuple[list[np.ndarray], list[int]]:
    """Patches cropped from detected boxes, with their frame indices."""
    frames = [src.get_frame(i) for i in range(frame_count)]
    detections = run_detector(detector, frames)
    patches, indices = [], []
    for i, det in enumerate(detections):
        if det.has_eardrum and det.box is not None:
            patches.append(extract_patch(frames[i], det.box, patch_size))
            indices.append(i)
    return patches, indices


def score_videos(
    emb_model: EmbeddingModel,
    index: ReferenceIndex,
    detector: DetectorModel,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str,
    threshold: float,
    undetermined_policy: str = "abnormal",
    meta: dict | None = None,
    patch_cache: dict[str, tuple[list[np.ndarray], list[int]]] | None = None,
) -> AnomalyReport:
    """Score every video of a split using detector-provided eardrum patches.

    patch_cache short-circuits detection when the same detector output is
    scored repeatedly (e.g. across the experiment matrix).
    """
    report = AnomalyReport(
        threshold=threshold, undetermined_policy=undetermined_policy, meta=meta or {}
    )
    patch_size = emb_model.config.patch_size
    for rec in manifest.by_split(split):
        if patch_cache is not None and rec.video_id in patch_cache:
            patches, indices = patch_cache[rec.video_id]
        else:
            patches, indices = detected_patches(
                detector, sources[rec.video_id], rec.frame_count, patch_size
            )
        if patches:
            scores = frame_scores(index, embed(emb_model, patches))
            per_frame = [(idx, float(s)) for idx, s in zip(indices, scores)]
            vscore = video_score([s for _, s in per_frame])
        else:
            per_frame = []
            vscore = None
        report.frame_scores[rec.video_id] = per_frame
        report.videos.append(
            VideoOutcome(
                video_id=rec.video_id,
                label=rec.label,
                score=vscore,
                undetermined=vscore is None,
                decision=decide(vscore, threshold, undetermined_policy),
                n_frames=len(per_frame),
            )
        )
    return report


def collect_detected_embeddings(
    emb_model: EmbeddingModel,
    detector: DetectorModel,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str,
) -> list[tuple[str, int, str, np.ndarray]]:
    """(video_id, frame_index, label, embedding) for every detected frame."""
    rows: list[tuple[str, int, str, np.ndarray]] = []
    patch_size = emb_model.config.patch_size
    for rec in manifest.by_split(split):
        patches, indices = detected_patches(
            detector, sources[rec.video_id], rec.frame_count, patch_size
        )
        if not patches:
            continue
        feats = embed(emb_model, patches)
        rows.extend(
            (rec.video_id, idx, rec.label, feats[j]) for j, idx in enumerate(indices)
        )
    return rows


def save_report(report: AnomalyReport, path: str | Path) -> None:
    """Canonical JSON, so save -> load -> save is byte-identical."""
    payload = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "threshold": report.threshold,
        "undetermined_policy": report.undetermined_policy,
        "meta": report.meta,
        "videos": [
            {
                "video_id": v.video_id,
                "label": v.label,
                "score": v.score,
                "undetermined": v.undetermined,
                "decision": v.decision,
                "n_frames": v.n_frames,
            }
            for v in report.videos
        ],
        "frame_scores": report.frame_scores,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_report(path: str | Path) -> AnomalyReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema") != REPORT_SCHEMA:
        raise ContractError(f"{path}: not an {REPORT_SCHEMA} file")
    report = AnomalyReport(
        threshold=payload["threshold"],
        undetermined_policy=payload["undetermined_policy"],
        meta=payload["meta"],
    )
    for v in payload["videos"]:
        report.videos.append(VideoOutcome(**v))
    report.frame_scores = {
        vid: [(int(i), float(s)) for i, s in rows]
        for vid, rows in payload["frame_scores"].items()
    }
    return report


def write_frame_score_csv(report: AnomalyReport, path: str | Path, header_meta: str = "") -> None:
    lines = []
    if header_meta:
        lines.append(f"# {header_meta}")
    lines.append("video_id,frame_index,score")
    for vid in sorted(report.frame_scores):
        for idx, s in report.frame_scores[vid]:
            lines.append(f"{vid},{idx},{s!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
