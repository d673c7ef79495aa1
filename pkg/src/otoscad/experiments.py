"""Experiment matrix: one detector, then each scoring method across seeds.

Artifacts land under the config's out_dir and carry the config hash; finished
sub-runs are reused on re-entry, so an aborted matrix keeps partial results.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import (
    ABLATION_OBJECTIVES,
    MSC_METHOD,
    OBJ_ANGULAR,
    OBJ_FULL,
    OBJ_MSC,
    OBJ_SHIFT_ANGULAR,
    SCAD_CJ_RC,
    SCAD_CJ_RR,
    SCAD_CJ_WF,
    RunConfig,
    config_hash,
)
from .data import DatasetManifest, FrameSource, load_manifest, open_sources
from .detector import (
    DetectorModel,
    build_detector,
    eval_detection_accuracy,
    load_detector,
    run_detector,
    save_detector,
    train_detector,
)
from .embedding import (
    BASELINE_OBJECTIVE,
    FULL_OBJECTIVE,
    EmbeddingModel,
    build_embedding_model,
    load_embedding,
    save_embedding,
    train_scad,
)
from .geometry import ContractError
from .losses import ANGULAR_TERM, MSC_TERM, SHIFT_ANGULAR_TERM
from .metrics import auprc, auroc, confusion_metrics, summarize_runs, write_metric_csv
from .scoring import build_index, detected_patches, score_videos, select_threshold
from .synth import generate_dataset
from .transforms import CJ_RC, CJ_RR, CJ_WF, ShiftVariant

log = logging.getLogger(__name__)

_METHOD_TABLE = {
    MSC_METHOD: (None, BASELINE_OBJECTIVE),
    SCAD_CJ_RC: (CJ_RC, FULL_OBJECTIVE),
    SCAD_CJ_RR: (CJ_RR, FULL_OBJECTIVE),
    SCAD_CJ_WF: (CJ_WF, FULL_OBJECTIVE),
    OBJ_MSC: (None, (MSC_TERM,)),
    OBJ_ANGULAR: (None, (ANGULAR_TERM,)),
    OBJ_SHIFT_ANGULAR: (CJ_WF, (SHIFT_ANGULAR_TERM,)),
    OBJ_FULL: (CJ_WF, FULL_OBJECTIVE),
}


def method_spec(method: str, config: RunConfig) -> tuple[ShiftVariant | None, tuple[str, ...]]:
    if method not in _METHOD_TABLE:
        raise ContractError(f"unknown method {method!r}")
    kind, terms = _METHOD_TABLE[method]
    variant = config.scad.make_variant(kind) if kind is not None else None
    return variant, terms


def run_seed_for(config: RunConfig, seed: int) -> int:
    # Distinct per (master seed, run seed) and stable across sessions.
    return config.seed * 100003 + seed


@dataclass
class RunOutcome:
    method: str
    seed: int
    threshold: float
    auroc: float
    auprc: float
    confusion: dict
    run_dir: str


@dataclass
class MatrixResult:
    detector_rows: list[dict]
    runs: list[RunOutcome]
    rank_summary: list[dict]
    confusion_summary: list[dict]
    ablation_summary: list[dict]


PatchCache = dict[str, tuple[list[np.ndarray], list[int]]]


def ensure_dataset(config: RunConfig) -> tuple[DatasetManifest, dict[str, FrameSource], Path]:
    out = Path(config.out_dir)
    dataset_dir = out / "dataset"
    manifest_path = dataset_dir / "manifest.jsonl"
    if manifest_path.exists():
        manifest = load_manifest(manifest_path)
    else:
        log.info("generating synthetic dataset under %s", dataset_dir)
        manifest = generate_dataset(config.synth, dataset_dir)
    sources = open_sources(manifest, dataset_dir / manifest.root)
    return manifest, sources, dataset_dir


def ensure_detector(
    config: RunConfig,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
) -> tuple[DetectorModel, list[float]]:
    out = Path(config.out_dir)
    path = out / "detector.pt"
    chash = config_hash(config)
    if path.exists():
        model, payload = load_detector(path)
        if payload["meta"].get("config_hash") == chash:
            return model, payload["meta"].get("loss_curve", [])
    log.info("training detector (%d epochs)", config.detector.train.epochs)
    model = build_detector(config.detector.model, config.seed)
    model, curve = train_detector(manifest, sources, model, config.detector.train, config.seed)
    save_detector(model, path, config.seed, meta={"config_hash": chash, "loss_curve": curve})
    return model, curve


def detector_eval_rows(
    config: RunConfig,
    detector: DetectorModel,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str = "test",
) -> list[dict]:
    detections, truths, labels = [], [], []
    for rec in manifest.by_split(split):
        src = sources[rec.video_id]
        frames = [src.get_frame(a.frame_index) for a in rec.annotations]
        dets = run_detector(detector, frames)
        detections.extend(dets)
        truths.extend(rec.annotations)
        labels.extend([rec.label] * len(rec.annotations))
    return eval_detection_accuracy(detections, truths, labels, config.scoring.iou_thresholds)


def build_patch_cache(
    detector: DetectorModel,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    split: str,
    patch_size: tuple[int, int],
) -> PatchCache:
    cache: PatchCache = {}
    for rec in manifest.by_split(split):
        cache[rec.video_id] = detected_patches(
            detector, sources[rec.video_id], rec.frame_count, patch_size
        )
    return cache


def _write_train_log(curve: list[dict], path: Path, header_meta: str) -> None:
    if not curve:
        return
    keys = ["step", "total"] + sorted(set().union(*curve) - {"step", "total"})
    rows = [{k: entry.get(k, "") for k in keys} for entry in curve]
    write_metric_csv(rows, path, header_meta)


class MissingArtifactError(RuntimeError):
    """An upstream artifact does not exist; the message names its producer."""

    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path}; produce it with `{producer}`")
        self.path = path
        self.producer = producer


def run_dir_for(config: RunConfig, method: str, seed: int) -> Path:
    return Path(config.out_dir) / "runs" / f"{method}-seed{seed}"


def train_method_checkpoint(
    config: RunConfig,
    method: str,
    seed: int,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    allow_train: bool = True,
):
    """Load the run checkpoint if it matches this config, else train and save."""
    run_dir = run_dir_for(config, method, seed)
    ckpt = run_dir / "embedding.pt"
    chash = config_hash(config)
    if ckpt.exists():
        model, center, payload = load_embedding(ckpt)
        if payload["meta"].get("config_hash") == chash and payload["meta"].get("method") == method:
            return model, center, run_dir
    if not allow_train:
        raise MissingArtifactError(ckpt, "otoscad scad-train")
    variant, terms = method_spec(method, config)
    params = replace(config.scad.train, terms=terms)
    model_seed = run_seed_for(config, seed)
    model = build_embedding_model(config.scad.embedding, model_seed)
    model, center, curve = train_scad(manifest, sources, model, variant, params, model_seed)
    save_embedding(model, center, ckpt, model_seed, meta={"config_hash": chash, "method": method})
    _write_train_log(
        curve, run_dir / "train_log.csv", f"config_hash={chash} seed={seed} method={method}"
    )
    return model, center, run_dir


def run_single(
    config: RunConfig,
    method: str,
    seed: int,
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    detector: DetectorModel,
    val_cache: PatchCache | None = None,
    test_cache: PatchCache | None = None,
    allow_train: bool = True,
) -> RunOutcome:
    """Train one method at one seed, pick the threshold on val, report on test."""
    chash = config_hash(config)
    meta_str = f"config_hash={chash} seed={seed} method={method}"
    model, center, run_dir = train_method_checkpoint(
        config, method, seed, manifest, sources, allow_train
    )
    index = build_index(model, manifest, sources, k=config.scoring.k)
    policy = config.scoring.undetermined_policy
    val_report = score_videos(
        model, index, detector, manifest, sources, "val",
        threshold=math.inf, undetermined_policy=policy,
        meta={"config_hash": chash, "method": method, "seed": seed},
        patch_cache=val_cache,
    )
    vscores, vlabels = val_report.labeled_scores()
    threshold = select_threshold(vscores, vlabels, config.scoring.target_sensitivity)
    test_report = score_videos(
        model, index, detector, manifest, sources, "test",
        threshold=threshold, undetermined_policy=policy,
        meta={"config_hash": chash, "method": method, "seed": seed},
        patch_cache=test_cache,
    )
    tscores, tlabels = test_report.labeled_scores()
    outcome = RunOutcome(
        method=method,
        seed=seed,
        threshold=threshold,
        auroc=auroc(tscores, tlabels),
        auprc=auprc(tscores, tlabels),
        confusion=confusion_metrics(*test_report.decisions()),
        run_dir=str(run_dir),
    )
    from .scoring import save_report, write_frame_score_csv

    save_report(val_report, run_dir / "report_val.json")
    save_report(test_report, run_dir / "report_test.json")
    write_frame_score_csv(test_report, run_dir / "frame_scores_test.csv", meta_str)
    (run_dir / "metrics.json").write_text(
        json.dumps(
            {
                "config_hash": chash,
                "method": method,
                "seed": seed,
                "threshold": threshold,
                "auroc": outcome.auroc,
                "auprc": outcome.auprc,
                "confusion": outcome.confusion,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return outcome


def _summarize(runs: list[RunOutcome], methods: tuple[str, ...]) -> list[dict]:
    rows = []
    for metric in ("auroc", "auprc"):
        per_method = {
            m: [getattr(r, metric) for r in runs if r.method == m] for m in methods
        }
        per_method = {m: v for m, v in per_method.items() if v}
        for entry in summarize_runs(per_method):
            rows.append({"metric": metric, **entry})
    return rows


def _summarize_confusion(runs: list[RunOutcome], methods: tuple[str, ...]) -> list[dict]:
    rows = []
    for m in methods:
        mruns = [r for r in runs if r.method == m]
        if not mruns:
            continue
        row: dict = {"method": m, "n": len(mruns)}
        for key in ("accuracy", "sensitivity", "specificity", "precision"):
            vals = [r.confusion[key] for r in mruns if r.confusion[key] is not None]
            if vals:
                row[f"{key}_mean"] = float(np.mean(vals))
                row[f"{key}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            else:
                row[f"{key}_mean"] = ""
                row[f"{key}_std"] = ""
        rows.append(row)
    return rows


def run_matrix(
    config: RunConfig,
    include_ablation: bool = True,
) -> MatrixResult:
    """Full protocol: detector once, every method per seed, summary tables."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    manifest, sources, _ = ensure_dataset(config)
    detector, _ = ensure_detector(config, manifest, sources)
    det_rows = detector_eval_rows(config, detector, manifest, sources)
    write_metric_csv(det_rows, out / "detector_accuracy.csv", f"config_hash={chash}")

    patch_size = config.scad.embedding.patch_size
    val_cache = build_patch_cache(detector, manifest, sources, "val", patch_size)
    test_cache = build_patch_cache(detector, manifest, sources, "test", patch_size)

    methods = list(config.matrix.methods)
    if include_ablation:
        methods += [m for m in config.matrix.ablation_objectives if m not in methods]
    runs: list[RunOutcome] = []
    for method in methods:
        for seed in config.matrix.seeds:
            log.info("matrix run: method=%s seed=%d", method, seed)
            runs.append(
                run_single(
                    config, method, seed, manifest, sources, detector, val_cache, test_cache
                )
            )

    rank_summary = _summarize(runs, config.matrix.methods)
    confusion_summary = _summarize_confusion(runs, config.matrix.methods)
    ablation_summary = (
        _summarize(runs, config.matrix.ablation_objectives) if include_ablation else []
    )
    write_metric_csv(rank_summary, out / "summary_rank_metrics.csv", f"config_hash={chash}")
    write_metric_csv(
        confusion_summary, out / "summary_confusion.csv", f"config_hash={chash}"
    )
    if ablation_summary:
        write_metric_csv(ablation_summary, out / "summary_ablation.csv", f"config_hash={chash}")
    return MatrixResult(det_rows, runs, rank_summary, confusion_summary, ablation_summary)


def evaluate_runs_on(
    config: RunConfig,
    alt_manifest: DatasetManifest,
    alt_sources: dict[str, FrameSource],
    methods: tuple[str, ...] | None = None,
    split: str = "test",
) -> dict[str, list[float]]:
    """Score saved matrix runs against another dataset's split (AUROC per seed).

    The reference index still comes from each run's own training data; only
    the scored videos change.  Used for null-calibration checks.
    """
    out = Path(config.out_dir)
    manifest, sources, _ = ensure_dataset(config)
    detector, _ = ensure_detector(config, manifest, sources)
    patch_size = config.scad.embedding.patch_size
    cache = build_patch_cache(detector, alt_manifest, alt_sources, split, patch_size)
    results: dict[str, list[float]] = {}
    for method in methods or config.matrix.methods:
        results[method] = []
        for seed in config.matrix.seeds:
            ckpt = out / "runs" / f"{method}-seed{seed}" / "embedding.pt"
            if not ckpt.exists():
                raise ContractError(f"missing run checkpoint {ckpt}; run the matrix first")
            model, center, _ = load_embedding(ckpt)
            index = build_index(model, manifest, sources, k=config.scoring.k)
            report = score_videos(
                model, index, detector, alt_manifest, alt_sources, split,
                threshold=math.inf,
                undetermined_policy=config.scoring.undetermined_policy,
                patch_cache=cache,
            )
            scores, labels = report.labeled_scores()
            results[method].append(auroc(scores, labels))
    return results
