"""Embedding model, training center, and the shift-contrastive training loop."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbones import BackboneConfig, build_backbone, set_trainable_stages
from .data import DatasetManifest, FrameSource, all_eardrum_patches, training_patch_batches
from .geometry import ContractError, PatchBatch
from .losses import (
    ANGULAR_TERM,
    MSC_TERM,
    SHIFT_ANGULAR_TERM,
    angular_loss,
    msc_loss,
    shift_angular_loss,
)
from .transforms import PairAugmentParams, ShiftVariant, apply_shift, augment_view

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

FULL_OBJECTIVE = (MSC_TERM, SHIFT_ANGULAR_TERM)
BASELINE_OBJECTIVE = (MSC_TERM, ANGULAR_TERM)


@dataclass(frozen=True)
class EmbeddingConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    patch_size: tuple[int, int] = (32, 32)


class EmbeddingModel(nn.Module):
    """Backbone followed by l2 normalization onto the unit sphere."""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone)
        self.feature_dim = self.backbone.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(x)
        return feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)


def build_embedding_model(config: EmbeddingConfig, seed: int) -> EmbeddingModel:
    torch.manual_seed(seed)
    return EmbeddingModel(config)


@dataclass(frozen=True)
class Center:
    """Normalized mean of the training embeddings, with provenance."""

    vector: np.ndarray
    model_id: str = ""
    data_hash: str = ""

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float64)
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
            raise ContractError("center must be unit-norm")
        object.__setattr__(self, "vector", v)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.vector).to(dtype)


def _patch_tensor(patches: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack(patches).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def embed(model: EmbeddingModel, patches: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Unit-norm feature vectors, one row per patch (inference mode)."""
    model.eval()
    chunks = []
    for start in range(0, len(patches), batch_size):
        feats = model(_patch_tensor(patches[start : start + batch_size]))
        if not torch.isfinite(feats).all():
            raise RuntimeError("non-finite activation while embedding")
        chunks.append(feats.numpy())
    if not chunks:
        return np.zeros((0, model.feature_dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def data_fingerprint(patches: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in patches:
        h.update(np.ascontiguousarray(p, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def compute_center(
    model: EmbeddingModel, patches: Sequence[np.ndarray], model_id: str = ""
) -> Center:
    """Normalized mean embedding of the training patches."""
    if len(patches) == 0:
        raise ContractError("cannot compute a center from zero patches")
    feats = embed(model, patches)
    mean = feats.mean(axis=0).astype(np.float64)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-8:
        raise ContractError("training embeddings average to (near) zero; center undefined")
    return Center(mean / norm, model_id=model_id, data_hash=data_fingerprint(patches))


@dataclass
class ScadBatch:
    """Positive-pair views plus optional shift-transformed samples."""

    views1: list[np.ndarray]
    views2: list[np.ndarray]
    shifted: list[np.ndarray]
    tau: float

    def __post_init__(self) -> None:
        if len(self.views1) != len(self.views2):
            raise ContractError("positive pair halves differ in length")
        if self.tau <= 0:
            raise ContractError("temperature must be > 0")


@dataclass(frozen=True)
class ScadTrainParams:
    """Fine-tuning recipe; optimizer defaults follow the original setup."""

    epochs: int = 5000
    batch_size: int = 60
    lr: float = 1e-5
    momentum: float = 0.0
    weight_decay: float = 5e-5
    tau: float = 0.25
    terms: tuple[str, ...] = FULL_OBJECTIVE
    trainable_stages: int | None = None
    include_shifted_in_msc: bool = True
    augment_before_shift: bool = True
    center_refresh_every: int = 0
    pair_augment: PairAugmentParams = field(default_factory=PairAugmentParams)


def build_scad_batch(
    patches: PatchBatch,
    variant: ShiftVariant | None,
    params: ScadTrainParams,
    rng: np.random.Generator,
) -> ScadBatch:
    """Augment each patch into a positive pair, then shift one view per pair."""
    views1, views2, shifted = [], [], []
    for patch in patches.patches:
        v1 = augment_view(patch, params.pair_augment, rng)
        v2 = augment_view(patch, params.pair_augment, rng)
        views1.append(v1)
        views2.append(v2)
        if variant is not None:
            base = v1 if rng.random() < 0.5 else v2
            if not params.augment_before_shift:
                base = augment_view(patch, params.pair_augment, rng)
            shifted.append(apply_shift(base, variant, rng))
    return ScadBatch(views1, views2, shifted, params.tau)


def scad_batch_losses(
    model: EmbeddingModel,
    batch: ScadBatch,
    center: Center,
    terms: tuple[str, ...],
    include_shifted_in_msc: bool = True,
) -> dict[str, torch.Tensor]:
    """Per-term loss values for one batch (single forward pass for BN stats)."""
    n = len(batch.views1)
    m = len(batch.shifted)
    pixels = _patch_tensor(batch.views1 + batch.views2 + (batch.shifted or []))
    feats = model(pixels)
    if not torch.isfinite(feats).all():
        raise RuntimeError("non-finite embedding during training")
    views = feats[: 2 * n]
    shifted = feats[2 * n : 2 * n + m] if m else None
    c = center.as_tensor(views.dtype)
    out: dict[str, torch.Tensor] = {}
    if MSC_TERM in terms:
        out[MSC_TERM] = msc_loss(views, c, batch.tau, shifted, include_shifted_in_msc)
    if ANGULAR_TERM in terms:
        out[ANGULAR_TERM] = angular_loss(views, c)
    if SHIFT_ANGULAR_TERM in terms:
        if shifted is None:
            raise ContractError("shift_angular term requires shifted samples")
        out[SHIFT_ANGULAR_TERM] = shift_angular_loss(views, shifted, c)
    return out


def train_scad(
    manifest: DatasetManifest,
    sources: dict[str, FrameSource],
    model: EmbeddingModel,
    variant: ShiftVariant | None,
    params: ScadTrainParams,
    seed: int,
) -> tuple[EmbeddingModel, Center, list[dict]]:
    """Fine-tune the embedding on train-split patches; returns the frozen center.

    variant=None trains the baseline objective (no shift transforms); the
    center comes from the initial model over all training patches and stays
    fixed unless center_refresh_every asks for periodic recomputation.
    """
    if variant is None and SHIFT_ANGULAR_TERM in params.terms:
        raise ContractError("objective includes shift_angular but no shift variant given")
    train_patches = all_eardrum_patches(manifest, sources, "train", model.config.patch_size)
    center = compute_center(model, train_patches.patches, model_id=f"init-seed{seed}")
    set_trainable_stages(model.backbone, params.trainable_stages)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(
        trainable, lr=params.lr, momentum=params.momentum, weight_decay=params.weight_decay
    )
    curve: list[dict] = []
    batches = training_patch_batches(
        manifest,
        sources,
        model.config.patch_size,
        params.batch_size,
        params.epochs,
        seed,
    )
    model.train()
    aug_rng = np.random.default_rng([seed, 0xA06])
    for step, patch_batch in enumerate(batches):
        if params.center_refresh_every and step and step % params.center_refresh_every == 0:
            center = compute_center(model, train_patches.patches, model_id=f"step{step}")
            model.train()
        batch = build_scad_batch(patch_batch, variant, params, aug_rng)
        losses = scad_batch_losses(model, batch, center, params.terms, params.include_shifted_in_msc)
        total = sum(losses.values())
        if not torch.isfinite(total):
            raise RuntimeError(
                f"training loss diverged at step {step}; batch videos "
                f"{patch_batch.video_ids[:5]}..."
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        row = {"step": step, "total": float(total.detach())}
        row.update({k: float(v.detach()) for k, v in losses.items()})
        curve.append(row)
        if step % 100 == 0:
            log.info("scad step %d loss %.4f", step, row["total"])
    model.eval()
    return model, center, curve


def save_embedding(
    model: EmbeddingModel,
    center: Center,
    path: str | Path,
    seed: int,
    meta: dict | None = None,
) -> None:
    from dataclasses import asdict

    payload = {
        "schema_version": CHECKPOINT_VERSION,
        "kind": "embedding",
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "center": center.vector,
        "center_provenance": {"model_id": center.model_id, "data_hash": center.data_hash},
        "seed": seed,
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_embedding(path: str | Path) -> tuple[EmbeddingModel, Center, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "embedding":
        raise ContractError(f"{path}: not an embedding checkpoint")
    cfg = payload["config"]
    cfg["backbone"] = BackboneConfig(
        **{**cfg["backbone"], "widths": tuple(cfg["backbone"]["widths"])}
    )
    cfg["patch_size"] = tuple(cfg["patch_size"])
    model = EmbeddingModel(EmbeddingConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    prov = payload.get("center_provenance", {})
    center = Center(payload["center"], prov.get("model_id", ""), prov.get("data_hash", ""))
    return model, center, payload
