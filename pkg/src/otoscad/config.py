"""Run configuration: one declarative file covering every pipeline stage.

Loading is strict (unknown keys rejected, every field validated by the owning
dataclass) and the canonical serialization hash stamps all output artifacts.
"""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .detector import DetectorConfig, DetectorTrainParams
from .embedding import EmbeddingConfig, ScadTrainParams
from .geometry import ContractError
from .synth import SynthConfig
from .transforms import ColorJitterParams, ShiftVariant

CONFIG_SCHEMA_VERSION = 1

MSC_METHOD = "msc"
SCAD_CJ_RC = "scad-cj-rc"
SCAD_CJ_RR = "scad-cj-rr"
SCAD_CJ_WF = "scad-cj-wf"
TABLE_METHODS = (MSC_METHOD, SCAD_CJ_RC, SCAD_CJ_RR, SCAD_CJ_WF)

OBJ_MSC = "obj-msc"
OBJ_ANGULAR = "obj-angular"
OBJ_SHIFT_ANGULAR = "obj-shift-angular"
OBJ_FULL = "obj-msc+shift-angular"
ABLATION_OBJECTIVES = (OBJ_MSC, OBJ_ANGULAR, OBJ_SHIFT_ANGULAR, OBJ_FULL)

ALL_METHODS = TABLE_METHODS + ABLATION_OBJECTIVES

VARIANT_FLAGS = {
    "msc": MSC_METHOD,
    "cj-rc": SCAD_CJ_RC,
    "cj-rr": SCAD_CJ_RR,
    "cj-wf": SCAD_CJ_WF,
}


@dataclass(frozen=True)
class ScoringConfig:
    k: int = 2
    target_sensitivity: float = 0.9
    undetermined_policy: str = "abnormal"
    iou_thresholds: tuple[float, ...] = (0.5, 0.75, 0.9)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if not 0.0 <= self.target_sensitivity <= 1.0:
            raise ContractError("target_sensitivity must lie in [0, 1]")
        if self.undetermined_policy not in ("abnormal", "normal", "exclude"):
            raise ContractError(f"unknown undetermined_policy {self.undetermined_policy!r}")


@dataclass(frozen=True)
class ScadConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    train: ScadTrainParams = field(default_factory=lambda: ScadTrainParams(epochs=500))
    jitter: ColorJitterParams = field(default_factory=ColorJitterParams)
    rect_area_range: tuple[float, float] = (0.1, 0.5)
    rect_aspect_range: tuple[float, float] = (0.5, 2.0)
    rr_points: int = 3
    rr_sigma_frac: float = 1.0 / 8.0

    def make_variant(self, kind: str) -> ShiftVariant:
        return ShiftVariant(
            kind=kind,
            params=self.jitter,
            rect_area_range=self.rect_area_range,
            rect_aspect_range=self.rect_aspect_range,
            rr_points=self.rr_points,
            rr_sigma_frac=self.rr_sigma_frac,
        )


@dataclass(frozen=True)
class DetectorSection:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: DetectorTrainParams = field(default_factory=lambda: DetectorTrainParams(epochs=50))


@dataclass(frozen=True)
class MatrixConfig:
    methods: tuple[str, ...] = TABLE_METHODS
    ablation_objectives: tuple[str, ...] = ABLATION_OBJECTIVES
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self) -> None:
        for m in self.methods + self.ablation_objectives:
            if m not in ALL_METHODS:
                raise ContractError(f"unknown method {m!r}; known: {ALL_METHODS}")
        if not self.seeds:
            raise ContractError("need at least one seed")


@dataclass(frozen=True)
class RunConfig:
    """Desk-scale defaults; stage dataclass defaults carry the original recipe."""

    seed: int = 7
    out_dir: str = "runs/default"
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorSection = field(default_factory=DetectorSection)
    scad: ScadConfig = field(default_factory=ScadConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)


def _coerce(value, typ, path: str):
    origin = typing.get_origin(typ)
    if is_dataclass(typ):
        if not isinstance(value, dict):
            raise ContractError(f"{path}: expected a mapping for {typ.__name__}")
        return build_dataclass(typ, value, path)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(typ)
        if value is None and type(None) in args:
            return None
        for arm in args:
            if arm is type(None):
                continue
            try:
                return _coerce(value, arm, path)
            except ContractError:
                continue
        raise ContractError(f"{path}: {value!r} fits none of {args}")
    if origin is tuple:
        args = typing.get_args(typ)
        if not isinstance(value, (list, tuple)):
            raise ContractError(f"{path}: expected a sequence")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ContractError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        kt, vt = typing.get_args(typ)
        if not isinstance(value, dict):
            raise ContractError(f"{path}: expected a mapping")
        return {
            _coerce(k, kt, f"{path}.{k}"): _coerce(v, vt, f"{path}.{k}") for k, v in value.items()
        }
    if typ is bool:
        if not isinstance(value, bool):
            raise ContractError(f"{path}: expected bool, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ContractError(f"{path}: expected int, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ContractError(f"{path}: expected number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ContractError(f"{path}: expected string, got {value!r}")
        return value
    raise ContractError(f"{path}: unsupported config field type {typ}")


def build_dataclass(cls, data: dict, path: str = ""):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ContractError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        sub_path = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], sub_path)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ContractError(f"{sub_path}: required key missing")
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise ContractError(f"{path or cls.__name__}: {exc}") from exc


def _plain(value):
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config: RunConfig) -> dict:
    return _plain(config)


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load YAML config (defaults when path is None) and apply flat overrides."""
    data: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ContractError(f"{path}: config root must be a mapping")
        data = raw
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return build_dataclass(RunConfig, data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(config), sort_keys=True), encoding="utf-8"
    )
