"""Command-line surface: synth, detect-train, detect-eval, scad-train, score,
eval, and matrix.

Every command is driven by one declarative YAML config (defaults apply when
--config is omitted) plus a few overrides; outputs land under the config's
out_dir and carry the config hash.  Exit codes: 0 success, 2 config error,
3 missing upstream artifact, 4 contract violation, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import VARIANT_FLAGS, RunConfig, config_hash, load_config
from .data import load_manifest, open_sources
from .detector import build_detector, load_detector, save_detector, train_detector
from .experiments import (
    MissingArtifactError,
    detector_eval_rows,
    run_dir_for,
    run_matrix,
    run_single,
    train_method_checkpoint,
)
from .geometry import ContractError
from .metrics import auprc, auroc, confusion_metrics, export_roc, write_metric_csv, write_roc_csv
from .scoring import load_report
from .synth import generate_dataset

log = logging.getLogger("otoscad")

EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_CONTRACT = 4
EXIT_RUNTIME = 5


def _dataset_paths(config: RunConfig) -> tuple[Path, Path]:
    dataset_dir = Path(config.out_dir) / "dataset"
    return dataset_dir, dataset_dir / "manifest.jsonl"


def _load_dataset(config: RunConfig):
    dataset_dir, manifest_path = _dataset_paths(config)
    if not manifest_path.exists():
        raise MissingArtifactError(manifest_path, "otoscad synth")
    manifest = load_manifest(manifest_path)
    return manifest, open_sources(manifest, dataset_dir / manifest.root)


def _load_detector(config: RunConfig):
    path = Path(config.out_dir) / "detector.pt"
    if not path.exists():
        raise MissingArtifactError(path, "otoscad detect-train")
    model, _ = load_detector(path)
    return model


def _method_for(config: RunConfig, variant_flag: str | None) -> str:
    flag = variant_flag or "cj-wf"
    if flag not in VARIANT_FLAGS:
        raise ContractError(f"unknown variant {flag!r}; choices: {sorted(VARIANT_FLAGS)}")
    return VARIANT_FLAGS[flag]


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> None:
    dataset_dir, manifest_path = _dataset_paths(config)
    chash = config_hash(config)
    meta_path = dataset_dir / "dataset_meta.json"
    if manifest_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("config_hash") == chash:
            log.info("dataset already generated at %s", dataset_dir)
            return
    generate_dataset(config.synth, dataset_dir)
    meta_path.write_text(
        json.dumps({"config_hash": chash, "seed": config.seed}, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    log.info("dataset written to %s", dataset_dir)


def cmd_detect_train(config: RunConfig, args: argparse.Namespace) -> None:
    manifest, sources = _load_dataset(config)
    chash = config_hash(config)
    model = build_detector(config.detector.model, config.seed)
    model, curve = train_detector(manifest, sources, model, config.detector.train, config.seed)
    path = Path(config.out_dir) / "detector.pt"
    save_detector(model, path, config.seed, meta={"config_hash": chash, "loss_curve": curve})
    write_metric_csv(
        [{"epoch": i, "loss": v} for i, v in enumerate(curve)],
        Path(config.out_dir) / "detector_curve.csv",
        f"config_hash={chash} seed={config.seed}",
    )
    log.info("detector checkpoint written to %s", path)


def cmd_detect_eval(config: RunConfig, args: argparse.Namespace) -> None:
    manifest, sources = _load_dataset(config)
    detector = _load_detector(config)
    rows = detector_eval_rows(config, detector, manifest, sources)
    out = Path(config.out_dir) / "detector_accuracy.csv"
    write_metric_csv(rows, out, f"config_hash={config_hash(config)} seed={config.seed}")
    log.info("detection accuracy table written to %s", out)


def cmd_scad_train(config: RunConfig, args: argparse.Namespace) -> None:
    manifest, sources = _load_dataset(config)
    method = _method_for(config, args.variant)
    seed = config.matrix.seeds[0]
    _, _, run_dir = train_method_checkpoint(config, method, seed, manifest, sources)
    log.info("embedding checkpoint written under %s", run_dir)


def cmd_score(config: RunConfig, args: argparse.Namespace) -> None:
    manifest, sources = _load_dataset(config)
    detector = _load_detector(config)
    method = _method_for(config, args.variant)
    seed = config.matrix.seeds[0]
    outcome = run_single(
        config, method, seed, manifest, sources, detector, allow_train=False
    )
    log.info("anomaly reports written under %s", outcome.run_dir)


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    method = _method_for(config, args.variant)
    seed = config.matrix.seeds[0]
    run_dir = run_dir_for(config, method, seed)
    report_path = run_dir / "report_test.json"
    if not report_path.exists():
        raise MissingArtifactError(report_path, "otoscad score")
    report = load_report(report_path)
    scores, labels = report.labeled_scores()
    decisions, dlabels = report.decisions()
    conf = confusion_metrics(decisions, dlabels)
    rows = [
        {
            "method": method,
            "seed": seed,
            "auroc": auroc(scores, labels),
            "auprc": auprc(scores, labels),
            "threshold": report.threshold,
            **{k: ("" if v is None else v) for k, v in conf.items()},
        }
    ]
    meta = f"config_hash={config_hash(config)} seed={seed} method={method}"
    write_metric_csv(rows, run_dir / "metrics.csv", meta)
    write_roc_csv(export_roc(scores, labels), run_dir / "roc_test.csv", meta)
    log.info("metric report written under %s", run_dir)


def cmd_matrix(config: RunConfig, args: argparse.Namespace) -> None:
    result = run_matrix(config, include_ablation=not args.no_ablation)
    log.info(
        "matrix complete: %d runs, summaries under %s", len(result.runs), config.out_dir
    )


COMMANDS = {
    "synth": cmd_synth,
    "detect-train": cmd_detect_train,
    "detect-eval": cmd_detect_eval,
    "scad-train": cmd_scad_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otoscad",
        description="Otoscopy video screening pipeline (detection + anomaly scoring)",
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML run config (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name in ("scad-train", "score", "eval"):
            p.add_argument(
                "--variant",
                choices=sorted(VARIANT_FLAGS),
                default=None,
                help="method variant (default cj-wf)",
            )
        if name == "matrix":
            p.add_argument("--no-ablation", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    except (ContractError, FileNotFoundError, OSError) as exc:
        _emit_error("config", exc)
        return EXIT_CONFIG
    log.info("config hash %s", config_hash(config))
    try:
        COMMANDS[args.command](config, args)
    except MissingArtifactError as exc:
        _emit_error("missing-artifact", exc)
        return EXIT_MISSING_ARTIFACT
    except ContractError as exc:
        _emit_error("contract", exc)
        return EXIT_CONTRACT
    except RuntimeError as exc:
        _emit_error("runtime", exc)
        return EXIT_RUNTIME
    return 0


def _emit_error(category: str, exc: Exception) -> None:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
