"""Rank metrics, confusion ratios, and plot-ready exports.

AUROC uses the rank (Mann-Whitney) formulation with half credit for ties, so
it is invariant under strictly monotone score transforms and equals the
trapezoidal area under the exported ROC step curve.  AUPRC uses step
interpolation (no linear smoothing between operating points).
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ABNORMAL, NORMAL, ContractError

POSITIVE = ABNORMAL


def _validate(scores: Sequence[float], labels: Sequence[str], need_both: bool = True) -> None:
    if len(scores) != len(labels) or len(scores) == 0:
        raise ContractError("scores and labels must be nonempty and aligned")
    bad = set(labels) - {NORMAL, ABNORMAL}
    if bad:
        raise ContractError(f"unknown labels {sorted(bad)}")
    if need_both and len(set(labels)) < 2:
        raise ContractError("both classes must be present")


def auroc(scores: Sequence[float], labels: Sequence[str]) -> float:
    """Probability a random abnormal outranks a random normal (ties count 1/2)."""
    _validate(scores, labels)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([1 if l == POSITIVE else 0 for l in labels])
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    rank = 1.0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        avg = (rank + rank + (j - i)) / 2.0
        ranks[order[i : j + 1]] = avg
        rank += j - i + 1
        i = j + 1
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[str]) -> float:
    """Area under precision-recall by the step-interpolation sum over ranked scores."""
    if len(scores) != len(labels) or len(scores) == 0:
        raise ContractError("scores and labels must be nonempty and aligned")
    n_pos = sum(1 for l in labels if l == POSITIVE)
    if n_pos == 0:
        raise ContractError("no positive (abnormal) examples")
    pairs = sorted(zip(scores, labels), key=lambda p: -p[0])
    area = 0.0
    tp = fp = 0
    i = 0
    prev_recall = 0.0
    while i < len(pairs):
        j = i
        while j + 1 < len(pairs) and pairs[j + 1][0] == pairs[i][0]:
            j += 1
        # One threshold step covers the whole tie group.
        for k in range(i, j + 1):
            if pairs[k][1] == POSITIVE:
                tp += 1
            else:
                fp += 1
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def confusion_metrics(decisions: Sequence[bool], labels: Sequence[str]) -> dict[str, float | None]:
    """Accuracy/sensitivity/specificity/precision with abnormal as positive.

    Ratios with a zero denominator come back as None, not zero.
    """
    _validate([0.0] * len(decisions), labels, need_both=False)
    tp = sum(1 for d, l in zip(decisions, labels) if d and l == POSITIVE)
    fp = sum(1 for d, l in zip(decisions, labels) if d and l != POSITIVE)
    fn = sum(1 for d, l in zip(decisions, labels) if not d and l == POSITIVE)
    tn = sum(1 for d, l in zip(decisions, labels) if not d and l != POSITIVE)

    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    return {
        "accuracy": (tp + tn) / len(labels),
        "sensitivity": ratio(tp, tp + fn),
        "specificity": ratio(tn, tn + fp),
        "precision": ratio(tp, tp + fp),
    }


def export_roc(scores: Sequence[float], labels: Sequence[str]) -> list[tuple[float, float]]:
    """(FPR, TPR) step curve from a threshold sweep; endpoints (0,0) and (1,1)."""
    _validate(scores, labels)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([1 if l == POSITIVE else 0 for l in labels])
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    points: list[tuple[float, float]] = []
    # Decision is score > threshold; sweep thresholds down over the unique
    # scores (the top threshold lands on (0, 0)) and finish below the minimum
    # so the curve ends at (1, 1).
    thresholds = list(np.unique(s)[::-1]) + [float(s.min()) - 1.0]
    for thr in thresholds:
        flags = s > thr
        point = (
            float(flags[y == 0].sum() / n_neg),
            float(flags[y == 1].sum() / n_pos),
        )
        if not points or points[-1] != point:
            points.append(point)
    return points


def roc_area(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under an ROC point list."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def summarize_runs(per_method: dict[str, Sequence[float]]) -> list[dict]:
    """Mean and sample standard deviation per method, input order preserved."""
    rows = []
    for method, values in per_method.items():
        if len(values) == 0:
            raise ContractError(f"method {method!r} has no runs")
        vals = np.asarray(values, dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append({"method": method, "mean": float(vals.mean()), "std": std, "n": len(vals)})
    return rows


def write_metric_csv(rows: Sequence[dict], path: str | Path, header_meta: str = "") -> None:
    """Write dict rows as CSV, optionally prefixed by a comment metadata line."""
    if not rows:
        raise ContractError("no rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_meta:
            fh.write(f"# {header_meta}\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_roc_csv(points: Sequence[tuple[float, float]], path: str | Path, header_meta: str = "") -> None:
    rows = [{"fpr": p[0], "tpr": p[1]} for p in points]
    write_metric_csv(rows, path, header_meta)


def write_embeddings_csv(
    rows: Sequence[tuple[str, int, str, np.ndarray]], path: str | Path, header_meta: str = ""
) -> None:
    """(video_id, frame_index, label, vector) rows for external projection tools."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if header_meta:
            fh.write(f"# {header_meta}\n")
        dim = len(rows[0][3]) if rows else 0
        cols = ",".join(f"e{i}" for i in range(dim))
        fh.write(f"video_id,frame_index,label{',' if cols else ''}{cols}\n")
        for vid, idx, label, vec in rows:
            vals = ",".join(repr(float(v)) for v in vec)
            fh.write(f"{vid},{idx},{label},{vals}\n")
