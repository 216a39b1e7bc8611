"""Threshold metrics, rank AUC and the imbalanced test-set harness."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5
    precision_undefined: bool = False  # no positive predictions; precision reported as 0

    def as_dict(self) -> dict:
        return asdict(self)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise ValueError("no samples")
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half.

    Mann-Whitney form via average ranks, O(n log n).
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Positive iff score >= threshold. AUC is NaN when only one class is present."""
    scores, labels = _validate(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        a = auc(scores, labels)
    except ValueError:
        a = float("nan")
    return MetricsReport(
        accuracy=(tp + tn) / labels.size,
        precision=precision,
        recall=recall,
        f1=f1,
        auc=a,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        threshold=threshold,
        precision_undefined=tp + fp == 0,
    )


@dataclass
class RatioReport:
    ratio: float
    precision: float
    recall: float
    f1: float
    auc: float
    n_pos: int
    n_neg: int
    repeats: int
    runs: list[MetricsReport] = field(default_factory=list, repr=False)


def subsample_sizes(n_pos: int, n_neg: int, ratio: float) -> tuple[int, int]:
    """Positives kept for a positive:negative ratio, all negatives kept."""
    want = int(round(ratio * n_neg))
    if ratio <= 0 or want < 1 or want > n_pos:
        raise ValueError(f"ratio {ratio} needs {want} positives; test set has {n_pos} (and {n_neg} negatives)")
    return want, n_neg


def imbalanced_eval(
    scores,
    labels,
    ratios: Sequence[float] = (0.5, 0.2, 0.1),
    repeats: int = 5,
    seed: int = 0,
    threshold: float = 0.5,
) -> list[RatioReport]:
    """Subsample positives to ``ratio * |negatives|`` and average metrics over repeats.

    Scores are computed once for the whole test set and reused; accuracy is
    left out because it is dominated by the majority class here.
    """
    scores, labels = _validate(scores, labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    rng = np.random.default_rng(seed)
    out = []
    for r in ratios:
        k, _ = subsample_sizes(len(pos), len(neg), r)
        runs = []
        for _ in range(repeats):
            keep = pos if k == len(pos) else np.sort(rng.choice(pos, size=k, replace=False))
            idx = np.concatenate([keep, neg])
            runs.append(confusion_metrics(scores[idx], labels[idx], threshold))
        mean = lambda attr: float(np.mean([getattr(m, attr) for m in runs]))
        out.append(
            RatioReport(r, mean("precision"), mean("recall"), mean("f1"), mean("auc"), k, len(neg), repeats, runs)
        )
    return out


METRIC_COLUMNS = ("model", "ratio", "accuracy", "precision", "recall", "f1", "auc")


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def pretty_table(rows: Sequence[dict]) -> str:
    head = "".join(f"{c:>12}" for c in METRIC_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = []
        for c in METRIC_COLUMNS:
            v = r.get(c, "")
            cells.append(f"{v:>12.3f}" if isinstance(v, float) else f"{str(v):>12}")
        lines.append("".join(cells))
    return "\n".join(lines)
