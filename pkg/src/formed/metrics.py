"""Classification metrics, validation/test deltas and seed aggregation."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

METRICS = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")
CSV_COLUMNS = ("dataset", "split", "seed", "ratio") + METRICS
DELTA_COLUMNS = ("dataset", "seed", "ratio") + METRICS

__all__ = [
    "METRICS",
    "CSV_COLUMNS",
    "MetricReport",
    "MetricWarning",
    "binary_auroc",
    "binary_auprc",
    "per_class_prf",
    "compute_metrics",
    "delta_report",
    "aggregate_seeds",
    "write_reports_csv",
    "read_reports_csv",
    "DELTA_COLUMNS",
    "DeltaRow",
    "paired_deltas",
    "write_deltas_csv",
    "read_deltas_csv",
]


class MetricWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MetricReport:
    dataset: str
    split: str
    seed: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    auprc: float
    ratio: float = 1.0

    def __post_init__(self):
        for m in METRICS:
            v = getattr(self, m)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{m}={v} outside [0, 1]")

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def binary_auroc(scores, positive) -> float:
    """P(s+ > s-) + P(s+ = s-)/2 via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average rank over runs of tied scores
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_auprc(scores, positive) -> float:
    """Average precision: sum over distinct thresholds of (R_i - R_{i-1}) * P_i."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive sample")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores is where a threshold takes effect
    last = np.concatenate([np.flatnonzero(np.diff(s)), [len(s) - 1]])
    tp_at = tp[last]
    predicted = last + 1
    precision = tp_at / predicted
    recall = tp_at / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def per_class_prf(pred, labels, classes: int):
    """Per-class (precision, recall, f1, support); undefined ratios are 0."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    out = []
    for k in range(classes):
        tp = int(np.sum((pred == k) & (labels == k)))
        predicted = int(np.sum(pred == k))
        support = int(np.sum(labels == k))
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append((p, r, f, support))
    return out


def compute_metrics(probs, labels, classes: int | None = None) -> dict[str, float]:
    """Accuracy plus macro precision/recall/F1 and one-vs-rest macro AUROC/AUPRC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a non-empty (n, K) probability matrix")
    k = classes or probs.shape[1]
    if probs.shape[1] != k or len(labels) != len(probs):
        raise ValueError(f"probabilities {probs.shape} do not match {len(labels)} labels and {k} classes")
    pred = np.argmax(probs, axis=1)
    present = [c for c in range(k) if np.any(labels == c)]
    absent = sorted(set(range(k)) - set(present))
    if absent:
        warnings.warn(f"classes {absent} have no samples; skipped in macro averages", MetricWarning, stacklevel=2)
    prf = per_class_prf(pred, labels, k)
    undefined = [c for c in present if not np.any(pred == c)]
    if undefined:
        warnings.warn(f"classes {undefined} are never predicted; their precision counts as 0", MetricWarning, stacklevel=2)
    aurocs, auprcs = [], []
    for c in present:
        pos = labels == c
        if pos.all():
            warnings.warn(f"class {c} has no negatives; AUROC skipped", MetricWarning, stacklevel=2)
        else:
            aurocs.append(binary_auroc(probs[:, c], pos))
        auprcs.append(binary_auprc(probs[:, c], pos))
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0  # noqa: E731
    return {
        "accuracy": float(np.mean(pred == labels)),
        "precision": mean([prf[c][0] for c in present]),
        "recall": mean([prf[c][1] for c in present]),
        "f1": mean([prf[c][2] for c in present]),
        "auroc": mean(aurocs),
        "auprc": mean(auprcs),
    }


def delta_report(val: MetricReport, test: MetricReport) -> dict[str, float]:
    """|val - test| per metric for the same dataset, seed and ratio."""
    if (val.dataset, val.seed, val.ratio) != (test.dataset, test.seed, test.ratio):
        raise ValueError(
            f"mismatched reports: {val.dataset}/{val.seed}/{val.ratio} vs {test.dataset}/{test.seed}/{test.ratio}"
        )
    return {m: abs(getattr(val, m) - getattr(test, m)) for m in METRICS}


@dataclass(frozen=True)
class Aggregate:
    dataset: str
    split: str
    ratio: float
    metric: str
    mean: float
    std: float
    count: int


def aggregate_seeds(reports: Iterable[MetricReport]) -> list[Aggregate]:
    """Mean and population std over seeds, grouped by (dataset, split, ratio)."""
    groups: dict[tuple, list[MetricReport]] = {}
    for r in reports:
        groups.setdefault((r.dataset, r.split, r.ratio), []).append(r)
    out = []
    for (dataset, split, ratio), members in groups.items():
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in members])
            out.append(Aggregate(dataset, split, ratio, m, float(vals.mean()), float(vals.std()), len(vals)))
    return out


def _format(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_reports_csv(reports: Sequence[MetricReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([_format(getattr(r, c)) for c in CSV_COLUMNS])
    return path


def read_reports_csv(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
        return [
            MetricReport(
                dataset=row["dataset"],
                split=row["split"],
                seed=int(row["seed"]),
                ratio=float(row["ratio"]),
                **{m: float(row[m]) for m in METRICS},
            )
            for row in reader
        ]


@dataclass(frozen=True)
class DeltaRow:
    dataset: str
    seed: int
    ratio: float
    deltas: dict

    def mean(self) -> float:
        return float(np.mean([self.deltas[m] for m in METRICS]))


def paired_deltas(reports: Iterable[MetricReport]) -> list[DeltaRow]:
    """Match every val report with its test report and return the deltas in val order.

    Reports without a partner on the other split are ignored.
    """
    reports = list(reports)
    tests = {(r.dataset, r.seed, r.ratio): r for r in reports if r.split == "test"}
    out = []
    for r in reports:
        if r.split != "val":
            continue
        partner = tests.get((r.dataset, r.seed, r.ratio))
        if partner is not None:
            out.append(DeltaRow(r.dataset, r.seed, r.ratio, delta_report(r, partner)))
    return out


def write_deltas_csv(rows: Sequence[DeltaRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DELTA_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.seed, _format(r.ratio)] + [_format(r.deltas[m]) for m in METRICS])
    return path


def read_deltas_csv(path) -> list[DeltaRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DELTA_COLUMNS:
            raise ValueError(f"{path}: expected columns {DELTA_COLUMNS}, got {reader.fieldnames}")
        return [
            DeltaRow(row["dataset"], int(row["seed"]), float(row["ratio"]), {m: float(row[m]) for m in METRICS})
            for row in reader
        ]
