"""Aggregate metric CSVs into summary tables and a static delta-range plot."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import CSV_COLUMNS, METRICS, MetricReport, aggregate_seeds, paired_deltas, read_reports_csv

log = logging.getLogger(__name__)

__all__ = ["DeltaRange", "collect_reports", "delta_ranges", "write_summary", "write_delta_summary", "render_delta_svg", "build_report"]

SUMMARY_COLUMNS = ("dataset", "split", "ratio", "metric", "mean", "std", "count")
DELTA_SUMMARY_COLUMNS = ("dataset", "ratio", "metric", "mean", "std", "min", "max", "count")


@dataclass(frozen=True)
class DeltaRange:
    dataset: str
    ratio: float
    metric: str
    mean: float
    std: float
    low: float
    high: float
    count: int


def collect_reports(csv_dir) -> list[MetricReport]:
    """Every metric row below ``csv_dir``; files with other headers are skipped."""
    csv_dir = Path(csv_dir)
    if not csv_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {csv_dir}")
    reports = []
    for path in sorted(csv_dir.rglob("*.csv")):
        with open(path, newline="") as fh:
            header = tuple(next(csv.reader(fh), ()))
        if header != CSV_COLUMNS:
            continue
        reports.extend(read_reports_csv(path))
    if not reports:
        raise ValueError(f"{csv_dir}: no metric CSV files found")
    return reports


def delta_ranges(reports) -> list[DeltaRange]:
    groups: dict[tuple, list[float]] = {}
    for row in paired_deltas(reports):
        for m in METRICS:
            groups.setdefault((row.dataset, row.ratio, m), []).append(row.deltas[m])
    out = []
    for (dataset, ratio, metric), vals in groups.items():
        v = np.array(vals)
        out.append(DeltaRange(dataset, ratio, metric, float(v.mean()), float(v.std()), float(v.min()), float(v.max()), len(v)))
    return out


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return path


def write_summary(reports, path) -> Path:
    aggs = aggregate_seeds(reports)
    return _write(Path(path), SUMMARY_COLUMNS, [(a.dataset, a.split, a.ratio, a.metric, a.mean, a.std, a.count) for a in aggs])


def write_delta_summary(ranges, path) -> Path:
    return _write(
        Path(path), DELTA_SUMMARY_COLUMNS, [(r.dataset, r.ratio, r.metric, r.mean, r.std, r.low, r.high, r.count) for r in ranges]
    )


def render_delta_svg(ranges, title: str = "validation-test delta over seeds") -> str:
    """One row per (dataset, ratio, metric): a min-max bar with a dot at the mean."""
    row_h, left, width, top = 18, 230, 400, 40
    top_value = max([r.high for r in ranges] + [1e-12])
    scale = width / top_value
    height = top + row_h * len(ranges) + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 40}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="10" y="20" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top - 6}" x2="{left}" y2="{height - 34}" stroke="#888"/>',
    ]
    for i, r in enumerate(ranges):
        y = top + i * row_h + row_h / 2
        label = f"{r.dataset} r={r.ratio:g} {r.metric}"
        x0, x1, xm = left + r.low * scale, left + r.high * scale, left + r.mean * scale
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{escape(label)}</text>')
        parts.append(f'<line x1="{x0:.2f}" y1="{y:.1f}" x2="{x1:.2f}" y2="{y:.1f}" stroke="#36c" stroke-width="4"/>')
        parts.append(f'<circle cx="{xm:.2f}" cy="{y:.1f}" r="3.5" fill="#c33"/>')
    axis_y = height - 24
    for k in range(5):
        v = top_value * k / 4
        x = left + v * scale
        parts.append(f'<text x="{x:.2f}" y="{axis_y}" text-anchor="middle">{v:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def build_report(csv_dir, out_dir=None) -> dict[str, Path]:
    """Write summary.csv, delta_summary.csv and delta_range.svg; returns their paths."""
    reports = collect_reports(csv_dir)
    out = Path(out_dir) if out_dir is not None else Path(csv_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranges = delta_ranges(reports)
    paths = {
        "summary": write_summary(reports, out / "summary.csv"),
        "delta_summary": write_delta_summary(ranges, out / "delta_summary.csv"),
    }
    svg = out / "delta_range.svg"
    svg.write_text(render_delta_svg(ranges))
    paths["plot"] = svg
    log.info("report: %d metric rows, %d delta groups", len(reports), len(ranges))
    return paths
