"""CSV and SVG report writers; every byte is a pure function of the inputs.

Column orders are fixed and documented in the README. Floats go through
Python's shortest round-trip repr in CSVs and fixed two-decimal formatting in
SVGs, so identical inputs always produce identical files.
"""

from __future__ import annotations

import csv

import numpy as np

from .detection import DetectionCircle
from .errors import SchemaError
from .evaluate import CaseCounts, CorrelationResult, RegressionBand
from .model import TrainResult
from .synth import ShiftPoint


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_correlation_csv(path, results: list[CorrelationResult]) -> None:
    """Columns: metric, ct_score, r, p, n."""
    _write_rows(
        path,
        ["metric", "ct_score", "r", "p", "n"],
        [[res.metric, res.threshold, res.r, res.p, res.n] for res in results],
    )


def write_case_counts_csv(path, counts: dict[float, list[CaseCounts]]) -> None:
    """Columns: case_id, ct_score, machine_top5_mean, machine_max, human_top5_mean, human_max."""
    rows = []
    for threshold in sorted(counts, reverse=True):
        for c in counts[threshold]:
            rows.append(
                [
                    c.case_id,
                    threshold,
                    c.machine_top5_mean,
                    c.machine_max,
                    c.human_top5_mean,
                    c.human_max,
                ]
            )
    _write_rows(
        path,
        ["case_id", "ct_score", "machine_top5_mean", "machine_max", "human_top5_mean", "human_max"],
        rows,
    )


def write_group_labels_csv(path, case_ids: list[str], x, y, band: RegressionBand) -> None:
    """Columns: case_id, human, machine, fitted, half_width, label."""
    rows = [
        [cid, xi, yi, fi, hw, label]
        for cid, xi, yi, fi, hw, label in zip(
            case_ids, x, y, band.fitted, band.half_width, band.labels
        )
    ]
    _write_rows(path, ["case_id", "human", "machine", "fitted", "half_width", "label"], rows)


def write_loss_trace_csv(path, result: TrainResult) -> None:
    """Columns: step, total_loss, detection_loss, contour_loss."""
    rows = [
        [step, result.loss_trace[step], result.detection_trace[step], result.contour_trace[step]]
        for step in range(result.steps)
    ]
    _write_rows(path, ["step", "total_loss", "detection_loss", "contour_loss"], rows)


def write_shift_curve_csv(path, points: list[ShiftPoint]) -> None:
    """Columns: luminance_delta, intensity_delta, f1, true_positives, false_positives, false_negatives."""
    rows = [
        [p.luminance_delta, p.intensity_delta, p.f1, p.true_positives, p.false_positives, p.false_negatives]
        for p in points
    ]
    _write_rows(
        path,
        ["luminance_delta", "intensity_delta", "f1", "true_positives", "false_positives", "false_negatives"],
        rows,
    )


def write_detections_csv(path, rows: list[tuple[str, DetectionCircle]]) -> None:
    """Columns: case_id, center_x, center_y, radius, score, category."""
    _write_rows(
        path,
        ["case_id", "center_x", "center_y", "radius", "score", "category"],
        [[cid, d.center_x, d.center_y, d.radius, d.score, d.category] for cid, d in rows],
    )


def read_detections_csv(path) -> list[tuple[str, DetectionCircle]]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"case_id", "center_x", "center_y", "radius", "score", "category"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"detections CSV needs columns {sorted(required)}")
        for row in reader:
            out.append(
                (
                    row["case_id"],
                    DetectionCircle(
                        center_x=float(row["center_x"]),
                        center_y=float(row["center_y"]),
                        radius=float(row["radius"]),
                        score=float(row["score"]),
                        category=int(row["category"]),
                    ),
                )
            )
    return out


def read_human_counts_csv(path) -> dict[str, tuple[float, float]]:
    """case_id -> (human_top5_mean, human_max)."""
    out: dict[str, tuple[float, float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"case_id", "human_top5_mean", "human_max"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"human counts CSV needs columns {sorted(required)}")
        for row in reader:
            out[row["case_id"]] = (float(row["human_top5_mean"]), float(row["human_max"]))
    return out


class _Axes:
    """Maps data coordinates onto a fixed SVG canvas with padded ranges."""

    def __init__(self, xs, ys, width=640, height=480, margin=60):
        self.width = width
        self.height = height
        self.margin = margin
        self.x_lo, self.x_hi = self._padded(xs)
        self.y_lo, self.y_hi = self._padded(ys)

    @staticmethod
    def _padded(values):
        lo = float(min(values))
        hi = float(max(values))
        if hi == lo:
            lo -= 1.0
            hi += 1.0
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    def px(self, x: float) -> float:
        frac = (x - self.x_lo) / (self.x_hi - self.x_lo)
        return self.margin + frac * (self.width - 2 * self.margin)

    def py(self, y: float) -> float:
        frac = (y - self.y_lo) / (self.y_hi - self.y_lo)
        return self.height - self.margin - frac * (self.height - 2 * self.margin)

    def frame(self, xlabel: str, ylabel: str, title: str) -> list[str]:
        m, w, h = self.margin, self.width, self.height
        parts = [
            f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
            f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
            f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
            f'<text x="{w / 2:.2f}" y="{h - m / 4:.2f}" text-anchor="middle" font-size="14">{xlabel}</text>',
            f'<text x="{m / 4:.2f}" y="{h / 2:.2f}" text-anchor="middle" font-size="14" '
            f'transform="rotate(-90 {m / 4:.2f} {h / 2:.2f})">{ylabel}</text>',
            f'<text x="{w / 2:.2f}" y="{m / 2:.2f}" text-anchor="middle" font-size="16">{title}</text>',
        ]
        for i in range(5):
            fx = self.x_lo + (self.x_hi - self.x_lo) * i / 4
            fy = self.y_lo + (self.y_hi - self.y_lo) * i / 4
            x = self.px(fx)
            y = self.py(fy)
            parts.append(f'<line x1="{x:.2f}" y1="{h - m}" x2="{x:.2f}" y2="{h - m + 5}" stroke="black"/>')
            parts.append(
                f'<text x="{x:.2f}" y="{h - m + 20}" text-anchor="middle" font-size="11">{fx:.3g}</text>'
            )
            parts.append(f'<line x1="{m - 5}" y1="{y:.2f}" x2="{m}" y2="{y:.2f}" stroke="black"/>')
            parts.append(
                f'<text x="{m - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{fy:.3g}</text>'
            )
        return parts


_GROUP_COLORS = {"above": "#d62728", "below": "#1f77b4", "near": "#2ca02c"}


def svg_regression_figure(
    x,
    y,
    band: RegressionBand,
    xlabel: str = "human count",
    ylabel: str = "machine count",
    title: str = "machine vs human counts",
) -> str:
    """Scatter with OLS line, confidence band, and group-colored points."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    band_lo = band.fitted - band.half_width
    band_hi = band.fitted + band.half_width
    axes = _Axes(xa, np.concatenate([ya, band_lo, band_hi]))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{axes.width}" height="{axes.height}" '
        f'viewBox="0 0 {axes.width} {axes.height}">'
    ]
    parts.extend(axes.frame(xlabel, ylabel, title))

    order = np.argsort(xa, kind="stable")
    upper = [f"{axes.px(xa[i]):.2f},{axes.py(band_hi[i]):.2f}" for i in order]
    lower = [f"{axes.px(xa[i]):.2f},{axes.py(band_lo[i]):.2f}" for i in order[::-1]]
    parts.append(
        f'<polygon points="{" ".join(upper + lower)}" fill="#9ecae1" fill-opacity="0.45" stroke="none"/>'
    )

    x_line = (axes.x_lo, axes.x_hi)
    y_line = (band.intercept + band.slope * x_line[0], band.intercept + band.slope * x_line[1])
    parts.append(
        f'<line x1="{axes.px(x_line[0]):.2f}" y1="{axes.py(y_line[0]):.2f}" '
        f'x2="{axes.px(x_line[1]):.2f}" y2="{axes.py(y_line[1]):.2f}" stroke="#1f4e79" stroke-width="2"/>'
    )

    for xi, yi, label in zip(xa, ya, band.labels):
        parts.append(
            f'<circle cx="{axes.px(xi):.2f}" cy="{axes.py(yi):.2f}" r="4" '
            f'fill="{_GROUP_COLORS[label]}" stroke="black" stroke-width="0.5"/>'
        )

    for i, (label, color) in enumerate(sorted(_GROUP_COLORS.items())):
        ly = axes.margin + 18 + 16 * i
        parts.append(
            f'<circle cx="{axes.width - axes.margin - 90}" cy="{ly}" r="4" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{axes.width - axes.margin - 80}" y="{ly + 4}" font-size="12">{label}</text>'
        )

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_shift_curve(points: list[ShiftPoint], title: str = "F1 under appearance shift") -> str:
    """F1 against shift magnitude (Euclidean norm of the two deltas)."""
    mags = [float(np.hypot(p.luminance_delta, p.intensity_delta)) for p in points]
    f1s = [p.f1 for p in points]
    axes = _Axes(mags, [0.0, 1.0])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{axes.width}" height="{axes.height}" '
        f'viewBox="0 0 {axes.width} {axes.height}">'
    ]
    parts.extend(axes.frame("shift magnitude", "detection F1", title))
    pts = " ".join(f"{axes.px(m):.2f},{axes.py(f):.2f}" for m, f in zip(mags, f1s))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e79" stroke-width="2"/>')
    for m, f in zip(mags, f1s):
        parts.append(
            f'<circle cx="{axes.px(m):.2f}" cy="{axes.py(f):.2f}" r="4" fill="#d62728" '
            f'stroke="black" stroke-width="0.5"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
