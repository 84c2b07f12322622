"""Counting-based evaluation: density windows, correlation, and grouping.

Detections are reduced to per-case cell counts inside sliding high-power
field (HPF) windows; cases are summarized by the maximum window count and the
mean over the top five spatially separated windows. Machine and human
summaries are then compared by Pearson correlation across a score-threshold
sweep, and an ordinary-least-squares fit with a mean-response confidence band
splits cases into above/below/near groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import DetectionCircle
from .errors import AggregationError, DegenerateInputError, ShapeError
from .special import student_t_critical, student_t_two_sided_p
from .tiling import axis_origins

SWEEP_THRESHOLDS = (0.3, 0.2, 0.15, 0.1)
SWEEP_METRICS = ("top5_mean", "max")


@dataclass(frozen=True)
class HpfConfig:
    """Window geometry for density counting; defaults align with patch size."""

    hpf_width: int = 1024
    hpf_height: int = 1024
    stride: int = 1024

    def __post_init__(self) -> None:
        if self.hpf_width < 1 or self.hpf_height < 1 or self.stride < 1:
            raise ValueError("window dims and stride must be positive")


@dataclass(frozen=True)
class CaseCounts:
    case_id: str
    machine_top5_mean: float
    machine_max: float
    human_top5_mean: float
    human_max: float

    def __post_init__(self) -> None:
        for name in ("machine_top5_mean", "machine_max", "human_top5_mean", "human_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    n: int
    threshold: float | None = None
    metric: str | None = None


@dataclass
class RegressionBand:
    slope: float
    intercept: float
    fitted: np.ndarray
    half_width: np.ndarray
    labels: list[str]
    confidence: float


def hpf_counts(
    detections: list[DetectionCircle],
    wsi_width: int,
    wsi_height: int,
    cfg: HpfConfig,
    ct_score: float = 0.0,
) -> list[tuple[tuple[int, int], int]]:
    """Count qualifying detection centers per sliding window.

    Membership is half-open: a center at the right/bottom window edge belongs
    to the next window, so non-overlapping windows never double count.
    """
    windows = [
        (x, y)
        for y in axis_origins(wsi_height, cfg.hpf_height, cfg.stride)
        for x in axis_origins(wsi_width, cfg.hpf_width, cfg.stride)
    ]
    kept = [d for d in detections if d.score >= ct_score]
    out = []
    for x0, y0 in windows:
        count = sum(
            1
            for d in kept
            if x0 <= d.center_x < x0 + cfg.hpf_width and y0 <= d.center_y < y0 + cfg.hpf_height
        )
        out.append(((x0, y0), count))
    return out


def aggregate_case(
    window_counts: list[tuple[tuple[int, int], int]],
    cfg: HpfConfig,
    disjoint: bool = True,
) -> tuple[float, int]:
    """(top-5 mean, max) over the window counts.

    max is the global maximum. The top-5 selection walks windows by
    descending count (ties by origin y then x) and, when disjoint is set,
    skips any window whose center is closer than one window width to an
    already selected center; with non-overlapping windows this is simply the
    five largest counts.
    """
    if not window_counts:
        raise AggregationError("no windows to aggregate")
    max_count = max(c for _, c in window_counts)
    ordered = sorted(window_counts, key=lambda wc: (-wc[1], wc[0][1], wc[0][0]))
    selected: list[tuple[float, float]] = []
    counts: list[int] = []
    for (x0, y0), count in ordered:
        if len(counts) >= 5:
            break
        center = (x0 + cfg.hpf_width / 2.0, y0 + cfg.hpf_height / 2.0)
        if disjoint and any(
            np.hypot(center[0] - sx, center[1] - sy) < cfg.hpf_width for sx, sy in selected
        ):
            continue
        selected.append(center)
        counts.append(count)
    return float(np.mean(counts)), int(max_count)


def pearson(x, y, threshold: float | None = None, metric: str | None = None) -> CorrelationResult:
    """Pearson r with a two-sided p-value from the exact t distribution."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ShapeError(f"paired 1-D samples required, got shapes {xa.shape} and {ya.shape}")
    n = int(xa.shape[0])
    if n < 3:
        raise DegenerateInputError(f"need at least 3 pairs, got {n}")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("zero variance in one of the samples")
    r = float(np.dot(dx, dy) / np.sqrt(sxx * syy))
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
        p = student_t_two_sided_p(float(t), n - 2)
    return CorrelationResult(r=r, p=p, n=n, threshold=threshold, metric=metric)


@dataclass(frozen=True)
class CaseRecord:
    """Inputs for one case: detections plus the human reference counts."""

    case_id: str
    detections: tuple[DetectionCircle, ...]
    wsi_width: int
    wsi_height: int
    human_top5_mean: float
    human_max: float


@dataclass
class SweepResult:
    correlations: list[CorrelationResult]
    counts: dict[float, list[CaseCounts]]


def threshold_sweep(
    cases: list[CaseRecord],
    cfg: HpfConfig,
    thresholds: tuple[float, ...] = SWEEP_THRESHOLDS,
    metrics: tuple[str, ...] = SWEEP_METRICS,
    disjoint: bool = True,
) -> SweepResult:
    """Correlation table over score thresholds, one result per (metric, threshold).

    Machine counts are recomputed per threshold from the raw detections; the
    per-case counts are returned as well so reports can show them.
    """
    if len(cases) < 3:
        raise DegenerateInputError(f"need at least 3 cases, got {len(cases)}")
    counts: dict[float, list[CaseCounts]] = {}
    for threshold in thresholds:
        rows = []
        for case in cases:
            windows = hpf_counts(
                list(case.detections), case.wsi_width, case.wsi_height, cfg, threshold
            )
            top5, peak = aggregate_case(windows, cfg, disjoint=disjoint)
            rows.append(
                CaseCounts(
                    case_id=case.case_id,
                    machine_top5_mean=top5,
                    machine_max=float(peak),
                    human_top5_mean=case.human_top5_mean,
                    human_max=case.human_max,
                )
            )
        counts[threshold] = rows

    correlations = []
    for metric in metrics:
        for threshold in thresholds:
            rows = counts[threshold]
            if metric == "top5_mean":
                human = [c.human_top5_mean for c in rows]
                machine = [c.machine_top5_mean for c in rows]
            elif metric == "max":
                human = [c.human_max for c in rows]
                machine = [c.machine_max for c in rows]
            else:
                raise ValueError(f"unknown metric {metric!r}")
            correlations.append(pearson(human, machine, threshold=threshold, metric=metric))
    return SweepResult(correlations=correlations, counts=counts)


def regression_with_groups(x, y, confidence: float = 0.95) -> RegressionBand:
    """OLS fit with a mean-response confidence band and 3-way case labels.

    A case is labeled above/below when its y falls outside the band evaluated
    at its x, near otherwise.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ShapeError(f"paired 1-D samples required, got shapes {xa.shape} and {ya.shape}")
    n = int(xa.shape[0])
    if n < 3:
        raise DegenerateInputError(f"need at least 3 pairs, got {n}")
    x_mean = xa.mean()
    sxx = float(np.sum((xa - x_mean) ** 2))
    if sxx == 0.0:
        raise DegenerateInputError("zero variance in x")
    slope = float(np.sum((xa - x_mean) * (ya - ya.mean())) / sxx)
    intercept = float(ya.mean() - slope * x_mean)
    fitted = intercept + slope * xa
    sse = float(np.sum((ya - fitted) ** 2))
    sigma = np.sqrt(sse / (n - 2))
    t_crit = student_t_critical(confidence, n - 2)
    half_width = t_crit * sigma * np.sqrt(1.0 / n + (xa - x_mean) ** 2 / sxx)
    labels = []
    for yi, fi, hw in zip(ya, fitted, half_width):
        if yi > fi + hw:
            labels.append("above")
        elif yi < fi - hw:
            labels.append("below")
        else:
            labels.append("near")
    return RegressionBand(
        slope=slope,
        intercept=intercept,
        fitted=fitted,
        half_width=half_width,
        labels=labels,
        confidence=confidence,
    )
